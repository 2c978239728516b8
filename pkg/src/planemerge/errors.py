"""Exception hierarchy shared across the pipeline stages."""


class PlanemergeError(Exception):
    """Base class for all errors raised by this package."""


class DegenerateConfiguration(PlanemergeError):
    """Point configuration is rank-deficient (collinear or coincident)."""


class PointAtInfinity(PlanemergeError):
    """Homogeneous image of a point has a vanishing third coordinate."""


class PureRotation(PlanemergeError):
    """Homography is a rotation; plane normal and distance are unobservable."""


class DecompositionFailed(PlanemergeError):
    """No decomposition candidate passes the positive-depth check."""


class InsufficientMatches(PlanemergeError):
    """Fewer matches than a minimal sample requires."""


class ExcessiveDegeneracy(PlanemergeError):
    """More than half of the hypothesis draws failed to fit."""


class EmbeddingFailed(PlanemergeError):
    """Eigen-solve for the kernel embedding did not converge."""


class TooFewPoints(PlanemergeError):
    """Not enough points to triangulate."""


class MissingTexture(PlanemergeError):
    """Texture term requested but no color means are available."""


class NoValidPatches(PlanemergeError):
    """Labeling problem cannot be built without at least one valid patch."""


class LabelOutOfRange(PlanemergeError):
    """A labeling references a label outside the problem's label set."""


class InvalidProblem(PlanemergeError):
    """Labeling problem contains non-finite energies."""


class TooLarge(PlanemergeError):
    """Exhaustive search space exceeds the safety cap."""


class PlaneNotVisible(PlanemergeError):
    """A scene plane does not yield enough matches visible in both views."""


class MatchFileError(PlanemergeError):
    """Match or labeling file cannot be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(PlanemergeError):
    """Run configuration is invalid."""


class PipelineError(PlanemergeError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}': {cause}")
        self.stage = stage
        self.cause = cause
