"""Multi-plane detection from two-view feature correspondences.

Pipeline: locally sampled homography hypotheses, ordered-residual-kernel
clustering into initial patches, Delaunay distance refinement with plane
decomposition, and a final match relabeling by MRF energy minimization
with sequential tree-reweighted message passing.
"""

from .geometry import (
    OUTLIER,
    Correspondence,
    Homography,
    Intrinsics,
    PlaneDecomposition,
    compose_homography,
    decompose_homography,
    estimate_homography,
    transfer_residual,
)
from .multistructure import PatchLabeling
from .bench import generate_scene, run_pipeline, scene_preset

__all__ = [
    "OUTLIER",
    "Correspondence",
    "Homography",
    "Intrinsics",
    "PlaneDecomposition",
    "PatchLabeling",
    "compose_homography",
    "decompose_homography",
    "estimate_homography",
    "transfer_residual",
    "generate_scene",
    "run_pipeline",
    "scene_preset",
]
