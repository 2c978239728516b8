"""Synthetic two-view multi-plane scenes, evaluation metrics, and the
end-to-end pipeline.

Scenes are defined by plane equations in the first camera frame, a second
camera pose, and intrinsics; matches are plane points projected into both
views with Gaussian pixel noise on the second view and a fraction of
gross outliers.  Metrics follow the usual multi-plane evaluation:
assignment-optimal classification error plus the PS/AD coverage matrices.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.optimize

from .config import RunConfig
from .errors import InsufficientMatches, PlanemergeError, PipelineError, PlaneNotVisible
from .geometry import (
    OUTLIER,
    Correspondence,
    Homography,
    Intrinsics,
    PlaneDecomposition,
    compose_homography,
)
from .mrf import EnergyWeights, build_mrf, total_energy
from .multistructure import (
    ClusterConfig,
    ORKConfig,
    PatchLabeling,
    drop_small_patches,
    initial_patches,
)
from .refinement import (
    build_patches,
    cut_mesh_by_distance,
    default_cut_threshold,
    delaunay_triangulate,
    estimate_global_motion,
    local_normals,
)
from .sampling import sample_local_hypotheses
from .solver import trws_solve

# ---------------------------------------------------------------------------
# Scene specification and generation


def rotation_about(axis: np.ndarray, degrees: float) -> np.ndarray:
    """Rodrigues rotation matrix about an arbitrary axis."""
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    th = np.radians(degrees)
    k = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + np.sin(th) * k + (1 - np.cos(th)) * (k @ k)


@dataclass(frozen=True)
class PlaneSpec:
    """One scene plane: unit normal and distance (camera-1 frame, N.X = D,
    D > 0), a texture color, and an axis-aligned extent box."""

    normal: np.ndarray
    distance: float
    color: np.ndarray  # (3,) in [0, 1]
    extent: np.ndarray  # (3, 2) min/max per camera-1 axis

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        n = n / np.linalg.norm(n)
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "color", np.asarray(self.color, dtype=float))
        object.__setattr__(self, "extent", np.asarray(self.extent, dtype=float))
        if not self.distance > 0:
            raise ValueError("plane distance must be positive")


@dataclass(frozen=True)
class SceneSpec:
    planes: tuple[PlaneSpec, ...]
    rotation: np.ndarray  # camera-1 -> camera-2
    translation: np.ndarray
    intrinsics: Intrinsics
    image_size: tuple[int, int] = (640, 480)
    matches_per_plane: int = 300
    noise_sigma: float = 0.5
    outlier_fraction: float = 0.0
    seed: int = 0
    color_jitter: float = 0.02

    def __post_init__(self):
        if not 0 <= self.outlier_fraction < 1:
            raise ValueError("outlier_fraction must be in [0, 1)")
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float))
        object.__setattr__(
            self, "translation", np.asarray(self.translation, dtype=float)
        )


@dataclass
class SceneData:
    matches: list[Correspondence]
    true_homographies: list[Homography]
    true_normals: list[np.ndarray]
    spec: SceneSpec

    @property
    def gt_labels(self) -> np.ndarray:
        return np.array(
            [c.gt_plane if c.gt_plane is not None else OUTLIER for c in self.matches],
            dtype=int,
        )


def _project(k: np.ndarray, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates and depths of (n, 3) camera-frame points."""
    q = pts @ k.T
    return q[:, :2] / q[:, 2:3], pts[:, 2]


def _sample_plane_points(
    rng: np.random.Generator, plane: PlaneSpec, count: int
) -> np.ndarray:
    """Uniform points on the plane inside the extent box (one batch)."""
    axis = int(np.argmax(np.abs(plane.normal)))
    others = [i for i in range(3) if i != axis]
    pts = np.empty((count, 3))
    for i in others:
        lo, hi = plane.extent[i]
        pts[:, i] = rng.uniform(lo, hi, size=count)
    solved = (
        plane.distance - pts[:, others[0]] * plane.normal[others[0]]
        - pts[:, others[1]] * plane.normal[others[1]]
    ) / plane.normal[axis]
    pts[:, axis] = solved
    lo, hi = plane.extent[axis]
    ok = (solved >= lo - 1e-9) & (solved <= hi + 1e-9)
    return pts[ok]


def generate_scene(spec: SceneSpec) -> SceneData:
    """Deterministic matches with ground truth for a synthetic scene.

    Points are rejection-sampled per plane until matches_per_plane of them
    project inside both images with positive depth; Gaussian pixel noise
    goes on the view-2 points, and an outlier_fraction Bernoulli draw
    replaces view-2 points with uniform image points (ground truth label
    OUTLIER).

    Raises PlaneNotVisible when a plane cannot produce enough matches.
    """
    rng = np.random.default_rng(spec.seed)
    k = spec.intrinsics.k
    w, h = spec.image_size
    r, t = spec.rotation, spec.translation

    xs1, xs2, labels, colors = [], [], [], []
    for pi, plane in enumerate(spec.planes):
        got = 0
        tries = 0
        pts_kept = []
        while got < spec.matches_per_plane:
            if tries > 200 * spec.matches_per_plane:
                raise PlaneNotVisible(f"plane {pi} yields too few visible matches")
            batch = _sample_plane_points(rng, plane, spec.matches_per_plane)
            tries += spec.matches_per_plane
            if len(batch) == 0:
                continue
            p1, z1 = _project(k, batch)
            batch2 = batch @ r.T + t
            p2, z2 = _project(k, batch2)
            ok = (
                (z1 > 0) & (z2 > 0)
                & (p1[:, 0] >= 0) & (p1[:, 0] < w) & (p1[:, 1] >= 0) & (p1[:, 1] < h)
                & (p2[:, 0] >= 0) & (p2[:, 0] < w) & (p2[:, 1] >= 0) & (p2[:, 1] < h)
            )
            take = min(int(ok.sum()), spec.matches_per_plane - got)
            sel = np.flatnonzero(ok)[:take]
            pts_kept.append((p1[sel], p2[sel]))
            got += take
        x1 = np.concatenate([a for a, _ in pts_kept])
        x2 = np.concatenate([b for _, b in pts_kept])
        xs1.append(x1)
        xs2.append(x2)
        labels.append(np.full(len(x1), pi, dtype=int))
        jitter = rng.normal(0.0, spec.color_jitter, size=(len(x1), 3))
        colors.append(np.clip(plane.color[None, :] + jitter, 0.0, 1.0))

    x1 = np.concatenate(xs1)
    x2 = np.concatenate(xs2)
    gt = np.concatenate(labels)
    col = np.concatenate(colors)

    if spec.noise_sigma > 0:
        x2 = x2 + rng.normal(0.0, spec.noise_sigma, size=x2.shape)
    if spec.outlier_fraction > 0:
        flip = rng.uniform(size=len(x1)) < spec.outlier_fraction
        n_out = int(flip.sum())
        x2[flip, 0] = rng.uniform(0, w, size=n_out)
        x2[flip, 1] = rng.uniform(0, h, size=n_out)
        gt[flip] = OUTLIER
        col[flip] = rng.uniform(0, 1, size=(n_out, 3))

    matches = [
        Correspondence(
            id=i, x=x1[i], x_prime=x2[i], color_mean=col[i], gt_plane=int(gt[i])
        )
        for i in range(len(x1))
    ]
    homs = []
    normals = []
    for plane in spec.planes:
        d = PlaneDecomposition(
            R=r, T=t / np.linalg.norm(t), N=plane.normal,
            D=plane.distance / np.linalg.norm(t),
        )
        homs.append(compose_homography(d, spec.intrinsics))
        normals.append(plane.normal)
    return SceneData(matches=matches, true_homographies=homs,
                     true_normals=normals, spec=spec)


# ---------------------------------------------------------------------------
# Scene presets

_K_DEFAULT = np.array([[500.0, 0.0, 320.0], [0.0, 500.0, 240.0], [0.0, 0.0, 1.0]])


def _plane(n, d, color, extent) -> PlaneSpec:
    return PlaneSpec(
        normal=np.array(n, dtype=float),
        distance=float(d),
        color=np.array(color, dtype=float),
        extent=np.array(extent, dtype=float),
    )


def scene_preset(
    name: str,
    seed: int = 0,
    matches_per_plane: int = 300,
    noise_sigma: float = 0.5,
    outlier_fraction: float = 0.0,
) -> SceneSpec:
    """Named scene families: corridor (4 planes), corner (3), box (3), lab (4).

    Camera motion stays in the few-centimeter, few-degree range relative to
    room-scale plane distances.
    """
    k = Intrinsics(_K_DEFAULT)
    if name == "corner":
        planes = (
            _plane([-1, 0, 0], 1.6, [0.85, 0.3, 0.25], [[-1.6, -1.6], [-1.0, 1.0], [2.7, 4.4]]),
            _plane([0, 0, 1], 4.5, [0.25, 0.55, 0.85], [[-1.6, 1.6], [-1.0, 1.0], [4.5, 4.5]]),
            _plane([0, 1, 0], 1.05, [0.35, 0.75, 0.3], [[-1.6, 1.6], [1.05, 1.05], [2.4, 4.4]]),
        )
        rot = rotation_about([0.2, 1.0, 0.1], 3.0)
        tr = np.array([0.17, 0.02, 0.04])
    elif name == "box":
        # Three faces of a box seen in a 3/4 view from above-front.  Each
        # face extent is the (slightly shrunk) bounding box of the physical
        # face rectangle, so the visible faces never interleave in the
        # image the way transparent infinite planes would.
        rb = rotation_about([1, 0, 0], 22.0) @ rotation_about([0, 1, 0], 28.0)
        center = np.array([0.0, 0.45, 3.1])
        half = np.array([0.85, 0.55, 0.85])
        face_defs = (
            ((0, 0, -1), (0, 0, -half[2]), (1, 0, 0), (0, 1, 0), (half[0], half[1]), [0.8, 0.7, 0.2]),
            ((0, -1, 0), (0, -half[1], 0), (1, 0, 0), (0, 0, 1), (half[0], half[2]), [0.55, 0.25, 0.7]),
            ((1, 0, 0), (half[0], 0, 0), (0, 1, 0), (0, 0, 1), (half[1], half[2]), [0.25, 0.65, 0.65]),
        )
        face_planes = []
        for nw, off, ax_u, ax_v, halves, color in face_defs:
            n = rb @ np.array(nw, dtype=float)
            fc = center + rb @ np.array(off, dtype=float)
            u_ax = rb @ np.array(ax_u, dtype=float)
            v_ax = rb @ np.array(ax_v, dtype=float)
            hu, hv = 0.85 * halves[0], 0.85 * halves[1]
            corners = np.array(
                [fc + su * hu * u_ax + sv * hv * v_ax for su in (-1, 1) for sv in (-1, 1)]
            )
            d = float(n @ fc)
            if d < 0:
                n, d = -n, -d
            face_planes.append(
                _plane(n, d, color, np.column_stack([corners.min(0), corners.max(0)]))
            )
        planes = tuple(face_planes)
        rot = rotation_about([0.0, 1.0, 0.2], 2.5)
        tr = np.array([0.14, -0.03, 0.05])
    elif name == "corridor":
        planes = (
            _plane([-1, 0, 0], 1.5, [0.85, 0.3, 0.25], [[-1.5, -1.5], [-1.1, 1.1], [2.4, 8.0]]),
            _plane([1, 0, 0], 1.5, [0.25, 0.55, 0.85], [[1.5, 1.5], [-1.1, 1.1], [2.4, 8.0]]),
            _plane([0, 1, 0], 1.2, [0.35, 0.75, 0.3], [[-1.4, 1.4], [1.2, 1.2], [2.6, 8.0]]),
            _plane([0, -1, 0], 1.2, [0.75, 0.7, 0.3], [[-1.4, 1.4], [-1.2, -1.2], [2.6, 8.0]]),
        )
        rot = rotation_about([0.1, 1.0, 0.0], 2.0)
        tr = np.array([0.04, 0.02, 0.18])
    elif name == "lab":
        planes = (
            _plane([0, 1, 0], 1.2, [0.35, 0.75, 0.3], [[-1.7, 1.7], [1.2, 1.2], [2.7, 5.3]]),
            _plane([0, 0, 1], 5.4, [0.25, 0.55, 0.85], [[-1.7, 1.7], [-1.2, 1.2], [5.4, 5.4]]),
            _plane([-1, 0, 0], 1.8, [0.85, 0.3, 0.25], [[-1.8, -1.8], [-1.2, 1.2], [3.0, 5.3]]),
            _plane([1, 0, 0], 1.8, [0.75, 0.7, 0.3], [[1.8, 1.8], [-1.2, 1.2], [3.0, 5.3]]),
        )
        rot = rotation_about([0.3, 1.0, 0.2], 4.0)
        tr = np.array([0.15, 0.04, 0.06])
    else:
        raise ValueError(f"unknown preset '{name}'")
    return SceneSpec(
        planes=planes,
        rotation=rot,
        translation=tr,
        intrinsics=k,
        matches_per_plane=matches_per_plane,
        noise_sigma=noise_sigma,
        outlier_fraction=outlier_fraction,
        seed=seed,
    )


PRESETS = ("corridor", "corner", "box", "lab")


# ---------------------------------------------------------------------------
# Metrics


@dataclass
class EvalReport:
    classification_error: float  # percent
    detected_planes: int
    gt_planes: int
    ps: np.ndarray  # (S, D), column-normalized percent
    ad: np.ndarray  # (S, D), row-normalized percent


def _contingency(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Counts over matches that are inliers on both sides: rows = scene
    planes, columns = detected planes."""
    s = int(gt.max()) + 1 if (gt >= 0).any() else 0
    d = int(pred.max()) + 1 if (pred >= 0).any() else 0
    c = np.zeros((s, d), dtype=float)
    both = (gt >= 0) & (pred >= 0)
    for si, di in zip(gt[both], pred[both]):
        c[si, di] += 1
    return c


def classification_error(pred: PatchLabeling, gt: np.ndarray) -> float:
    """Percent of ground-truth inlier matches not explained by the best
    one-to-one pairing of detected planes to scene planes.

    A predicted OUTLIER on a true inlier counts as an error; true outliers
    are excluded from the denominator.
    """
    gt = np.asarray(gt, dtype=int)
    total = int((gt >= 0).sum())
    if total == 0:
        return 0.0
    c = _contingency(pred.labels, gt)
    if c.size == 0:
        return 100.0
    rows, cols = scipy.optimize.linear_sum_assignment(c, maximize=True)
    matched = float(c[rows, cols].sum())
    return 100.0 * (total - matched) / total


def ps_ad_tables(pred: PatchLabeling, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """PS (share of each detected plane inside each scene plane, columns
    sum to 100) and AD (share of each scene plane covered by each detected
    plane, rows sum to 100)."""
    c = _contingency(pred.labels, np.asarray(gt, dtype=int))
    if c.size == 0:
        return c.copy(), c.copy()
    col = c.sum(axis=0, keepdims=True)
    row = c.sum(axis=1, keepdims=True)
    ps = 100.0 * np.divide(c, col, out=np.zeros_like(c), where=col > 0)
    ad = 100.0 * np.divide(c, row, out=np.zeros_like(c), where=row > 0)
    return ps, ad


def evaluate(pred: PatchLabeling, gt: np.ndarray) -> EvalReport:
    gt = np.asarray(gt, dtype=int)
    ps, ad = ps_ad_tables(pred, gt)
    return EvalReport(
        classification_error=classification_error(pred, gt),
        detected_planes=pred.n_patches,
        gt_planes=int(gt.max()) + 1 if (gt >= 0).any() else 0,
        ps=ps,
        ad=ad,
    )


# ---------------------------------------------------------------------------
# Pipeline


@dataclass
class PipelineResult:
    labeling: PatchLabeling
    report: Optional[EvalReport]
    diagnostics: dict
    stages: dict = field(default_factory=dict)  # stage name -> PatchLabeling


def _stage(name: str):
    """Wrap stage errors with the stage name."""

    class _ctx:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and isinstance(exc, PlanemergeError):
                raise PipelineError(name, exc) from exc
            return False

    return _ctx()


def run_pipeline(
    matches: Sequence[Correspondence],
    config: Optional[RunConfig] = None,
    intrinsics: Optional[Intrinsics] = None,
) -> PipelineResult:
    """Full detection pipeline on a set of matches.

    Stages: local hypothesis sampling, initial patches, Delaunay distance
    cutting, plane models and local normals, MRF construction, TRWS, and a
    final small-label sweep.  Diagnostics collect per-stage patch counts,
    energies, and the solver bound trace.
    """
    cfg = config or RunConfig()
    if len(matches) < 20:
        raise InsufficientMatches(f"pipeline needs >= 20 matches, got {len(matches)}")
    diag: dict = {"warnings": [], "timings": {}}
    if intrinsics is None:
        intrinsics = Intrinsics.identity()
        diag["warnings"].append(
            "no intrinsics supplied; assuming K = I (coordinates treated as normalized)"
        )

    t0 = time.perf_counter()
    with _stage("sampling"):
        sampled = sample_local_hypotheses(matches, cfg.sampling)
    hyps = sampled.homographies
    diag["hypotheses"] = len(hyps)
    diag["sampling_shortfall"] = sampled.shortfall
    diag["timings"]["sampling"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    with _stage("initial_patches"):
        ork = ORKConfig.for_hypothesis_count(len(hyps), cfg.ork_h)
        initial = initial_patches(matches, hyps, ork, cfg.cluster)
    diag["initial_patches"] = initial.n_patches
    diag["timings"]["initial_patches"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    with _stage("refinement"):
        graph = delaunay_triangulate(matches)
        threshold = cfg.cut_threshold or default_cut_threshold(graph)
        cut = cut_mesh_by_distance(graph, initial, threshold, cfg.min_patch_points)
    diag["cut_threshold"] = threshold
    diag["refined_patches"] = cut.n_patches
    diag["timings"]["refinement"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    with _stage("plane_models"):
        motion = estimate_global_motion(cut, matches, intrinsics)
        if motion is None:
            diag["warnings"].append(
                "no patch decomposition available; falling back to per-patch "
                "candidate selection"
            )
        patches = build_patches(cut, matches, intrinsics, motion)
        normals, neighbors = local_normals(
            matches, cut, cfg.local_patch, intrinsics, motion
        )
    diag["valid_patches"] = sum(p.valid for p in patches)
    diag["unreliable_normals"] = sum(n is None for n in normals)
    diag["timings"]["plane_models"] = time.perf_counter() - t0

    final = cut
    if cfg.mrf_enabled and diag["valid_patches"] > 0:
        t0 = time.perf_counter()
        with _stage("mrf"):
            weights = cfg.weights
            if weights.lambda3 > 0 and any(c.color_mean is None for c in matches):
                weights = EnergyWeights(weights.lambda1, weights.lambda2, 0.0)
                diag["warnings"].append(
                    "matches carry no color means; texture weight disabled"
                )
            problem = build_mrf(
                matches, cut, graph, normals, neighbors, patches,
                weights, cfg.texture, cfg.contrast_sensitive,
            )
            report = trws_solve(problem, cfg.solver_max_iters, cfg.solver_tol)
        diag["mrf_nodes"] = problem.n_nodes
        diag["mrf_edges"] = len(problem.edges)
        diag["mrf_labels"] = problem.n_labels
        diag["energy_initial"] = total_energy(problem, problem.initial_labels)
        diag["energy_final"] = report.energy
        diag["lower_bounds"] = [float(b) for b in report.bounds]
        diag["solver_iterations"] = report.iterations
        diag["solver_converged"] = report.converged

        labels = np.full(len(matches), OUTLIER, dtype=int)
        patch_ids = problem.label_patch_ids[report.labeling]
        labels[problem.node_positions] = patch_ids
        labels = drop_small_patches(labels, cfg.min_patch_points)
        final = PatchLabeling(ids=cut.ids, labels=labels)
        diag["timings"]["mrf"] = time.perf_counter() - t0
    elif cfg.mrf_enabled:
        diag["warnings"].append("no valid patches; MRF stage skipped")

    diag["final_patches"] = final.n_patches
    gt = [c.gt_plane for c in matches]
    report_out = None
    if all(g is not None for g in gt):
        report_out = evaluate(final, np.array(gt, dtype=int))
    return PipelineResult(
        labeling=final,
        report=report_out,
        diagnostics=diag,
        stages={"initial": initial, "refined": cut, "final": final},
    )
