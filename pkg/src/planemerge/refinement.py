"""Spatial refinement of detected patches and per-match local normals.

A patch that spans two scene planes usually contains matches that are far
apart in the image, so cutting long Delaunay edges splits it into
spatially coherent sub-patches.  Each surviving patch gets a fitted
homography and a decomposed plane normal; each match additionally gets a
local normal from a homography fit to its nearest same-patch neighbors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.sparse
import scipy.sparse.csgraph
from scipy.spatial import Delaunay, QhullError, cKDTree

from .errors import (
    DecompositionFailed,
    DegenerateConfiguration,
    PureRotation,
    TooFewPoints,
)
from .geometry import (
    OUTLIER,
    Correspondence,
    Homography,
    Intrinsics,
    PlaneDecomposition,
    compose_homography,
    decompose_homography,
    estimate_homography_xy,
    fit_plane_given_motion,
    refine_motion,
    rotation_angle,
    transfer_residuals_xy,
)
from .multistructure import PatchLabeling, match_arrays

MIN_PATCH_POINTS = 10  # planes formed by fewer points are discarded


@dataclass(frozen=True)
class MatchGraph:
    """Undirected Delaunay graph over image-1 coordinates.

    Edges index into the match list; lengths are image-1 pixel distances.
    """

    ids: np.ndarray
    edges: np.ndarray  # (E, 2) int positions, first < second
    lengths: np.ndarray  # (E,)

    @property
    def n_nodes(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class LocalPatchConfig:
    """Size of the per-match local patch (k nearest same-patch neighbors)."""

    k: int = 10

    def __post_init__(self):
        if self.k < 4:
            raise ValueError("k must be >= 4")


@dataclass
class PlanarPatch:
    """A detected patch with its fitted homography and plane normal."""

    id: int
    member_ids: np.ndarray
    homography: Optional[Homography]
    normal: Optional[np.ndarray]  # unit 3-vector, camera-1 frame
    valid: bool
    decomposition: Optional[PlaneDecomposition] = None


@dataclass(frozen=True)
class GlobalMotion:
    """Relative camera motion shared by every scene plane."""

    rotation: np.ndarray
    translation: np.ndarray  # unit direction


def _chain_graph(xy: np.ndarray) -> np.ndarray:
    """Nearest-neighbor chain along the principal direction (degenerate
    fallback when triangulation is impossible)."""
    centered = xy - xy.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    t = centered @ vt[0]
    order = np.argsort(t, kind="stable")
    return np.sort(np.column_stack([order[:-1], order[1:]]), axis=1)


def delaunay_triangulate(matches: Sequence[Correspondence]) -> MatchGraph:
    """Delaunay edges of the image-1 coordinates.

    Collinear or otherwise degenerate inputs fall back to a chain graph.
    Raises TooFewPoints below 3 matches.
    """
    if len(matches) < 3:
        raise TooFewPoints(f"triangulation needs >= 3 matches, got {len(matches)}")
    xy1, _ = match_arrays(matches)
    try:
        tri = Delaunay(xy1)
        pairs = set()
        for simplex in tri.simplices:
            for a in range(3):
                i, j = int(simplex[a]), int(simplex[(a + 1) % 3])
                pairs.add((min(i, j), max(i, j)))
        edges = np.array(sorted(pairs), dtype=int)
    except QhullError:
        edges = _chain_graph(xy1)
    lengths = np.linalg.norm(xy1[edges[:, 0]] - xy1[edges[:, 1]], axis=1)
    ids = np.array([c.id for c in matches], dtype=int)
    return MatchGraph(ids=ids, edges=edges, lengths=lengths)


def default_cut_threshold(graph: MatchGraph) -> float:
    """3x the median Delaunay edge length."""
    return 3.0 * float(np.median(graph.lengths))


def cut_mesh_by_distance(
    graph: MatchGraph,
    patches: PatchLabeling,
    threshold: float,
    min_patch_points: int = MIN_PATCH_POINTS,
) -> PatchLabeling:
    """Split patches at Delaunay edges longer than the threshold.

    Edges crossing patch boundaries or touching outliers are dropped as
    well; each connected component of what remains becomes a patch, and
    components below min_patch_points go to OUTLIER.
    """
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    labels = patches.labels
    n = graph.n_nodes
    e = graph.edges
    keep = (
        (graph.lengths <= threshold)
        & (labels[e[:, 0]] == labels[e[:, 1]])
        & (labels[e[:, 0]] != OUTLIER)
    )
    kept = e[keep]
    adj = scipy.sparse.coo_matrix(
        (np.ones(len(kept)), (kept[:, 0], kept[:, 1])), shape=(n, n)
    )
    _, comp = scipy.sparse.csgraph.connected_components(adj, directed=False)
    new_labels = np.full(n, OUTLIER, dtype=int)
    inlier = labels != OUTLIER
    comp_ids, counts = np.unique(comp[inlier], return_counts=True)
    next_label = 0
    for cid, cnt in zip(comp_ids, counts):
        if cnt < min_patch_points:
            continue
        new_labels[(comp == cid) & inlier] = next_label
        next_label += 1
    return PatchLabeling(ids=patches.ids, labels=new_labels)


def _robust_subset(pos: np.ndarray, xy1, xy2, floor: float = 0.25) -> np.ndarray:
    """Inlier positions after one robust trim against the patch fit."""
    h = estimate_homography_xy(xy1[pos], xy2[pos])
    r = transfer_residuals_xy(h.m, xy1[pos], xy2[pos])
    cut = max(3.0 * 1.4826 * float(np.median(r)), floor)
    keep = pos[r <= cut]
    if len(keep) >= max(MIN_PATCH_POINTS, int(0.7 * len(pos))):
        return keep
    return pos


def estimate_global_motion(
    labeling: PatchLabeling,
    matches: Sequence[Correspondence],
    intrinsics: Optional[Intrinsics] = None,
) -> Optional[GlobalMotion]:
    """Consensus camera motion from the patch homography decompositions.

    Every patch decomposition carries the true (R, T) in one of its
    candidates; the spurious twin varies with the plane.  The rotation
    minimizing the summed angle to each patch's nearest candidate is
    therefore the shared motion, and it disambiguates the two-fold
    decomposition ambiguity of every individual patch.

    Returns None when no patch yields a decomposition (e.g. pure rotation).
    """
    xy1, xy2 = match_arrays(matches)
    per_patch: list[list[PlaneDecomposition]] = []
    groups: list[tuple[np.ndarray, np.ndarray]] = []
    sizes: list[int] = []
    for lab in range(labeling.n_patches):
        pos = labeling.members(lab)
        if len(pos) < MIN_PATCH_POINTS:
            continue
        pos = _robust_subset(pos, xy1, xy2)
        try:
            h = estimate_homography_xy(xy1[pos], xy2[pos])
            cands = decompose_homography(h, intrinsics, support=xy1[pos])
        except (DegenerateConfiguration, PureRotation, DecompositionFailed):
            continue
        per_patch.append(cands)
        groups.append((xy1[pos], xy2[pos]))
        sizes.append(len(pos))
    if not per_patch:
        return None

    # The true (R, T) appears among every patch's candidates while each
    # spurious twin is plane-specific, so the candidate with the smallest
    # median distance to the per-patch nearest candidates is the shared
    # motion.  R alone cannot separate the branches at small baselines
    # (both twins have nearly the source rotation), hence the joint metric.
    def pair_dist(a: PlaneDecomposition, b: PlaneDecomposition) -> float:
        d_t = np.degrees(
            np.arctan2(np.linalg.norm(np.cross(a.T, b.T)), float(a.T @ b.T))
        )
        return rotation_angle(a.R, b.R) + d_t

    all_cands = [c for cands in per_patch for c in cands]
    best = min(
        all_cands,
        key=lambda cand: float(
            np.median([min(pair_dist(cand, c) for c in cands) for cands in per_patch])
        ),
    )
    picks = [min(cands, key=lambda c: pair_dist(best, c)) for cands in per_patch]
    w = np.array(sizes, dtype=float)
    rs = np.stack([p.R for p in picks])
    ts = np.stack([p.T for p in picks])
    dists = np.array([pair_dist(best, p) for p in picks])
    good = dists <= max(2.0 * float(np.median(dists)), 5.0)
    t = (ts[good] * w[good, None]).sum(axis=0)
    norm = np.linalg.norm(t)
    if norm < 1e-12:
        t, norm = best.T, 1.0
    t = t / norm
    # Chordal mean of the selected rotations, projected back to SO(3).
    m = (rs[good] * w[good, None, None]).sum(axis=0)
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        r = u @ np.diag([1.0, 1.0, -1.0]) @ vt
    refined = refine_motion(r, t, groups, intrinsics)
    if refined is not None:
        r, t = refined
    return GlobalMotion(rotation=r, translation=t)


def patch_plane_model(
    member_positions: np.ndarray,
    matches: Sequence[Correspondence],
    intrinsics: Optional[Intrinsics] = None,
    patch_id: int = 0,
    motion: Optional[GlobalMotion] = None,
) -> PlanarPatch:
    """Fit a homography to a patch and decompose it into a plane normal.

    With a global motion estimate the plane is fit directly under the
    shared (R, T) and the patch homography is recomposed from it, which
    keeps same-plane patches mutually consistent.  Patches with fewer than
    10 members, degenerate fits, or failed decompositions come back with
    valid=False.
    """
    xy1, xy2 = match_arrays(matches)
    ids = np.array([matches[i].id for i in member_positions], dtype=int)
    if len(member_positions) < MIN_PATCH_POINTS:
        return PlanarPatch(patch_id, ids, None, None, valid=False)
    pos = _robust_subset(np.asarray(member_positions, dtype=int), xy1, xy2)
    if motion is not None:
        d = fit_plane_given_motion(
            motion.rotation, motion.translation, xy1[pos], xy2[pos], intrinsics
        )
        if d is None:
            return PlanarPatch(patch_id, ids, None, None, valid=False)
        h = compose_homography(d, intrinsics or Intrinsics.identity())
        return PlanarPatch(patch_id, ids, h, d.N, valid=True, decomposition=d)
    try:
        h = estimate_homography_xy(xy1[pos], xy2[pos])
        cands = decompose_homography(h, intrinsics, support=xy1[pos])
    except (DegenerateConfiguration, PureRotation, DecompositionFailed):
        return PlanarPatch(patch_id, ids, None, None, valid=False)
    best = cands[0]
    return PlanarPatch(patch_id, ids, h, best.N, valid=True, decomposition=best)


def build_patches(
    labeling: PatchLabeling,
    matches: Sequence[Correspondence],
    intrinsics: Optional[Intrinsics] = None,
    motion: Optional[GlobalMotion] = None,
) -> list[PlanarPatch]:
    """Plane model for every patch of a labeling."""
    return [
        patch_plane_model(
            labeling.members(lab), matches, intrinsics, patch_id=lab, motion=motion
        )
        for lab in range(labeling.n_patches)
    ]


def local_patch_neighbors(
    matches: Sequence[Correspondence],
    labeling: PatchLabeling,
    cfg: Optional[LocalPatchConfig] = None,
) -> list[np.ndarray]:
    """Per-match positions of the k nearest same-patch neighbors plus self.

    Outlier matches get an empty array.  Trees are built once per patch.
    """
    cfg = cfg or LocalPatchConfig()
    xy1, _ = match_arrays(matches)
    out: list[np.ndarray] = [np.empty(0, dtype=int)] * len(matches)
    for lab in range(labeling.n_patches):
        pos = labeling.members(lab)
        if len(pos) < 2:
            for p in pos:
                out[p] = np.array([p], dtype=int)
            continue
        tree = cKDTree(xy1[pos])
        k = min(cfg.k + 1, len(pos))
        _, idx = tree.query(xy1[pos], k=k)
        idx = np.atleast_2d(idx)
        for row, p in enumerate(pos):
            neigh = pos[idx[row]]
            neigh = neigh[neigh != p]
            out[p] = np.concatenate([[p], neigh[: cfg.k]])
    return out


def _one_local_normal(
    pos: np.ndarray,
    xy1: np.ndarray,
    xy2: np.ndarray,
    intrinsics: Optional[Intrinsics],
    motion: Optional[GlobalMotion],
) -> Optional[np.ndarray]:
    if len(pos) < 5:
        return None
    if motion is not None:
        d = fit_plane_given_motion(
            motion.rotation, motion.translation, xy1[pos], xy2[pos], intrinsics
        )
        return None if d is None else d.N
    try:
        h = estimate_homography_xy(xy1[pos], xy2[pos])
        cands = decompose_homography(h, intrinsics, support=xy1[pos])
    except (DegenerateConfiguration, PureRotation, DecompositionFailed):
        return None
    return cands[0].N


def local_normal(
    position: int,
    neighbors: list[np.ndarray],
    matches: Sequence[Correspondence],
    intrinsics: Optional[Intrinsics] = None,
    motion: Optional[GlobalMotion] = None,
) -> Optional[np.ndarray]:
    """Normal of the plane fit to a match's local patch ({c} and its k
    nearest same-patch neighbors).

    Returns None (UNRELIABLE) when fewer than 4 neighbors are available or
    the fit cannot be decomposed.  A global motion estimate makes small
    supports far better conditioned (only the plane parameters stay free).
    """
    xy1, xy2 = match_arrays(matches)
    return _one_local_normal(neighbors[position], xy1, xy2, intrinsics, motion)


def local_normals(
    matches: Sequence[Correspondence],
    labeling: PatchLabeling,
    cfg: Optional[LocalPatchConfig] = None,
    intrinsics: Optional[Intrinsics] = None,
    motion: Optional[GlobalMotion] = None,
) -> tuple[list[Optional[np.ndarray]], list[np.ndarray]]:
    """Local normal and neighbor set for every match."""
    neighbors = local_patch_neighbors(matches, labeling, cfg)
    xy1, xy2 = match_arrays(matches)
    normals = [
        _one_local_normal(pos, xy1, xy2, intrinsics, motion) for pos in neighbors
    ]
    return normals, neighbors
