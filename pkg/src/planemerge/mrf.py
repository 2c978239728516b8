"""Labeling problem over the match graph: unary and pairwise energies.

Nodes are non-outlier matches, labels are the refined planar patches.  A
node's unary cost combines the refit residual of its local patch under the
candidate patch homography with the misalignment of its local normal
against the candidate patch normal.  Edge costs charge label disagreement
(Potts), modulated by neighbor normal and texture dissimilarity.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import LabelOutOfRange, MissingTexture, NoValidPatches
from .geometry import OUTLIER, Correspondence, transfer_residuals_xy
from .multistructure import PatchLabeling, match_arrays
from .refinement import MatchGraph, PlanarPatch

# Unary value for normals that could not be computed: equal to the
# orthogonal-normal cost, attracting no label over another.
NEUTRAL_NORMAL_ENERGY = 1.0

_SIGMA_FLOOR = 1e-6


@dataclass(frozen=True)
class EnergyWeights:
    """Pairwise term weights: Potts, mutual-normal, texture."""

    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0 or self.lambda3 < 0:
            raise ValueError("pairwise weights must be nonnegative")


@dataclass(frozen=True)
class TextureConfig:
    """Window side of the color-mean patch (means arrive precomputed)."""

    window: int = 5

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("window must be odd and >= 1")


@dataclass
class MRFProblem:
    """Sparse pairwise labeling problem with dense per-edge tables."""

    node_ids: np.ndarray  # correspondence ids entering the MRF
    node_positions: np.ndarray  # positions into the originating match list
    unary: np.ndarray  # (N, L)
    edges: np.ndarray  # (E, 2) node indices, first < second
    pairwise: np.ndarray  # (E, L, L)
    initial_labels: np.ndarray  # (N,)
    label_patch_ids: np.ndarray  # label index -> patch id of the labeling
    isolated: np.ndarray  # node indices with no incident edge

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def n_labels(self) -> int:
        return self.unary.shape[1]


def normal_dissimilarity(n_a: Optional[np.ndarray], n_b: Optional[np.ndarray]) -> float:
    """(1 - cos angle)^2 between two unit normals; neutral 1.0 when missing."""
    if n_a is None or n_b is None:
        return NEUTRAL_NORMAL_ENERGY
    denom = np.linalg.norm(n_a) * np.linalg.norm(n_b)
    if denom == 0:
        return NEUTRAL_NORMAL_ENERGY
    c = float(np.dot(n_a, n_b) / denom)
    return (1.0 - c) ** 2


def unary_residual(
    position: int,
    patch: PlanarPatch,
    matches: Sequence[Correspondence],
    neighbors: Sequence[np.ndarray],
    sigma_r: float = 1.0,
) -> float:
    """Summed transfer residual of the match's local patch under a patch
    homography, divided by the global residual scale."""
    pos = neighbors[position]
    if len(pos) == 0 or patch.homography is None:
        return 0.0
    xy1, xy2 = match_arrays(matches)
    r = transfer_residuals_xy(patch.homography.m, xy1[pos], xy2[pos])
    return float(r.sum()) / sigma_r


def unary_normal(
    position: int,
    patch: PlanarPatch,
    normals: Sequence[Optional[np.ndarray]],
) -> float:
    """Misalignment of the match's local normal with a patch normal, in [0, 4]."""
    n_l = patch.normal if patch.valid else None
    return normal_dissimilarity(normals[position], n_l)


def _texture_term(
    a: Correspondence, b: Correspondence, lambda3: float
) -> float:
    if lambda3 == 0:
        return 0.0
    if a.color_mean is None or b.color_mean is None:
        raise MissingTexture(
            "texture weight is positive but matches carry no color means"
        )
    return float(np.linalg.norm(a.color_mean - b.color_mean))


def pairwise_energy(
    matches: Sequence[Correspondence],
    p: int,
    q: int,
    labels: tuple[int, int],
    normals: Sequence[Optional[np.ndarray]],
    weights: EnergyWeights,
    texture_cfg: Optional[TextureConfig] = None,
    contrast_sensitive: bool = False,
) -> float:
    """Edge cost for a label pair.

    Zero when the labels agree.  On disagreement the Potts weight is paid,
    plus the normal and texture terms.  With contrast_sensitive the latter
    two enter as exp(-dissimilarity), making cuts across dissimilar
    neighbors cheaper; otherwise dissimilarity is charged directly.
    """
    l_p, l_q = labels
    if l_p == l_q:
        return 0.0
    nd = normal_dissimilarity(normals[p], normals[q])
    td = _texture_term(matches[p], matches[q], weights.lambda3)
    if contrast_sensitive:
        return (
            weights.lambda1
            + weights.lambda2 * float(np.exp(-nd))
            + weights.lambda3 * float(np.exp(-td))
        )
    return weights.lambda1 + weights.lambda2 * nd + weights.lambda3 * td


def residual_scale(
    matches: Sequence[Correspondence],
    labeling: PatchLabeling,
    patches: Sequence[PlanarPatch],
    neighbors: Sequence[np.ndarray],
) -> float:
    """Robust scale of own-label local-patch residuals, used to make the
    residual unary dimensionless.

    The scale is the typical local-patch size times the robust (MAD-based)
    per-point own-label residual.  Taking the per-point median first keeps
    a minority of badly modeled patches (blends across a plane fold) from
    inflating the scale and flattening every unary.
    """
    xy1, xy2 = match_arrays(matches)
    per_point: list[np.ndarray] = []
    sizes: list[int] = []
    for i, lab in enumerate(labeling.labels):
        if lab == OUTLIER or not patches[lab].valid:
            continue
        pos = neighbors[i]
        if len(pos) == 0:
            continue
        per_point.append(
            transfer_residuals_xy(patches[lab].homography.m, xy1[pos], xy2[pos])
        )
        sizes.append(len(pos))
    if not per_point:
        return 1.0
    point_scale = 1.4826 * float(np.median(np.concatenate(per_point)))
    return max(float(np.median(sizes)) * point_scale, _SIGMA_FLOOR)


def build_mrf(
    matches: Sequence[Correspondence],
    refined: PatchLabeling,
    graph: MatchGraph,
    normals: Sequence[Optional[np.ndarray]],
    neighbors: Sequence[np.ndarray],
    patches: Sequence[PlanarPatch],
    weights: Optional[EnergyWeights] = None,
    texture_cfg: Optional[TextureConfig] = None,
    contrast_sensitive: bool = True,
) -> MRFProblem:
    """Assemble the labeling problem from the refined patches.

    Nodes are all non-outlier matches (including those whose patch has no
    valid plane model); labels are the valid patches.  Every node starts at
    its own patch's label, or at its unary argmin when that patch is
    invalid.

    Raises NoValidPatches when no patch has a plane model.
    """
    weights = weights or EnergyWeights()
    valid = [p for p in patches if p.valid]
    if not valid:
        raise NoValidPatches("no valid patches to label against")
    label_patch_ids = np.array([p.id for p in valid], dtype=int)
    label_of_patch = {p.id: li for li, p in enumerate(valid)}

    node_positions = np.flatnonzero(refined.labels != OUTLIER)
    node_index = {int(p): i for i, p in enumerate(node_positions)}
    n, big_l = len(node_positions), len(valid)

    xy1, xy2 = match_arrays(matches)
    # Residual unaries: per-label residuals of every match, summed over
    # each node's local patch, normalized by the robust own-label scale.
    per_label = np.stack(
        [transfer_residuals_xy(p.homography.m, xy1, xy2) for p in valid]
    )
    sigma_r = residual_scale(matches, refined, patches, neighbors)
    unary = np.zeros((n, big_l))
    for i, pos in enumerate(node_positions):
        neigh = neighbors[pos]
        for li, p in enumerate(valid):
            resid = per_label[li, neigh].sum() / sigma_r if len(neigh) else 0.0
            unary[i, li] = resid + unary_normal(pos, p, normals)

    has_texture = weights.lambda3 > 0
    edge_rows = []
    tables = []
    eye_off = 1.0 - np.eye(big_l)
    for (a, b) in graph.edges:
        if int(a) not in node_index or int(b) not in node_index:
            continue
        ia, ib = node_index[int(a)], node_index[int(b)]
        nd = normal_dissimilarity(normals[int(a)], normals[int(b)])
        td = _texture_term(matches[int(a)], matches[int(b)], weights.lambda3)
        if contrast_sensitive:
            cost = (
                weights.lambda1
                + weights.lambda2 * np.exp(-nd)
                + (weights.lambda3 * np.exp(-td) if has_texture else 0.0)
            )
        else:
            cost = weights.lambda1 + weights.lambda2 * nd + weights.lambda3 * td
        edge_rows.append((min(ia, ib), max(ia, ib)))
        tables.append(cost * eye_off)

    edges = (
        np.array(edge_rows, dtype=int) if edge_rows else np.empty((0, 2), dtype=int)
    )
    pairwise = (
        np.stack(tables) if tables else np.empty((0, big_l, big_l))
    )

    initial = np.empty(n, dtype=int)
    for i, pos in enumerate(node_positions):
        lab = int(refined.labels[pos])
        if lab in label_of_patch:
            initial[i] = label_of_patch[lab]
        else:
            initial[i] = int(np.argmin(unary[i]))

    touched = np.zeros(n, dtype=bool)
    if len(edges):
        touched[edges.ravel()] = True
    return MRFProblem(
        node_ids=refined.ids[node_positions],
        node_positions=node_positions,
        unary=unary,
        edges=edges,
        pairwise=pairwise,
        initial_labels=initial,
        label_patch_ids=label_patch_ids,
        isolated=np.flatnonzero(~touched),
    )


def total_energy(problem: MRFProblem, labeling: np.ndarray) -> float:
    """Sum of unary costs plus each edge's pairwise cost, counted once."""
    labeling = np.asarray(labeling, dtype=int)
    if len(labeling) != problem.n_nodes:
        raise LabelOutOfRange("labeling does not cover all nodes")
    if (labeling < 0).any() or (labeling >= problem.n_labels).any():
        raise LabelOutOfRange("label index outside the label set")
    e = float(problem.unary[np.arange(problem.n_nodes), labeling].sum())
    if len(problem.edges):
        lu = labeling[problem.edges[:, 0]]
        lv = labeling[problem.edges[:, 1]]
        e += float(problem.pairwise[np.arange(len(problem.edges)), lu, lv].sum())
    return e
