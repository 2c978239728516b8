"""Grouping matches into initial planar patches from hypothesis residues.

The main route sorts every match's hypothesis residuals, compares matches
with the ordered residual kernel (a Mercer kernel built from prefix
intersections of the sorted hypothesis lists), and clusters in the kernel
embedding.  Preference-set clustering (J-Linkage), refit-distance merging
(Fouhey) and residue-threshold merging are provided as baselines and
diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg
from scipy.cluster.vq import kmeans2

from .errors import EmbeddingFailed
from .geometry import (
    OUTLIER,
    Correspondence,
    Homography,
    estimate_homography_xy,
    transfer_residuals_xy,
)

_MAD_TO_SIGMA = 1.4826


def match_arrays(matches: Sequence[Correspondence]) -> tuple[np.ndarray, np.ndarray]:
    xy1 = np.array([c.x for c in matches], dtype=float)
    xy2 = np.array([c.x_prime for c in matches], dtype=float)
    return xy1, xy2


def residual_matrix(
    matches: Sequence[Correspondence], hypotheses: Sequence[Homography]
) -> np.ndarray:
    """(n, M) one-way transfer residuals of every match under every hypothesis."""
    xy1, xy2 = match_arrays(matches)
    out = np.empty((len(matches), len(hypotheses)))
    for j, h in enumerate(hypotheses):
        out[:, j] = transfer_residuals_xy(h.m, xy1, xy2)
    return out


def robust_epsilon(best_residuals: np.ndarray, floor: float = 1.0) -> float:
    """3x the MAD-based noise scale of per-match best residuals, floored.

    The floor keeps noiseless data (median residual ~ 0) from classifying
    everything as outlier.
    """
    scale = _MAD_TO_SIGMA * float(np.median(best_residuals))
    return max(3.0 * scale, floor)


# ---------------------------------------------------------------------------
# Ordered residues and the ordered residual kernel


@dataclass(frozen=True)
class OrderedResidues:
    """Per-match hypothesis indices sorted by ascending residual."""

    order: np.ndarray  # (n, M) int, row = permutation of hypothesis indices
    sorted_values: np.ndarray  # (n, M) residuals, nondecreasing along rows

    @property
    def n_hypotheses(self) -> int:
        return self.order.shape[1]


def ordered_residues(
    matches: Sequence[Correspondence], hypotheses: Sequence[Homography]
) -> OrderedResidues:
    """Sort hypotheses by residual per match; ties keep ascending index."""
    if len(hypotheses) < 1:
        raise ValueError("need at least one hypothesis")
    res = residual_matrix(matches, hypotheses)
    order = np.argsort(res, axis=1, kind="stable")
    return OrderedResidues(order=order, sorted_values=np.take_along_axis(res, order, axis=1))


@dataclass(frozen=True)
class ORKConfig:
    """Step size and weights of the ordered residual kernel.

    alpha_t = t * h are the prefix cut points; z must be positive and
    nonincreasing (that is what makes the weighted prefix-intersection sum
    a Mercer kernel).  Hypothesis lists whose length h does not divide are
    padded with virtual never-preferred hypotheses.
    """

    h: int
    z: np.ndarray
    big_z: float
    alpha: np.ndarray
    m_padded: int

    @classmethod
    def for_hypothesis_count(
        cls, m: int, h: Optional[int] = None, z: Optional[np.ndarray] = None
    ) -> "ORKConfig":
        if h is None:
            h = max(1, m // 20)
        if h < 1:
            raise ValueError("step size h must be >= 1")
        m_padded = ((m + h - 1) // h) * h
        steps = m_padded // h
        if z is None:
            z = 1.0 / np.arange(1, steps + 1)
        z = np.asarray(z, dtype=float)
        if len(z) != steps:
            raise ValueError(f"need {steps} weights for M={m}, h={h}")
        if (z <= 0).any():
            raise ValueError("weights must be positive")
        if (np.diff(z) > 0).any():
            raise ValueError("weights must be nonincreasing")
        alpha = h * np.arange(1, steps + 1)
        return cls(h=h, z=z, big_z=float(z.sum()), alpha=alpha, m_padded=m_padded)


def _pad_row(row: np.ndarray, m_padded: int) -> np.ndarray:
    m = len(row)
    if m == m_padded:
        return np.asarray(row)
    return np.concatenate([row, np.arange(m, m_padded)])


def doik(a: np.ndarray, b: np.ndarray, t: int, cfg: ORKConfig) -> float:
    """Difference-of-intersection step t between two ordered hypothesis rows.

    Counts how many hypotheses the length-alpha_t prefixes newly share
    compared to the previous cut point, scaled by 1/h.
    """
    if not 1 <= t <= len(cfg.alpha):
        raise ValueError(f"t must be in [1, {len(cfg.alpha)}]")
    a = _pad_row(np.asarray(a), cfg.m_padded)
    b = _pad_row(np.asarray(b), cfg.m_padded)
    hi = cfg.alpha[t - 1]
    lo = hi - cfg.h
    i_hi = len(set(a[:hi].tolist()) & set(b[:hi].tolist()))
    i_lo = len(set(a[:lo].tolist()) & set(b[:lo].tolist()))
    return (i_hi - i_lo) / cfg.h


def ork_kernel(a: np.ndarray, b: np.ndarray, cfg: ORKConfig) -> float:
    """Weighted sum of DOIK steps, normalized so self-similarity is 1."""
    steps = np.array([doik(a, b, t, cfg) for t in range(1, len(cfg.alpha) + 1)])
    return float((cfg.z * steps).sum() / cfg.big_z)


def kernel_from_orders(order: np.ndarray, cfg: ORKConfig) -> np.ndarray:
    """ORK Gram matrix of all row pairs, canonicalized.

    Uses the telescoped form sum_t w_t B_t B_t^T with B_t the prefix
    indicator matrices and w_t the Abel-summed weights, which keeps the
    result positive semidefinite by construction.  The matrix is
    symmetrized and diagonal-normalized so k(a, a) is exactly 1.
    """
    n, m = order.shape
    if m != cfg.m_padded:
        order = np.column_stack(
            [order, np.tile(np.arange(m, cfg.m_padded), (n, 1))]
        )
    ranks = np.empty_like(order)
    np.put_along_axis(
        ranks, order, np.tile(np.arange(cfg.m_padded), (n, 1)), axis=1
    )
    abel = cfg.z.copy()
    abel[:-1] -= cfg.z[1:]
    k = np.zeros((n, n))
    for t, a_t in enumerate(cfg.alpha):
        b = (ranks < a_t).astype(float)
        k += abel[t] * (b @ b.T)
    k /= cfg.big_z * cfg.h
    k = 0.5 * (k + k.T)
    d = np.sqrt(np.diag(k))
    k /= np.outer(d, d)
    np.fill_diagonal(k, 1.0)
    return k


def kernel_matrix(
    matches: Sequence[Correspondence],
    hypotheses: Sequence[Homography],
    cfg: Optional[ORKConfig] = None,
) -> np.ndarray:
    if len(matches) < 2:
        raise ValueError("kernel matrix needs at least 2 matches")
    if cfg is None:
        cfg = ORKConfig.for_hypothesis_count(len(hypotheses))
    return kernel_from_orders(ordered_residues(matches, hypotheses).order, cfg)


# ---------------------------------------------------------------------------
# Labelings


@dataclass
class PatchLabeling:
    """Patch id per correspondence (OUTLIER = -1), ids compacted to 0..n-1."""

    ids: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=int)
        self.labels = _compact_labels(np.asarray(self.labels, dtype=int))
        if len(self.ids) != len(self.labels):
            raise ValueError("ids and labels must align")

    @property
    def n_patches(self) -> int:
        return int(self.labels.max()) + 1 if (self.labels >= 0).any() else 0

    def members(self, label: int) -> np.ndarray:
        """Positions (indices into ids) carrying the given label."""
        return np.flatnonzero(self.labels == label)

    def label_of(self, match_id: int) -> int:
        pos = np.flatnonzero(self.ids == match_id)
        if len(pos) == 0:
            raise KeyError(match_id)
        return int(self.labels[pos[0]])


def _compact_labels(labels: np.ndarray) -> np.ndarray:
    """Relabel to contiguous 0..n-1 in order of first appearance."""
    out = np.full(len(labels), OUTLIER, dtype=int)
    mapping: dict[int, int] = {}
    for i, lab in enumerate(labels):
        if lab == OUTLIER:
            continue
        if lab not in mapping:
            mapping[int(lab)] = len(mapping)
        out[i] = mapping[int(lab)]
    return out


def drop_small_patches(labels: np.ndarray, min_size: int) -> np.ndarray:
    """Send patches with fewer than min_size members to OUTLIER."""
    labels = labels.copy()
    for lab in np.unique(labels[labels >= 0]):
        if (labels == lab).sum() < min_size:
            labels[labels == lab] = OUTLIER
    return labels


# ---------------------------------------------------------------------------
# Kernel PCA + spectral clustering


@dataclass(frozen=True)
class ClusterConfig:
    """Settings of the initial patch detection.

    epsilon_outlier defaults to the robust residual scale; min_support
    additionally requires a match to fit several hypotheses within that
    threshold (a gross outlier fits essentially only hypotheses it was
    itself sampled into).  similarity_knn sets the local scale of the
    spectral similarity (distance to that neighbor).
    """

    max_planes: int = 12
    min_cluster_size: int = 10
    epsilon_outlier: Optional[float] = None  # auto (robust scale) when None
    epsilon_floor: float = 1.0
    min_support: Optional[int] = None  # auto: max(3, hypotheses / 100)
    similarity_knn: int = 20
    seed: int = 0


def _kpca_embed(kernel: np.ndarray, dims: int) -> np.ndarray:
    n = len(kernel)
    centering = np.eye(n) - np.full((n, n), 1.0 / n)
    kc = centering @ kernel @ centering
    kc = 0.5 * (kc + kc.T)
    try:
        evals, evecs = scipy.linalg.eigh(kc)
    except scipy.linalg.LinAlgError as e:  # pragma: no cover - rare
        raise EmbeddingFailed(str(e)) from e
    idx = np.argsort(evals)[::-1][:dims]
    lam = np.clip(evals[idx], 0.0, None)
    return evecs[:, idx] * np.sqrt(lam)


def _spectral_cluster(
    points: np.ndarray, max_k: int, seed: int, similarity_knn: int = 20
) -> np.ndarray:
    """Eigengap-selected normalized spectral clustering of embedded points.

    Uses a locally-scaled Gaussian similarity (bandwidth per point = the
    distance to its similarity_knn-th neighbor), which keeps same-structure
    points strongly connected regardless of cluster density."""
    n = len(points)
    if n == 1:
        return np.zeros(1, dtype=int)
    d2 = ((points[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
    d = np.sqrt(d2)
    kk = min(similarity_knn, n - 1)
    scale = np.maximum(np.sort(d, axis=1)[:, kk], 1e-12)
    w = np.exp(-d2 / (scale[:, None] * scale[None, :]))
    np.fill_diagonal(w, 0.0)
    deg = w.sum(axis=1)
    deg[deg <= 0] = 1.0
    dinv = 1.0 / np.sqrt(deg)
    lap = np.eye(n) - dinv[:, None] * w * dinv[None, :]
    lap = 0.5 * (lap + lap.T)
    try:
        evals, evecs = scipy.linalg.eigh(lap)
    except scipy.linalg.LinAlgError as e:  # pragma: no cover - rare
        raise EmbeddingFailed(str(e)) from e
    limit = min(max_k, n - 1)
    gaps = np.diff(evals[: limit + 1])
    k = int(np.argmax(gaps)) + 1
    if k == 1:
        return np.zeros(n, dtype=int)
    u = evecs[:, :k]
    norms = np.linalg.norm(u, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    u = u / norms
    _, labels = kmeans2(u, k, minit="++", seed=seed)
    return labels.astype(int)


def initial_patches(
    matches: Sequence[Correspondence],
    hypotheses: Sequence[Homography],
    cfg: Optional[ORKConfig] = None,
    cluster_cfg: Optional[ClusterConfig] = None,
) -> PatchLabeling:
    """Detect initial planar patches by ORK embedding + spectral clustering.

    Matches whose best hypothesis residual exceeds the outlier threshold
    are excluded up front and labeled OUTLIER, as are clusters smaller than
    cluster_cfg.min_cluster_size.  Over-segmentation relative to the true
    plane count is expected and resolved downstream.
    """
    ccfg = cluster_cfg or ClusterConfig()
    ids = np.array([c.id for c in matches], dtype=int)
    res = residual_matrix(matches, hypotheses)
    best = res.min(axis=1)
    eps = ccfg.epsilon_outlier
    if eps is None:
        eps = robust_epsilon(best, ccfg.epsilon_floor)
    min_support = ccfg.min_support
    if min_support is None:
        min_support = max(3, len(hypotheses) // 100)
    support = (res <= eps).sum(axis=1)
    inlier = (best <= eps) & (support >= min_support)
    labels = np.full(len(matches), OUTLIER, dtype=int)
    if inlier.sum() >= max(2, ccfg.min_cluster_size):
        if cfg is None:
            cfg = ORKConfig.for_hypothesis_count(len(hypotheses))
        order = np.argsort(res[inlier], axis=1, kind="stable")
        kernel = kernel_from_orders(order, cfg)
        emb = _kpca_embed(kernel, min(ccfg.max_planes, inlier.sum() - 1))
        sub = _spectral_cluster(emb, ccfg.max_planes, ccfg.seed, ccfg.similarity_knn)
        labels[inlier] = sub
        labels = drop_small_patches(labels, ccfg.min_cluster_size)
    return PatchLabeling(ids=ids, labels=labels)


# ---------------------------------------------------------------------------
# J-Linkage baseline


@dataclass(frozen=True)
class PreferenceSet:
    """Per-match hypothesis membership within a residual threshold."""

    member: np.ndarray  # (n, M) bool
    epsilon: float

    @classmethod
    def from_matches(cls, matches, hypotheses, epsilon: float) -> "PreferenceSet":
        res = residual_matrix(matches, hypotheses)
        return cls(member=res <= epsilon, epsilon=float(epsilon))


def jaccard_distance(x: set, y: set) -> float:
    """Set dissimilarity (|union| - |intersection|) / |union|; 1 when both empty."""
    union = len(x | y)
    if union == 0:
        return 1.0
    return (union - len(x & y)) / union


def _popcount(v: int) -> int:
    return v.bit_count()


def jlinkage_cluster(
    matches: Sequence[Correspondence],
    hypotheses: Sequence[Homography],
    epsilon: Optional[float] = None,
    min_cluster_size: int = 10,
) -> PatchLabeling:
    """Agglomerate matches by minimum Jaccard distance of preference sets.

    Cluster preference sets are the intersection of member sets; merging
    stops when every remaining pair is fully disjoint (distance 1).
    Clusters below min_cluster_size end up OUTLIER.
    """
    if len(hypotheses) < 1:
        raise ValueError("need at least one hypothesis")
    ids = np.array([c.id for c in matches], dtype=int)
    res = residual_matrix(matches, hypotheses)
    if epsilon is None:
        epsilon = robust_epsilon(res.min(axis=1))
    member = res <= epsilon

    n = len(matches)
    prefs: list[int] = []
    for i in range(n):
        bits = 0
        for j in np.flatnonzero(member[i]):
            bits |= 1 << int(j)
        prefs.append(bits)
    clusters: list[list[int]] = [[i] for i in range(n)]
    active = list(range(n))

    def dist(a: int, b: int) -> float:
        union = _popcount(prefs[a] | prefs[b])
        if union == 0:
            return 1.0
        return (union - _popcount(prefs[a] & prefs[b])) / union

    dmat = np.ones((n, n))
    for ii, a in enumerate(active):
        for b in active[ii + 1 :]:
            dmat[a, b] = dist(a, b)

    while len(active) > 1:
        sub = dmat[np.ix_(active, active)]
        flat = int(np.argmin(np.triu(sub, 1) + np.tril(np.ones_like(sub))))
        i_loc, j_loc = divmod(flat, len(active))
        if sub[i_loc, j_loc] >= 1.0:
            break
        a, b = active[i_loc], active[j_loc]
        clusters[a] = clusters[a] + clusters[b]
        prefs[a] = prefs[a] & prefs[b]
        active.remove(b)
        for c in active:
            if c == a:
                continue
            lo, hi = (c, a) if c < a else (a, c)
            dmat[lo, hi] = dist(a, c)

    labels = np.full(n, OUTLIER, dtype=int)
    next_label = 0
    for a in active:
        if len(clusters[a]) >= min_cluster_size:
            labels[clusters[a]] = next_label
            next_label += 1
    return PatchLabeling(ids=ids, labels=labels)


# ---------------------------------------------------------------------------
# Merging baselines and the residue diagnostic


def _fit_and_sum(positions: np.ndarray, xy1: np.ndarray, xy2: np.ndarray):
    h = estimate_homography_xy(xy1[positions], xy2[positions])
    r = transfer_residuals_xy(h.m, xy1[positions], xy2[positions])
    return h, float(r.sum())


def fouhey_distance(
    x: Sequence[int], y: Sequence[int], matches: Sequence[Correspondence]
) -> float:
    """Mean refit residual over the union of two clusters of match positions."""
    union = sorted(set(int(i) for i in x) | set(int(i) for i in y))
    xy1, xy2 = match_arrays(matches)
    pos = np.array(union, dtype=int)
    h = estimate_homography_xy(xy1[pos], xy2[pos])
    return float(transfer_residuals_xy(h.m, xy1[pos], xy2[pos]).mean())


def residue_merge_baseline(
    patches: PatchLabeling,
    matches: Sequence[Correspondence],
    threshold: float,
) -> PatchLabeling:
    """Greedy best-first merging while the refit residual sum stays under
    the threshold.

    Every round refits a homography on each candidate pair's union and
    merges the pair with the smallest summed residual, mirroring the
    residue-only merging scheme this package's pipeline replaces.
    """
    xy1, xy2 = match_arrays(matches)
    groups: dict[int, np.ndarray] = {
        int(lab): patches.members(int(lab))
        for lab in range(patches.n_patches)
    }
    while len(groups) > 1:
        best = None
        keys = sorted(groups)
        for ii, a in enumerate(keys):
            for b in keys[ii + 1 :]:
                union = np.concatenate([groups[a], groups[b]])
                try:
                    _, s = _fit_and_sum(union, xy1, xy2)
                except Exception:
                    continue
                if best is None or s < best[0]:
                    best = (s, a, b)
        if best is None or best[0] >= threshold:
            break
        _, a, b = best
        groups[a] = np.concatenate([groups[a], groups[b]])
        del groups[b]
    labels = np.full(len(matches), OUTLIER, dtype=int)
    for lab, pos in groups.items():
        labels[pos] = lab
    return PatchLabeling(ids=patches.ids, labels=labels)


@dataclass(frozen=True)
class ResidueTable:
    """Cross-application residual table with per-column minima marks."""

    table: np.ndarray  # (k, k): row homography applied to column patch
    first_min: np.ndarray  # (k,) row index of each column's smallest entry
    second_min: np.ndarray  # (k,) row index of each column's second smallest


def second_min_residue_table(
    patches: PatchLabeling, matches: Sequence[Correspondence]
) -> ResidueTable:
    """Mean residual of every patch homography applied to every patch.

    The per-column second minimum is the quantity that drives residue-based
    merging; when it falls outside the column's own plane the merge would
    be wrong.
    """
    k = patches.n_patches
    if k < 2:
        raise ValueError("residue table needs at least 2 patches")
    xy1, xy2 = match_arrays(matches)
    homs = []
    groups = []
    for lab in range(k):
        pos = patches.members(lab)
        homs.append(estimate_homography_xy(xy1[pos], xy2[pos]))
        groups.append(pos)
    table = np.empty((k, k))
    for i, h in enumerate(homs):
        for j, pos in enumerate(groups):
            table[i, j] = float(
                transfer_residuals_xy(h.m, xy1[pos], xy2[pos]).mean()
            )
    order = np.argsort(table, axis=0, kind="stable")
    return ResidueTable(
        table=table, first_min=order[0].copy(), second_min=order[1].copy()
    )
