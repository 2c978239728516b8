"""Homography estimation, transfer residuals, and plane decomposition.

A homography relating two views of a scene plane factors as
K (R + T N^t / D) K^-1, where (R, T) is the relative camera motion, N the
unit plane normal in the first camera frame and D the perpendicular
camera-plane distance.  This module estimates homographies from point
correspondences (normalized DLT), measures per-match transfer residuals,
and recovers the (R, T, N, D) factors with the analytic SVD decomposition.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DecompositionFailed,
    DegenerateConfiguration,
    PointAtInfinity,
    PureRotation,
)

# Label value marking a correspondence that belongs to no plane.
OUTLIER = -1

# Rank-deficiency tolerance for the DLT design matrix: the matrix of a
# non-degenerate sample has exactly one near-null direction, so degeneracy
# is judged on the second-smallest singular value.
_DLT_RANK_TOL = 1e-8

_EPS_INFINITY = 1e-12


@dataclass(frozen=True)
class Correspondence:
    """A matched point pair between two images."""

    id: int
    x: np.ndarray  # (2,) pixels, image 1
    x_prime: np.ndarray  # (2,) pixels, image 2
    color_mean: Optional[np.ndarray] = None  # (3,) per-channel mean in [0, 1]
    gt_plane: Optional[int] = None  # ground-truth plane id, OUTLIER for none

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))
        object.__setattr__(self, "x_prime", np.asarray(self.x_prime, dtype=float))
        if not (np.isfinite(self.x).all() and np.isfinite(self.x_prime).all()):
            raise ValueError("correspondence coordinates must be finite")
        if self.color_mean is not None:
            c = np.asarray(self.color_mean, dtype=float)
            if c.shape != (3,) or (c < 0).any() or (c > 1).any():
                raise ValueError("color_mean must be a 3-vector in [0, 1]")
            object.__setattr__(self, "color_mean", c)


def canonicalize(m: np.ndarray) -> np.ndarray:
    """Scale a 3x3 matrix to unit Frobenius norm with a positive leading sign.

    The sign convention makes the entry of largest magnitude positive so that
    equal homographies compare bitwise-equal regardless of the scale they
    were produced at.
    """
    m = np.asarray(m, dtype=float)
    norm = np.linalg.norm(m)
    if norm == 0 or not np.isfinite(norm):
        raise ValueError("cannot canonicalize a zero or non-finite matrix")
    m = m / norm
    flat = np.abs(m).ravel()
    if m.ravel()[int(np.argmax(flat))] < 0:
        m = -m
    return m


@dataclass(frozen=True)
class Homography:
    """A 3x3 projective transform, stored in canonical normalization."""

    m: np.ndarray

    def __post_init__(self):
        m = canonicalize(self.m)
        if abs(np.linalg.det(m)) < 1e-15:
            raise ValueError("homography matrix must be invertible")
        object.__setattr__(self, "m", m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.m))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map (n, 2) pixel points through the homography (dehomogenized)."""
        return apply_homography(self.m, points)


@dataclass(frozen=True)
class Intrinsics:
    """Upper-triangular camera matrix with unit lower-right entry."""

    k: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.k, dtype=float)
        if k.shape != (3, 3):
            raise ValueError("intrinsics must be 3x3")
        if not np.allclose(k, np.triu(k)):
            raise ValueError("intrinsics must be upper-triangular")
        if k[0, 0] <= 0 or k[1, 1] <= 0:
            raise ValueError("focal entries must be positive")
        if k[2, 2] != 1:
            raise ValueError("k[2][2] must be 1")
        object.__setattr__(self, "k", k)

    @classmethod
    def identity(cls) -> "Intrinsics":
        return cls(np.eye(3))

    def inv(self) -> np.ndarray:
        return np.linalg.inv(self.k)


@dataclass(frozen=True)
class PlaneDecomposition:
    """Rotation, translation direction, plane normal, and plane distance.

    T has unit norm, so D is expressed in units of the camera baseline.
    """

    R: np.ndarray
    T: np.ndarray
    N: np.ndarray
    D: float

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float)
        T = np.asarray(self.T, dtype=float)
        N = np.asarray(self.N, dtype=float)
        if np.linalg.norm(R.T @ R - np.eye(3)) > 1e-9:
            raise ValueError("R must be orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("R must be a proper rotation")
        if abs(np.linalg.norm(N) - 1.0) > 1e-9:
            raise ValueError("N must be a unit vector")
        if not self.D > 0:
            raise ValueError("D must be positive")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "N", N)


def apply_homography(m: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Transform (n, 2) points by a 3x3 matrix and dehomogenize.

    Raises PointAtInfinity when any mapped point has a third homogeneous
    coordinate of magnitude below 1e-12.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    ph = np.column_stack([pts, np.ones(len(pts))])
    q = ph @ m.T
    w = q[:, 2]
    if (np.abs(w) < _EPS_INFINITY).any():
        raise PointAtInfinity("mapped point lies at infinity")
    return q[:, :2] / w[:, None]


def _hartley_normalization(pts: np.ndarray) -> np.ndarray:
    """Similarity transform bringing points to zero mean, sqrt(2) RMS radius."""
    centroid = pts.mean(axis=0)
    d = np.sqrt(((pts - centroid) ** 2).sum(axis=1)).mean()
    scale = np.sqrt(2.0) / d if d > 0 else 1.0
    t = np.array(
        [
            [scale, 0.0, -scale * centroid[0]],
            [0.0, scale, -scale * centroid[1]],
            [0.0, 0.0, 1.0],
        ]
    )
    return t


def estimate_homography(matches: Sequence[Correspondence]) -> Homography:
    """Least-squares homography from >= 4 correspondences via normalized DLT.

    Both point sets are Hartley-normalized, the stacked design matrix is
    solved by SVD, and the result is returned in canonical normalization.

    Raises DegenerateConfiguration when the design matrix is rank-deficient
    (collinear or coincident source points).
    """
    if len(matches) < 4:
        raise DegenerateConfiguration(
            f"homography needs at least 4 matches, got {len(matches)}"
        )
    p1 = np.array([c.x for c in matches], dtype=float)
    p2 = np.array([c.x_prime for c in matches], dtype=float)
    return estimate_homography_xy(p1, p2)


def estimate_homography_xy(p1: np.ndarray, p2: np.ndarray) -> Homography:
    """Array-input variant of estimate_homography ((n, 2) -> (n, 2))."""
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    n = len(p1)
    if n < 4 or len(p2) != n:
        raise DegenerateConfiguration("need >= 4 point pairs of equal length")

    t1 = _hartley_normalization(p1)
    t2 = _hartley_normalization(p2)
    q1 = p1 * t1[0, 0] + t1[:2, 2]
    q2 = p2 * t2[0, 0] + t2[:2, 2]

    a = np.zeros((2 * n, 9))
    x, y = q1[:, 0], q1[:, 1]
    u, v = q2[:, 0], q2[:, 1]
    a[0::2, 0] = x
    a[0::2, 1] = y
    a[0::2, 2] = 1.0
    a[0::2, 6] = -u * x
    a[0::2, 7] = -u * y
    a[0::2, 8] = -u
    a[1::2, 3] = x
    a[1::2, 4] = y
    a[1::2, 5] = 1.0
    a[1::2, 6] = -v * x
    a[1::2, 7] = -v * y
    a[1::2, 8] = -v

    _, s, vt = np.linalg.svd(a)
    # One vanishing singular value is the solution direction; a second one
    # signals a degenerate point configuration.
    if s[7] < _DLT_RANK_TOL * s[0]:
        raise DegenerateConfiguration("DLT design matrix is rank-deficient")
    h_norm = vt[-1].reshape(3, 3)
    h = np.linalg.inv(t2) @ h_norm @ t1
    try:
        return Homography(h)
    except ValueError as e:
        raise DegenerateConfiguration(str(e)) from e


def transfer_residual(
    h: Homography, c: Correspondence, symmetric: bool = False
) -> float:
    """One-way transfer error ||x' - dehomog(H x)|| in pixels.

    With symmetric=True the backward error ||x - dehomog(H^-1 x')|| is added.
    """
    fwd = apply_homography(h.m, c.x[None, :])[0]
    r = float(np.linalg.norm(c.x_prime - fwd))
    if symmetric:
        bwd = apply_homography(np.linalg.inv(h.m), c.x_prime[None, :])[0]
        r += float(np.linalg.norm(c.x - bwd))
    return r


def transfer_residuals_xy(m: np.ndarray, p1: np.ndarray, p2: np.ndarray) -> np.ndarray:
    """Vectorized one-way residuals of (n, 2) point pairs under a 3x3 matrix.

    Points mapped to infinity get an infinite residual instead of raising,
    which keeps hypothesis scoring total.
    """
    ph = np.column_stack([p1, np.ones(len(p1))])
    q = ph @ m.T
    w = q[:, 2]
    out = np.full(len(p1), np.inf)
    ok = np.abs(w) >= _EPS_INFINITY
    diff = q[ok, :2] / w[ok, None] - p2[ok]
    out[ok] = np.sqrt((diff**2).sum(axis=1))
    return out


def compose_homography(d: PlaneDecomposition, k: Intrinsics) -> Homography:
    """Build the pixel homography K (R + T N^t / D) K^-1 in canonical form."""
    he = d.R + np.outer(d.T, d.N) / d.D
    return Homography(k.k @ he @ k.inv())


def _euclidean(h: Homography, k: Intrinsics) -> np.ndarray:
    return k.inv() @ h.m @ k.k


def decompose_homography(
    h: Homography,
    k: Optional[Intrinsics] = None,
    support: Optional[np.ndarray] = None,
) -> list[PlaneDecomposition]:
    """Analytic SVD decomposition of a plane-induced homography.

    Recovers the candidate (R, T, N, D) factorizations of the Euclidean
    homography K^-1 H K.  The algebraic eight-fold ambiguity is reduced by
    unit-normal / positive-distance normalization and then by the
    positive-depth (cheirality) requirement N . m > 0 for every supporting
    image-1 ray m.

    Parameters
    ----------
    h : Homography
        Pixel homography.
    k : Intrinsics, optional
        Camera matrix; identity when omitted (coordinates treated as
        already normalized).
    support : ndarray, optional
        (n, 2) image-1 pixel points backing the homography.  When omitted
        the principal ray (0, 0, 1) is used, which only discards candidates
        whose plane faces away from the camera.

    Returns
    -------
    list of PlaneDecomposition
        Cheirality-valid candidates ordered by reprojection consistency.

    Raises
    ------
    PureRotation
        When the Euclidean homography is within 1e-9 of a rotation, making
        N and D unobservable.
    DecompositionFailed
        When no candidate passes the positive-depth check.
    """
    if k is None:
        k = Intrinsics.identity()
    he = _euclidean(h, k)

    # Scale so the middle singular value is 1 (true for R + T N^t / D).
    sv = np.linalg.svd(he, compute_uv=False)
    he = he / sv[1]
    s1, s3 = sv[0] / sv[1], sv[2] / sv[1]
    if max(abs(s1 - 1.0), abs(1.0 - s3)) < 1e-9:
        raise PureRotation("homography is a rotation; plane unobservable")

    if support is not None and len(support):
        rays1 = np.column_stack([support, np.ones(len(support))]) @ k.inv().T
    else:
        rays1 = np.array([[0.0, 0.0, 1.0]])

    # Sign of He so that supporting rays map to positive depth in camera 2.
    signs = np.einsum("ij,ij->i", rays1 @ he.T, rays1)
    if np.sum(signs > 0) < np.sum(signs < 0):
        he = -he

    # Eigen frame of He^t He; middle eigenvalue is 1 after normalization.
    w, v = np.linalg.eigh(he.T @ he)
    order = np.argsort(w)[::-1]
    w = w[order]
    v = v[:, order]
    if np.linalg.det(v) < 0:
        v = -v
    v1, v2, v3 = v[:, 0], v[:, 1], v[:, 2]

    denom = np.sqrt(max(w[0] - w[2], 1e-300))
    c1 = np.sqrt(max(1.0 - w[2], 0.0))
    c3 = np.sqrt(max(w[0] - 1.0, 0.0))
    u1 = (c1 * v1 + c3 * v3) / denom
    u2 = (c1 * v1 - c3 * v3) / denom

    candidates = []
    for u in (u1, u2):
        big_u = np.column_stack([v2, u, np.cross(v2, u)])
        hv2, hu = he @ v2, he @ u
        big_w = np.column_stack([hv2, hu, np.cross(hv2, hu)])
        r = big_w @ big_u.T
        n = np.cross(v2, u)
        t_over_d = (he - r) @ n
        for sign in (1.0, -1.0):
            candidates.append((r, sign * t_over_d, sign * n))

    kept = []
    for r, t_over_d, n in candidates:
        margin = rays1 @ n
        if (margin <= 0).any():
            continue
        norm_t = np.linalg.norm(t_over_d)
        if norm_t < 1e-12:
            continue
        # Re-orthonormalize R against accumulated rounding.
        ur, _, vtr = np.linalg.svd(r)
        r = ur @ vtr
        if np.linalg.det(r) < 0:
            r = ur @ np.diag([1.0, 1.0, -1.0]) @ vtr
        try:
            d = PlaneDecomposition(
                R=r, T=t_over_d / norm_t, N=n / np.linalg.norm(n), D=1.0 / norm_t
            )
        except ValueError:
            continue
        kept.append(d)

    if not kept:
        raise DecompositionFailed("no candidate passes the cheirality check")

    if support is not None and len(support):
        # Order by how well the recomposed homography explains the support
        # in image 1 -> image 2 transfer (candidates tie up to rounding;
        # the cheirality margin breaks remaining ties).
        p2 = apply_homography(h.m, support)

        def score(d: PlaneDecomposition) -> tuple:
            hm = compose_homography(d, k).m
            res = transfer_residuals_xy(hm, support, p2)
            return (float(res.sum()), -float((rays1 @ d.N).min()))

        kept.sort(key=score)
    else:
        kept.sort(key=lambda d: -float(rays1 @ d.N))
    return kept


def rotation_angle(r_a: np.ndarray, r_b: np.ndarray) -> float:
    """Geodesic angle in degrees between two rotation matrices."""
    c = (np.trace(r_a.T @ r_b) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def _rodrigues(d: np.ndarray) -> np.ndarray:
    th = np.linalg.norm(d)
    if th < 1e-300:
        return np.eye(3)
    a = d / th
    k = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + np.sin(th) * k + (1 - np.cos(th)) * (k @ k)


def refine_motion(
    r: np.ndarray,
    t_hat: np.ndarray,
    groups: list[tuple[np.ndarray, np.ndarray]],
    k: Optional[Intrinsics] = None,
    iters: int = 12,
    huber: float = 1.5,
) -> Optional[tuple[np.ndarray, np.ndarray]]:
    """Jointly refine the shared camera motion over several plane groups.

    Gauss-Newton over (rotation, unit translation direction, one plane
    vector per group) on the image-2 reprojection of every group member,
    with Huber weighting against members that do not belong to their
    group's plane.  Groups are (points1, points2) pixel arrays.
    """
    if k is None:
        k = Intrinsics.identity()
    km, kinv = k.k, k.inv()
    rays = [np.column_stack([p1, np.ones(len(p1))]) @ kinv.T for p1, _ in groups]
    p2s = [p2 for _, p2 in groups]
    g_count = len(groups)
    if g_count == 0:
        return None
    t = t_hat / np.linalg.norm(t_hat)

    # Initial plane vectors under the starting motion.
    ns = []
    for (p1, p2) in groups:
        d = fit_plane_given_motion(r, t, p1, p2, k)
        ns.append((d.N / d.D) if d is not None else np.zeros(3))

    n_obs = sum(len(m) for m in rays)
    for _ in range(iters):
        # Tangent basis of the unit translation sphere.
        b = np.linalg.svd(t[None, :])[2][1:].T  # (3, 2), columns orthogonal to t
        kt = km @ t
        n_par = 5 + 3 * g_count
        jac = np.zeros((2 * n_obs, n_par))
        resid = np.zeros(2 * n_obs)
        row = 0
        for gi, (m, p2) in enumerate(zip(rays, p2s)):
            g = m @ (r.T @ km.T) + np.outer(m @ ns[gi], kt)
            gz = g[:, 2]
            bad = np.abs(gz) < 1e-12
            gz = np.where(bad, 1.0, gz)
            uv = g[:, :2] / gz[:, None]
            err = p2 - uv
            w = np.ones(len(m))
            norms = np.linalg.norm(err, axis=1)
            big = norms > huber
            w[big] = np.sqrt(huber / norms[big])
            w[bad] = 0.0

            # d(uv)/dg rows, then chain through each parameter block.
            def duv(dg):
                du = (dg[:, 0] - uv[:, 0] * dg[:, 2]) / gz
                dv = (dg[:, 1] - uv[:, 1] * dg[:, 2]) / gz
                return du, dv

            sl = slice(row, row + 2 * len(m), 2)
            sl2 = slice(row + 1, row + 2 * len(m), 2)
            resid[sl] = w * err[:, 0]
            resid[sl2] = w * err[:, 1]
            # rotation block: dg/d(omega_ax) = K R (e_ax x m)
            for ax in range(3):
                e = np.zeros(3)
                e[ax] = 1.0
                dg = np.cross(np.broadcast_to(e, m.shape), m) @ (r.T @ km.T)
                du, dv = duv(dg)
                jac[sl, ax] = w * du
                jac[sl2, ax] = w * dv
            # translation block: dg/d(beta) = K b_col (n . m)
            nm = m @ ns[gi]
            for bx in range(2):
                dg = np.outer(nm, km @ b[:, bx])
                du, dv = duv(dg)
                jac[sl, 3 + bx] = w * du
                jac[sl2, 3 + bx] = w * dv
            # plane block: dg/dn = K t m^T
            for ax in range(3):
                dg = np.outer(m[:, ax], kt)
                du, dv = duv(dg)
                jac[sl, 5 + 3 * gi + ax] = w * du
                jac[sl2, 5 + 3 * gi + ax] = w * dv
            row += 2 * len(m)

        try:
            step, *_ = np.linalg.lstsq(jac, resid, rcond=None)
        except np.linalg.LinAlgError:
            return None
        if not np.isfinite(step).all():
            return None
        r = r @ _rodrigues(step[:3])
        t = t + b @ step[3:5]
        t = t / np.linalg.norm(t)
        for gi in range(g_count):
            ns[gi] = ns[gi] + step[5 + 3 * gi : 8 + 3 * gi]
        if np.linalg.norm(step) < 1e-12:
            break
    return r, t


def fit_plane_given_motion(
    r: np.ndarray,
    t_hat: np.ndarray,
    p1: np.ndarray,
    p2: np.ndarray,
    k: Optional[Intrinsics] = None,
    iters: int = 8,
) -> Optional[PlaneDecomposition]:
    """Fit the plane of a point group with the camera motion held fixed.

    With (R, T) shared across the scene, a local plane has only the three
    parameters n = N ||T|| / D left in K (R + T n^t) K^-1; they are solved
    by Gauss-Newton on the image-2 reprojection.  This sidesteps the noise
    amplification of an unconstrained 8-dof fit on small supports, where
    the projective terms are barely observable.

    Returns None when the fit degenerates or the recovered plane is at
    infinity (pure rotation).
    """
    if k is None:
        k = Intrinsics.identity()
    km = k.k
    rays = np.column_stack([p1, np.ones(len(p1))]) @ k.inv().T
    kt = km @ t_hat
    base = rays @ (r.T @ km.T)  # K R m_i per row
    n = np.zeros(3)
    for _ in range(iters):
        g = base + np.outer(rays @ n, kt)
        gz = g[:, 2]
        if (np.abs(gz) < 1e-12).any():
            return None
        pred = g[:, :2] / gz[:, None]
        resid = (p2 - pred).ravel()
        # d(u, v)/dn = [[1, 0, -u], [0, 1, -v]] / gz . (kt m^t)
        uv = pred
        a = (kt[0] - uv[:, 0] * kt[2]) / gz
        b = (kt[1] - uv[:, 1] * kt[2]) / gz
        jac = np.empty((len(rays), 2, 3))
        jac[:, 0, :] = a[:, None] * rays
        jac[:, 1, :] = b[:, None] * rays
        jac = jac.reshape(-1, 3)
        try:
            step, *_ = np.linalg.lstsq(jac, resid, rcond=None)
        except np.linalg.LinAlgError:
            return None
        n = n + step
        if np.linalg.norm(step) < 1e-14:
            break
    s = np.linalg.norm(n)
    if s < 1e-9 or not np.isfinite(s):
        return None
    nn = n / s
    if (rays @ nn > 0).sum() < (rays @ -nn > 0).sum():
        # The (T, n) -> (-T, -n) gauge was resolved the other way.
        nn = -nn
        t_hat = -t_hat
    if (rays @ nn <= 0).any():
        return None
    try:
        return PlaneDecomposition(R=r, T=t_hat, N=nn, D=1.0 / s)
    except ValueError:
        return None
