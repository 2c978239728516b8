"""Locally-biased random sampling of homography hypotheses.

Hypotheses fit to spatially nearby matches tend to correspond to real scene
planes, so each minimal sample is drawn around a random seed match with a
Gaussian spatial weighting in image-1 coordinates.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateConfiguration, ExcessiveDegeneracy, InsufficientMatches
from .geometry import (
    Correspondence,
    Homography,
    estimate_homography_xy,
    transfer_residuals_xy,
)

_MAX_RETRIES = 20


@dataclass(frozen=True)
class SamplingConfig:
    """Controls hypothesis generation.

    m: number of hypotheses to draw.
    neighborhood_k: candidate pool size around each seed match.
    sigma_spatial: width (pixels) of the exp(-d^2 / sigma^2) locality kernel.
    local_refit: refit each minimal-sample fit on the consensus inliers of
        its neighborhood pool.  Minimal fits interpolate their own noise and
        extrapolate poorly, which starves the residual ordering of signal;
        the refit restores it while keeping the hypothesis local.
    """

    m: int = 500
    neighborhood_k: int = 30
    minimal_sample: int = 4
    seed: int = 0
    sigma_spatial: float = 50.0
    local_refit: bool = True

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.neighborhood_k < self.minimal_sample:
            raise ValueError("neighborhood_k must be >= minimal_sample")
        if not self.sigma_spatial > 0:
            raise ValueError("sigma_spatial must be positive")


@dataclass(frozen=True)
class Hypothesis:
    homography: Homography
    sample_ids: tuple[int, ...]  # correspondence ids of the minimal sample


@dataclass(frozen=True)
class SamplingResult:
    hypotheses: list[Hypothesis]
    shortfall: int  # requested minus produced
    failed_draws: int
    total_draws: int

    @property
    def homographies(self) -> list[Homography]:
        return [h.homography for h in self.hypotheses]


def thread_count() -> int:
    """Parallelism cap from PLANEMERGE_THREADS (>=1)."""
    try:
        return max(1, int(os.environ.get("PLANEMERGE_THREADS", "1")))
    except ValueError:
        return 1


def _draw_sample(
    rng: np.random.Generator,
    xy1: np.ndarray,
    tree: cKDTree,
    cfg: SamplingConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Seed match uniformly, then minimal_sample - 1 pool members with
    Gaussian spatial bias; returns (sample, pool)."""
    n = len(xy1)
    seed_idx = int(rng.integers(n))
    k = min(cfg.neighborhood_k + 1, n)
    dist, idx = tree.query(xy1[seed_idx], k=k)
    dist, idx = np.atleast_1d(dist), np.atleast_1d(idx)
    pool = idx[idx != seed_idx]
    dist = dist[idx != seed_idx]
    w = np.exp(-((dist / cfg.sigma_spatial) ** 2))
    if w.sum() <= 0:
        w = np.ones_like(w, dtype=float)
    w = w / w.sum()
    rest = rng.choice(pool, size=cfg.minimal_sample - 1, replace=False, p=w)
    return np.concatenate([[seed_idx], rest]), pool


def _refit_on_pool(
    h4: Homography, sample: np.ndarray, pool: np.ndarray, xy1, xy2
) -> Homography:
    """Refit on the pool members that agree with the minimal fit."""
    r = transfer_residuals_xy(h4.m, xy1[pool], xy2[pool])
    cut = max(3.0 * 1.4826 * float(np.median(r)), 1.0)
    inliers = pool[r <= cut]
    if len(inliers) < 2 * len(sample):
        return h4
    support = np.concatenate([sample, inliers])
    try:
        return estimate_homography_xy(xy1[support], xy2[support])
    except DegenerateConfiguration:
        return h4


def sample_local_hypotheses(
    matches: Sequence[Correspondence], cfg: SamplingConfig
) -> SamplingResult:
    """Fit cfg.m homographies to local minimal samples of the matches.

    Each hypothesis uses its own RNG stream derived from (cfg.seed, index),
    so the output is identical for identical inputs regardless of internal
    scheduling.  Degenerate draws are retried a bounded number of times; a
    hypothesis that stays degenerate is dropped and counted as shortfall.

    Raises InsufficientMatches below the minimal sample size and
    ExcessiveDegeneracy when more than half of all draws failed to fit.
    """
    if len(matches) < cfg.minimal_sample:
        raise InsufficientMatches(
            f"need >= {cfg.minimal_sample} matches, got {len(matches)}"
        )
    xy1 = np.array([c.x for c in matches], dtype=float)
    xy2 = np.array([c.x_prime for c in matches], dtype=float)
    ids = np.array([c.id for c in matches], dtype=int)
    tree = cKDTree(xy1)

    def fit_one(index: int):
        rng = np.random.default_rng((cfg.seed, index))
        failures = 0
        for _ in range(_MAX_RETRIES):
            sample, pool = _draw_sample(rng, xy1, tree, cfg)
            try:
                h = estimate_homography_xy(xy1[sample], xy2[sample])
            except DegenerateConfiguration:
                failures += 1
                continue
            if cfg.local_refit:
                h = _refit_on_pool(h, sample, pool, xy1, xy2)
            return Hypothesis(h, tuple(int(i) for i in ids[sample])), failures
        return None, failures

    workers = thread_count()
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(fit_one, range(cfg.m)))
    else:
        results = [fit_one(i) for i in range(cfg.m)]

    hypotheses = [h for h, _ in results if h is not None]
    failed = sum(f for _, f in results)
    total = failed + len(hypotheses)
    if total and failed > 0.5 * total:
        raise ExcessiveDegeneracy(
            f"{failed}/{total} hypothesis draws were degenerate"
        )
    return SamplingResult(
        hypotheses=hypotheses,
        shortfall=cfg.m - len(hypotheses),
        failed_draws=failed,
        total_draws=total,
    )
