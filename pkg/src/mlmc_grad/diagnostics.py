"""Empirical decay-rate estimation for the level hierarchy.

Checks the assumptions the estimators rest on: the squared norm of the
coupled gradient should shrink like 2^{-b l} (it upper-bounds the
per-level variance), the path-wise smoothness ratio like 2^{-d l}, and
per-level cost should grow like 2^{c l}.  Each estimate is a per-level
(mean, std) table plus a least-squares slope on the log2 scale.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import hedging
from .estimators import RateParams, level_cost
from .hedging import MarketParams
from .paths import SeedSpec

DEFAULT_FIT_MIN = 2


@dataclass
class DecayEstimate:
    """Per-level sample statistics and the fitted log2 rate.

    fitted_rate is the magnitude of the slope (the decay exponent for
    the gradient diagnostics, the growth exponent for cost).  A fit is
    degenerate when some level in the fit range has a non-positive
    mean - frozen dynamics, for instance, zero out every coupling - and
    then fitted_rate is NaN.
    """

    per_level: list[tuple[int, float, float]]
    fitted_rate: float
    fit_levels: tuple[int, int]
    degenerate: bool = False


def fit_log2_rate(points) -> float:
    """Negated least-squares slope of log2(value) against level."""
    points = list(points)
    if len(points) < 3:
        raise ValueError(f"rate fit needs >= 3 points, got {len(points)}")
    levels = np.array([p[0] for p in points], dtype=np.float64)
    values = np.array([p[1] for p in points], dtype=np.float64)
    if np.any(values <= 0):
        raise ValueError("rate fit needs positive values")
    slope, _ = np.polyfit(levels, np.log2(values), 1)
    return -float(slope)


def _fit_range(rates: RateParams, fit_level_min, fit_level_max) -> tuple[int, int]:
    lo = DEFAULT_FIT_MIN if fit_level_min is None else fit_level_min
    hi = rates.lmax if fit_level_max is None else fit_level_max
    if not (0 <= lo <= hi <= rates.lmax):
        raise ValueError(f"invalid fit range [{lo}, {hi}] for lmax={rates.lmax}")
    return lo, hi


def _estimate(per_level: list[tuple[int, float, float]],
              lo: int, hi: int) -> DecayEstimate:
    fit_points = [(lev, mean) for lev, mean, _ in per_level if lo <= lev <= hi]
    if any(mean <= 0 or not math.isfinite(mean) for _, mean in fit_points):
        return DecayEstimate(per_level, float("nan"), (lo, hi),
                             degenerate=True)
    return DecayEstimate(per_level, fit_log2_rate(fit_points), (lo, hi))


def grad_norm_decay(x: np.ndarray, samples: int, rates: RateParams,
                    mp: MarketParams, seed: int, fit_level_min=None,
                    fit_level_max=None) -> DecayEstimate:
    """Per-level mean and std of the squared coupled-gradient norm.

    The mean at level l estimates E||grad of the level-l difference||^2,
    an upper bound on that level's estimator variance; the fitted rate
    estimates the decay exponent b.
    """
    if samples < 2:
        raise ValueError(f"need >= 2 samples, got {samples}")
    lo, hi = _fit_range(rates, fit_level_min, fit_level_max)
    per_level = []
    for lev in range(rates.lmax + 1):
        seeds = [SeedSpec(seed, 0, lev, i) for i in range(samples)]
        grads = hedging.per_sample_grads(x, mp, lev, seeds, couple=True)
        sq = np.sum(grads * grads, axis=1)
        per_level.append((lev, float(np.mean(sq)), float(np.std(sq, ddof=1))))
    return _estimate(per_level, lo, hi)


def smoothness_decay(x_t: np.ndarray, x_next: np.ndarray, samples: int,
                     rates: RateParams, mp: MarketParams, seed: int,
                     fit_level_min=None, fit_level_max=None) -> DecayEstimate:
    """Per-level path-wise smoothness between two parameter vectors.

    For each sampled path the same increments drive both evaluations;
    the statistic is ||grad difference|| / ||parameter difference||,
    whose decay exponent estimates d.  Symmetric in its two arguments.
    """
    if samples < 2:
        raise ValueError(f"need >= 2 samples, got {samples}")
    denom = float(np.linalg.norm(np.asarray(x_next) - np.asarray(x_t)))
    if denom == 0.0:
        raise ValueError("parameter vectors must differ")
    lo, hi = _fit_range(rates, fit_level_min, fit_level_max)
    per_level = []
    for lev in range(rates.lmax + 1):
        seeds = [SeedSpec(seed, 0, lev, i) for i in range(samples)]
        g_next = hedging.per_sample_grads(x_next, mp, lev, seeds, couple=True)
        g_t = hedging.per_sample_grads(x_t, mp, lev, seeds, couple=True)
        ratios = np.linalg.norm(g_next - g_t, axis=1) / denom
        per_level.append((lev, float(np.mean(ratios)),
                          float(np.std(ratios, ddof=1))))
    return _estimate(per_level, lo, hi)


def cost_growth(rates: RateParams, mp: MarketParams = None) -> DecayEstimate:
    """Per-level coupled-sample step counts and their growth exponent.

    Level 0 (no coarse pass) is excluded from the fit; above it the
    count is exactly 3 * 2^{l-1}, so the fitted exponent is 1 up to the
    additive coarse-pass constant.
    """
    per_level = [(lev, float(level_cost(lev)), 0.0)
                 for lev in range(rates.lmax + 1)]
    lo = max(1, DEFAULT_FIT_MIN - 1)
    est = _estimate(per_level, lo, rates.lmax)
    # fit_log2_rate negates for decay; cost grows, so flip back.
    if not est.degenerate:
        est.fitted_rate = -est.fitted_rate
    return est


def wall_clock_growth(rates: RateParams, mp: MarketParams, x: np.ndarray,
                      seed: int, batch: int = 256, repeats: int = 3,
                      fit_level_min: int = 3) -> DecayEstimate:
    """Measured per-level gradient time and its growth exponent.

    Times a batched coupled-gradient evaluation per level (best of
    `repeats` to damp scheduler noise).  Loose by nature: constant
    overheads flatten low levels, so the fit starts at fit_level_min.
    """
    per_level = []
    for lev in range(rates.lmax + 1):
        seeds = [SeedSpec(seed, 0, lev, i) for i in range(batch)]
        elapsed = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            hedging.grad_of_mean(x, mp, lev, seeds, couple=True)
            elapsed.append(time.perf_counter() - t0)
        per_level.append((lev, min(elapsed), 0.0))
    est = _estimate(per_level, fit_level_min, rates.lmax)
    if not est.degenerate:
        est.fitted_rate = -est.fitted_rate
    return est
