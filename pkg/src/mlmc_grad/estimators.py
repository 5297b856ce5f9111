"""The three gradient estimators and their allocation/scheduling arithmetic.

* naive Monte Carlo: average of independent finest-level gradients;
* standard MLMC: per-level coupled-difference averages with the
  variance-optimal sample allocation N_l ~ 2^{-(b+c)l/2};
* delayed MLMC: refreshes the level-l average only once every
  floor(2^{d l}) SGD steps and reuses the cached value in between.

Cost accounting is exact, in Milstein-step units: a level-l coupled
sample costs 2^l fine steps plus 2^{l-1} coarse steps (no coarse pass
at level 0 or for the naive estimator).  "Work" totals steps across all
samples; "span" is the critical path assuming unlimited processors, so
one iteration's span is the largest single-sample cost among the levels
actually recomputed.
"""

from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import hedging
from .hedging import MarketParams
from .paths import SeedSpec


class ScheduleError(RuntimeError):
    """Delayed-estimator state was driven out of iteration order."""


@dataclass(frozen=True)
class RateParams:
    """Exponential rates of the level hierarchy.

    b: decay rate of the coupled-gradient second moment (variance),
    c: growth rate of per-level cost,
    d: decay rate of per-level smoothness; also sets the delay periods.
    """

    b: float = 1.8
    c: float = 1.0
    d: float = 1.0
    lmax: int = 6

    def __post_init__(self):
        for name in ("b", "c", "d"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.lmax < 0:
            raise ValueError(f"lmax must be >= 0, got {self.lmax}")
        if self.b <= self.c:
            warnings.warn(
                f"b={self.b} <= c={self.c}: the multilevel estimator loses "
                "its cost advantage in this regime", UserWarning,
                stacklevel=2)


@dataclass(frozen=True)
class Allocation:
    """Per-level sample counts for one effective batch size."""

    counts: tuple[int, ...]
    effective_n: int


def level_cost(level: int) -> int:
    """Milstein steps of one coupled sample: fine pass plus coarse pass."""
    return (1 << level) + ((1 << (level - 1)) if level >= 1 else 0)


def allocate(n: int, rates: RateParams) -> Allocation:
    """Split an effective batch of n across levels.

    N_l = ceil( 2^{-(b+c)l/2} / sum_k 2^{-(b+c)k/2} * n ), the allocation
    that minimizes estimator variance at fixed total cost.
    """
    if n < 1:
        raise ValueError(f"effective batch size must be >= 1, got {n}")
    rate = (rates.b + rates.c) / 2.0
    weights = [2.0 ** (-rate * lev) for lev in range(rates.lmax + 1)]
    denom = sum(weights)
    counts = tuple(math.ceil(w / denom * n) for w in weights)
    return Allocation(counts=counts, effective_n=n)


def delay_period(level: int, d: float) -> int:
    """Refresh period floor(2^{d*level}) of a level, never below 1."""
    if level < 0:
        raise ValueError(f"level must be >= 0, got {level}")
    if d <= 0:
        raise ValueError(f"d must be > 0, got {d}")
    return max(1, math.floor(2.0 ** (d * level)))


def tau(t: int, level: int, d: float) -> int:
    """Most recent refresh time of a level at or before iteration t."""
    if t < 0:
        raise ValueError(f"iteration must be >= 0, got {t}")
    p = delay_period(level, d)
    return p * (t // p)


@dataclass
class GradResult:
    """A gradient estimate plus its exact step metering."""

    gradient: np.ndarray
    work: int
    span: int
    levels_refreshed: frozenset[int]


@dataclass
class DelayState:
    """Cached per-level gradients and their refresh times (tau)."""

    d: float
    lmax: int
    tau: dict[int, int] = field(default_factory=dict)
    cached: dict[int, np.ndarray] = field(default_factory=dict)
    next_t: int = 0

    def assert_consistent(self, t: int) -> None:
        """Check the tau window and alignment invariants at iteration t."""
        for lev in range(self.lmax + 1):
            p = delay_period(lev, self.d)
            tl = self.tau[lev]
            if not (t - p <= tl <= t and tl % p == 0):
                raise AssertionError(
                    f"tau[{lev}]={tl} violates its constraints at t={t}")


def _thread_count() -> int:
    """Worker threads for per-level evaluation.

    MLMC_GRAD_THREADS > 1 enables a thread pool over levels; 0, 1, unset
    or malformed all mean serial evaluation (per-level batches are
    already vectorized, so serial is the sensible automatic choice).
    """
    raw = os.environ.get("MLMC_GRAD_THREADS", "0")
    try:
        return max(0, int(raw))
    except ValueError:
        return 0


def _level_gradients(x: np.ndarray, levels: list[int], alloc: Allocation,
                     mp: MarketParams, t: int, seed: int
                     ) -> dict[int, np.ndarray]:
    """Coupled-difference mean gradients for the given levels at x.

    Each level draws its own fresh seeds (seed, t, level, 0..N_l-1).
    Levels are independent, so they may be evaluated on worker threads;
    results are keyed by level and later summed in fixed order, keeping
    the output identical however the evaluation was scheduled.
    """
    def one(level: int) -> np.ndarray:
        seeds = [SeedSpec(seed, t, level, i)
                 for i in range(alloc.counts[level])]
        grad, _, _ = hedging.grad_of_mean(x, mp, level, seeds, couple=True)
        return grad

    workers = _thread_count()
    if workers > 1 and len(levels) > 1:
        with ThreadPoolExecutor(max_workers=min(workers, len(levels))) as ex:
            grads = list(ex.map(one, levels))
    else:
        grads = [one(lev) for lev in levels]
    return dict(zip(levels, grads))


def _sum_levels(parts: list[np.ndarray]) -> np.ndarray:
    total = parts[0].copy()
    for g in parts[1:]:
        total += g
    return total


def naive_gradient(x: np.ndarray, n: int, rates: RateParams,
                   mp: MarketParams, t: int, seed: int) -> GradResult:
    """Average of n independent finest-level gradients (no coupling)."""
    if n < 1:
        raise ValueError(f"sample count must be >= 1, got {n}")
    seeds = [SeedSpec(seed, t, rates.lmax, i) for i in range(n)]
    grad, _, _ = hedging.grad_of_mean(x, mp, rates.lmax, seeds, couple=False)
    steps = 1 << rates.lmax
    return GradResult(gradient=grad, work=n * steps, span=steps,
                      levels_refreshed=frozenset({rates.lmax}))


def mlmc_gradient(x: np.ndarray, alloc: Allocation, rates: RateParams,
                  mp: MarketParams, t: int, seed: int) -> GradResult:
    """Sum over levels of coupled-difference sample averages."""
    if len(alloc.counts) != rates.lmax + 1:
        raise ValueError(
            f"allocation has {len(alloc.counts)} levels, rates expect "
            f"{rates.lmax + 1}")
    levels = list(range(rates.lmax + 1))
    per_level = _level_gradients(x, levels, alloc, mp, t, seed)
    grad = _sum_levels([per_level[lev] for lev in levels])
    work = sum(alloc.counts[lev] * level_cost(lev) for lev in levels)
    return GradResult(gradient=grad, work=work, span=level_cost(rates.lmax),
                      levels_refreshed=frozenset(levels))


def delayed_gradient(t: int, x_t: np.ndarray, state: DelayState,
                     alloc: Allocation, rates: RateParams, mp: MarketParams,
                     seed: int) -> GradResult:
    """One step of the delayed estimator, mutating `state` in place.

    Levels due at t (t divisible by the level's period) are recomputed
    at x_t from fresh samples and re-cached; the estimate is the sum of
    all cached per-level gradients.  Work and span count only the levels
    actually recomputed this iteration; level 0 recomputes every step,
    so the span is never zero.
    """
    if len(alloc.counts) != rates.lmax + 1:
        raise ValueError(
            f"allocation has {len(alloc.counts)} levels, rates expect "
            f"{rates.lmax + 1}")
    if state.lmax != rates.lmax:
        raise ValueError(f"state lmax {state.lmax} != rates lmax {rates.lmax}")
    if t != state.next_t:
        raise ScheduleError(
            f"iteration {t} out of order; expected {state.next_t}")

    refreshed = [lev for lev in range(rates.lmax + 1)
                 if t % delay_period(lev, state.d) == 0]
    per_level = _level_gradients(x_t, refreshed, alloc, mp, t, seed)
    for lev in refreshed:
        state.cached[lev] = per_level[lev]
        state.tau[lev] = t
    state.next_t = t + 1

    grad = _sum_levels([state.cached[lev] for lev in range(rates.lmax + 1)])
    work = sum(alloc.counts[lev] * level_cost(lev) for lev in refreshed)
    span = max(level_cost(lev) for lev in refreshed)
    return GradResult(gradient=grad, work=work, span=span,
                      levels_refreshed=frozenset(refreshed))
