"""Constant-step SGD over any of the three gradient estimators.

The loop is strictly sequential in t; all parallelism lives inside the
estimator calls.  Alongside the iterates it keeps exact running totals
of standard work and parallel span (in Milstein-step units) and a
learning curve sampled from a dedicated evaluation seed stream that the
training randomness never touches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import estimators, hedging
from .estimators import Allocation, DelayState, GradResult, RateParams
from .hedging import MarketParams
from .paths import SeedSpec, derive_stream_root, increment_matrix

ESTIMATOR_NAMES = ("naive", "mlmc", "delayed")


class NonFiniteError(RuntimeError):
    """A loss or gradient stopped being finite; carries where and what."""

    def __init__(self, t: int, what: str, value: float):
        super().__init__(f"non-finite {what} at iteration {t}: {value}")
        self.t = t
        self.what = what
        self.value = value


@dataclass(frozen=True)
class SgdConfig:
    """Knobs of one SGD run.

    alpha0 = 0 and iterations = 0 are permitted (they make the run a
    no-op in the obvious way) so determinism tests can freeze the
    iterate; production configs use positive values.
    """

    estimator: str = "delayed"
    alpha0: float = 0.05
    iterations: int = 512
    effective_n: int = 32
    eval_every: int = 32
    eval_samples: int = 256

    def __post_init__(self):
        if self.estimator not in ESTIMATOR_NAMES:
            raise ValueError(f"estimator must be one of {ESTIMATOR_NAMES}, "
                             f"got {self.estimator!r}")
        if self.alpha0 < 0:
            raise ValueError(f"alpha0 must be >= 0, got {self.alpha0}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if self.effective_n < 1:
            raise ValueError(f"effective_n must be >= 1, got {self.effective_n}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.eval_samples < 1:
            raise ValueError(f"eval_samples must be >= 1, got {self.eval_samples}")


@dataclass
class TrajectoryPoint:
    """One learning-curve sample; work/span are cumulative step totals."""

    t: int
    loss_estimate: float
    cumulative_work: int
    cumulative_span: int
    grad_norm_estimate: float


@dataclass
class Trajectory:
    """Learning curve plus the final iterate of one run."""

    points: list[TrajectoryPoint] = field(default_factory=list)
    final_params: Optional[np.ndarray] = None


def _evaluate_loss(x: np.ndarray, mp: MarketParams, lmax: int,
                   eval_root: int, t: int, n_samples: int) -> float:
    seeds = [SeedSpec(eval_root, t, lmax, i) for i in range(n_samples)]
    inc = increment_matrix(seeds, lmax)
    return float(np.mean(hedging.loss_values(x, mp, lmax, inc)))


def run(config: SgdConfig, rates: RateParams, mp: MarketParams, seed: int,
        param_hook: Optional[Callable[[int, np.ndarray], None]] = None
        ) -> Trajectory:
    """Run SGD with the configured estimator from a seeded initialization.

    Evaluation points land at t = 0, every `eval_every` iterations, and
    at the final iterate; their loss averages `eval_samples` fresh
    finest-level samples.  Evaluation steps are diagnostics and are not
    metered as work.  `param_hook(t, x_t)` (if given) observes every
    iterate, including x_0 and the final one.

    Raises NonFiniteError as soon as a gradient or loss estimate leaves
    the finite range.
    """
    alloc = estimators.allocate(config.effective_n, rates)
    train_root = derive_stream_root(seed, "train")
    eval_root = derive_stream_root(seed, "eval")
    x = hedging.init_params(seed)
    state = DelayState(d=rates.d, lmax=rates.lmax)

    trajectory = Trajectory()
    work = span = 0
    last_grad_norm = 0.0

    def evaluate(t: int) -> None:
        loss = _evaluate_loss(x, mp, rates.lmax, eval_root, t,
                              config.eval_samples)
        if not math.isfinite(loss):
            raise NonFiniteError(t, "loss estimate", loss)
        trajectory.points.append(TrajectoryPoint(
            t=t, loss_estimate=loss, cumulative_work=work,
            cumulative_span=span, grad_norm_estimate=last_grad_norm))

    if param_hook is not None:
        param_hook(0, x.copy())
    evaluate(0)

    for t in range(config.iterations):
        if config.estimator == "naive":
            result: GradResult = estimators.naive_gradient(
                x, config.effective_n, rates, mp, t, train_root)
        elif config.estimator == "mlmc":
            result = estimators.mlmc_gradient(
                x, alloc, rates, mp, t, train_root)
        else:
            result = estimators.delayed_gradient(
                t, x, state, alloc, rates, mp, train_root)

        if not np.all(np.isfinite(result.gradient)):
            bad = float(result.gradient[~np.isfinite(result.gradient)][0])
            raise NonFiniteError(t, "gradient", bad)

        work += result.work
        span += result.span
        last_grad_norm = float(np.linalg.norm(result.gradient))
        x = x - config.alpha0 * result.gradient

        if param_hook is not None:
            param_hook(t + 1, x.copy())
        if (t + 1) % config.eval_every == 0 or t + 1 == config.iterations:
            evaluate(t + 1)

    trajectory.final_params = x
    return trajectory


def step_size_bound(l_smooth: float, l_prime: float, lmax: int, d: float,
                    t_total: int) -> float:
    """Largest constant step size the convergence guarantee permits.

    Returns min(1/(8 L'), beta_max/L) where beta_max uses the full
    geometric sum over levels, sum_{l>=0} 2^{-d l} = 1/(1 - 2^{-d}), and
    the natural logarithm of (2T + 1).
    """
    if l_smooth <= 0 or l_prime <= 0:
        raise ValueError("smoothness constants must be positive")
    if d <= 0:
        raise ValueError(f"d must be > 0 (geometric sum diverges), got {d}")
    if lmax < 0:
        raise ValueError(f"lmax must be >= 0, got {lmax}")
    if t_total < 1:
        raise ValueError(f"t_total must be >= 1, got {t_total}")
    geo_sum = 1.0 / (1.0 - 2.0 ** (-d))
    beta_max = 1.0 / (12.0 * (lmax + 1) * geo_sum * math.log(2 * t_total + 1))
    return min(1.0 / (8.0 * l_prime), beta_max / l_smooth)
