"""Delayed multilevel Monte Carlo gradient estimation for SGD.

Building blocks for optimizing sequential stochastic simulations with
three interchangeable gradient estimators (naive Monte Carlo, standard
MLMC, delayed MLMC), exact work/span cost accounting, decay-rate
diagnostics for the level hierarchy, and a deep-hedging benchmark
problem to exercise them end to end.
"""

from .autodiff import Tape, TapeError, backward, backward_per_sample
from .diagnostics import (DecayEstimate, cost_growth, fit_log2_rate,
                          grad_norm_decay, smoothness_decay)
from .estimators import (Allocation, DelayState, GradResult, RateParams,
                         ScheduleError, allocate, delay_period,
                         delayed_gradient, level_cost, mlmc_gradient,
                         naive_gradient, tau)
from .hedging import (LossSample, MarketParams, coupled_grad, hedge_ratio,
                      init_params, loss_values, milstein_step, simulate_loss)
from .optimizer import (NonFiniteError, SgdConfig, Trajectory,
                        TrajectoryPoint, run, step_size_bound)
from .paths import (CoupledIncrements, SeedSpec, coarsen,
                    gaussian_from_counter, sample_increments)

__version__ = "0.1.0"

__all__ = [
    "Allocation", "CoupledIncrements", "DecayEstimate", "DelayState",
    "GradResult", "LossSample", "MarketParams", "NonFiniteError",
    "RateParams", "ScheduleError", "SeedSpec", "SgdConfig", "Tape",
    "TapeError", "Trajectory", "TrajectoryPoint", "allocate", "backward",
    "backward_per_sample", "coarsen", "cost_growth", "coupled_grad",
    "delay_period", "delayed_gradient", "fit_log2_rate",
    "gaussian_from_counter", "grad_norm_decay", "hedge_ratio",
    "init_params", "level_cost", "loss_values", "milstein_step",
    "mlmc_gradient", "naive_gradient", "run", "sample_increments",
    "simulate_loss", "smoothness_decay", "step_size_bound", "tau",
]
