"""Batch front-end: run experiments and diagnostics, emit CSV artifacts.

Subcommands:

* ``run``   - SGD learning curves, one ``curve_<estimator>.csv`` per
  requested estimator plus a ``manifest.txt`` of the resolved config;
* ``diag``  - per-level decay tables ``decay_variance.csv`` and
  ``decay_smoothness.csv`` with the fitted rate in a trailer comment;
* ``alloc`` - the per-level sample allocation and its step costs.

Config files are flat ``key = value`` text with ``#`` comments; any key
can be overridden on the command line with ``--set key=value``.  Unknown
keys are an error, never silently ignored.  Every float is written with
full round-trip precision, and a manifest is itself a valid config file,
so re-running from it reproduces all outputs byte for byte.

Exit codes: 0 success, 2 bad configuration, 3 run aborted on a
non-finite value.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, fields

from . import diagnostics, estimators, optimizer
from .estimators import RateParams, level_cost
from .hedging import MarketParams
from .optimizer import NonFiniteError, SgdConfig
from .paths import derive_stream_root

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ABORT = 3


class ConfigError(ValueError):
    """Malformed config file, unknown key, or unusable value."""


@dataclass
class RunConfig:
    """Resolved configuration of one CLI invocation."""

    # estimators / optimizer
    estimators: tuple[str, ...] = ("naive", "mlmc", "delayed")
    alpha0: float = 0.03
    iterations: int = 320
    effective_n: int = 64
    eval_every: int = 16
    eval_samples: int = 256
    # level hierarchy rates
    b: float = 1.8
    c: float = 1.0
    d: float = 1.0
    lmax: int = 6
    # market
    mu: float = 1.0
    sigma: float = 1.0
    strike: float = 3.0
    s0: float = 1.0
    drift_proportional: bool = False
    # experiment plumbing
    experiment_seed: int = 42
    out_dir: str = "."
    fit_level_min: int = 2
    fit_level_max: int = 6
    diag_samples: int = 1000
    diag_warmup: int = 200


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


def _parse_estimators(raw: str) -> tuple[str, ...]:
    names = tuple(part.strip() for part in raw.split(",") if part.strip())
    if not names:
        raise ConfigError("estimators must name at least one estimator")
    for name in names:
        if name not in optimizer.ESTIMATOR_NAMES:
            raise ConfigError(
                f"unknown estimator {name!r}; choose from "
                f"{', '.join(optimizer.ESTIMATOR_NAMES)}")
    return names


def _coerce(name: str, raw: str) -> object:
    kind = {f.name: f.type for f in fields(RunConfig)}[name]
    try:
        if name == "estimators":
            return _parse_estimators(raw)
        if kind == "bool":
            return _parse_bool(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse flat key = value lines; '#' starts a comment anywhere."""
    known = {f.name for f in fields(RunConfig)}
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', "
                              f"got {line.rstrip()!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def load_config(path: str | None, overrides: list[str]) -> RunConfig:
    """Resolve defaults, an optional config file, and --set overrides."""
    values: dict = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as handle:
                text = handle.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        values.update(parse_config_text(text, source=path))
    known = {f.name for f in fields(RunConfig)}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = (part.strip() for part in item.split("=", 1))
        if key not in known:
            raise ConfigError(f"--set: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    try:
        return RunConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(value)
    return str(value)


def write_manifest(config: RunConfig, path: str) -> None:
    """Dump the resolved config as a re-runnable flat config file."""
    lines = [f"{f.name} = {_fmt(getattr(config, f.name))}"
             for f in fields(config)]
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("\n".join(lines) + "\n")


def _build_parts(config: RunConfig) -> tuple[RateParams, MarketParams]:
    try:
        rates = RateParams(b=config.b, c=config.c, d=config.d,
                           lmax=config.lmax)
        market = MarketParams(mu=config.mu, sigma=config.sigma,
                              strike=config.strike, s0=config.s0,
                              drift_proportional=config.drift_proportional)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if not (0 <= config.fit_level_min <= config.fit_level_max <= config.lmax):
        raise ConfigError(
            f"fit levels [{config.fit_level_min}, {config.fit_level_max}] "
            f"must be within [0, {config.lmax}]")
    return rates, market


def cmd_run(config: RunConfig) -> int:
    """Learning curves for every requested estimator."""
    rates, market = _build_parts(config)
    os.makedirs(config.out_dir, exist_ok=True)
    for name in config.estimators:
        try:
            sgd = SgdConfig(estimator=name, alpha0=config.alpha0,
                            iterations=config.iterations,
                            effective_n=config.effective_n,
                            eval_every=config.eval_every,
                            eval_samples=config.eval_samples)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        trajectory = optimizer.run(sgd, rates, market, config.experiment_seed)
        out_path = os.path.join(config.out_dir, f"curve_{name}.csv")
        with open(out_path, "w", encoding="utf-8") as handle:
            handle.write("t,loss,grad_norm,work,span\n")
            for p in trajectory.points:
                handle.write(f"{p.t},{repr(p.loss_estimate)},"
                             f"{repr(p.grad_norm_estimate)},"
                             f"{p.cumulative_work},{p.cumulative_span}\n")
    write_manifest(config, os.path.join(config.out_dir, "manifest.txt"))
    return EXIT_OK


def _write_decay_csv(path: str, estimate: diagnostics.DecayEstimate) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("level,mean,std\n")
        for level, mean, std in estimate.per_level:
            handle.write(f"{level},{repr(mean)},{repr(std)}\n")
        rate = "degenerate" if estimate.degenerate else repr(estimate.fitted_rate)
        lo, hi = estimate.fit_levels
        handle.write(f"# fitted_rate={rate} levels={lo}..{hi}\n")


def cmd_diag(config: RunConfig) -> int:
    """Decay tables measured at parameters from a short warmup run."""
    rates, market = _build_parts(config)
    os.makedirs(config.out_dir, exist_ok=True)

    iterates: dict = {}
    warmup = SgdConfig(estimator="mlmc", alpha0=config.alpha0,
                       iterations=config.diag_warmup,
                       effective_n=config.effective_n,
                       eval_every=max(1, config.diag_warmup),
                       eval_samples=2)
    optimizer.run(warmup, rates, market, config.experiment_seed,
                  param_hook=lambda t, x: iterates.__setitem__(t, x))
    x_mid = iterates[config.diag_warmup]
    x_prev = iterates[max(0, config.diag_warmup - 1)]

    variance = diagnostics.grad_norm_decay(
        x_mid, config.diag_samples, rates, market,
        derive_stream_root(config.experiment_seed, "diag-b"),
        fit_level_min=config.fit_level_min,
        fit_level_max=config.fit_level_max)
    _write_decay_csv(os.path.join(config.out_dir, "decay_variance.csv"),
                     variance)

    if config.diag_warmup >= 1:
        smoothness = diagnostics.smoothness_decay(
            x_prev, x_mid, config.diag_samples, rates, market,
            derive_stream_root(config.experiment_seed, "diag-d"),
            fit_level_min=config.fit_level_min,
            fit_level_max=config.fit_level_max)
        _write_decay_csv(os.path.join(config.out_dir, "decay_smoothness.csv"),
                         smoothness)
    else:
        raise ConfigError("diag_warmup must be >= 1 so a parameter pair "
                          "exists for the smoothness table")
    write_manifest(config, os.path.join(config.out_dir, "manifest.txt"))
    return EXIT_OK


def cmd_alloc(config: RunConfig) -> int:
    """Print the per-level allocation: level,N_level,per_sample_steps,level_work."""
    rates, _ = _build_parts(config)
    try:
        alloc = estimators.allocate(config.effective_n, rates)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    for level, count in enumerate(alloc.counts):
        steps = level_cost(level)
        print(f"{level},{count},{steps},{count * steps}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="mlmc-grad",
        description="SGD experiments with naive, multilevel, and delayed "
                    "multilevel Monte Carlo gradient estimators.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("run", "write learning-curve CSVs"),
                            ("diag", "write decay-rate CSVs"),
                            ("alloc", "print the sample allocation")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, metavar="PATH",
                       help="flat key = value config file")
        p.add_argument("--set", dest="overrides", action="append",
                       default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
    args = parser.parse_args(argv)

    try:
        config = load_config(args.config, args.overrides)
        handler = {"run": cmd_run, "diag": cmd_diag, "alloc": cmd_alloc}
        return handler[args.command](config)
    except ConfigError as exc:
        print(f"mlmc-grad: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteError as exc:
        print(f"mlmc-grad: run aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
