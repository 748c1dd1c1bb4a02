"""Batch experiment runner.

Each subcommand reads one JSON config, runs the corresponding verification
experiment, and writes CSV/JSON artifacts stamped with a content hash of
the resolved config.  Outputs are byte-identical across reruns and worker
counts: replication streams are keyed by index and aggregation is ordered.

Exit codes: 0 success, 1 completed but the checked quantity is outside the
configured band, 2 config/precondition error, 3 degenerate but completed,
4 capability missing, 5 divergence or accuracy failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (
    AccuracyError,
    CapabilityError,
    ConfigError,
    DivergenceError,
    DomainError,
    ResourceLimitError,
)
from .grid import dyadic_partition, uniform_partition
from .models import ModelSpec, from_config
from .propagator import build_propagator_grid, propagator_ode, sigma
from .reference import REFINEMENT_FACTOR, solve_reference
from .stats import (
    as_trace,
    fit_rate,
    normality_report,
    resolve_workers,
    rms_sup_error,
    run_ensemble,
)

EXIT_OK = 0
EXIT_OUT_OF_BAND = 1
EXIT_CONFIG = 2
EXIT_DEGENERATE = 3
EXIT_CAPABILITY = 4
EXIT_NUMERIC = 5

_DEFAULT_TOLERANCES = {
    "slope_band": [0.4, 0.6],
    "reference_tol": 1e-10,
    "sigma_tol": 1e-3,
    "propagator_tol": 1e-6,
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved experiment configuration; hashes canonically."""

    model: dict
    partition: dict
    replications: int
    eval_time: float
    master_seed: int
    tolerances: dict = field(default_factory=dict)
    output_dir: str = "out"

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        try:
            return cls(
                model=dict(raw["model"]),
                partition=dict(raw["partition"]),
                replications=int(raw.get("replications", 1)),
                eval_time=float(raw.get("eval_time", raw["model"].get("T", 1.0))),
                master_seed=int(raw.get("master_seed", 0)),
                tolerances={**_DEFAULT_TOLERANCES, **raw.get("tolerances", {})},
                output_dir=str(raw.get("output_dir", "out")),
            )
        except (KeyError, TypeError, ValueError) as err:
            raise ConfigError(f"bad config: {err}") from err

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "partition": self.partition,
            "replications": self.replications,
            "eval_time": self.eval_time,
            "master_seed": self.master_seed,
            "tolerances": self.tolerances,
            "output_dir": self.output_dir,
        }

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _header(cfg: ExperimentConfig) -> str:
    return f"# stocheuler {__version__} config={cfg.config_hash}\n"


def _write_csv(path: Path, cfg: ExperimentConfig, header: str, rows) -> None:
    with open(path, "w") as fh:
        fh.write(_header(cfg))
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


def _write_json(path: Path, cfg: ExperimentConfig, payload: dict) -> None:
    doc = {"version": __version__, "config_hash": cfg.config_hash, **payload}
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def _dyadic_levels(cfg: ExperimentConfig, minimum: int = 1) -> list[int]:
    block = cfg.partition
    if block.get("kind") != "dyadic" or "levels" not in block:
        raise ConfigError("partition block must have kind 'dyadic' and a 'levels' list")
    levels = [int(l) for l in block["levels"]]
    if len(levels) < minimum:
        raise ConfigError(f"need at least {minimum} dyadic levels")
    return levels


def _single_partition(cfg: ExperimentConfig, horizon: float):
    block = cfg.partition
    kind = block.get("kind")
    if kind == "dyadic":
        if "level" in block:
            return dyadic_partition(int(block["level"]), horizon)
        levels = block.get("levels")
        if levels:
            return dyadic_partition(int(levels[0]), horizon)
        raise ConfigError("dyadic partition block needs 'level' or 'levels'")
    if kind == "uniform":
        return uniform_partition(int(block["steps"]), horizon)
    raise ConfigError("partition 'kind' must be 'dyadic' or 'uniform'")


def cmd_converge(cfg: ExperimentConfig, out_dir: Path, *, n_workers: int | None = None) -> int:
    """Rate experiment: ensembles per dyadic level, log-log fit of RMS sup error."""
    levels = _dyadic_levels(cfg, minimum=3)
    model = from_config(cfg.model)
    ref_tol = float(cfg.tolerances["reference_tol"])
    ref = solve_reference(
        model.field,
        model.x0,
        model.horizon,
        ref_tol,
        min_steps=REFINEMENT_FACTOR * (1 << max(levels)),
    )

    points = []
    for level in levels:
        p = dyadic_partition(level, model.horizon)
        ens = run_ensemble(
            model.field,
            model.estimator,
            p,
            model.x0,
            cfg.eval_time,
            cfg.replications,
            cfg.master_seed,
            ref=ref,
            n_workers=n_workers,
        )
        points.append((p.mesh, rms_sup_error(ens)))

    fit = fit_rate(points)
    _write_csv(
        out_dir / "rates.csv",
        cfg,
        "mesh,rms_error",
        ([_fmt(m), _fmt(e)] for m, e in points),
    )
    lo, hi = (float(b) for b in cfg.tolerances["slope_band"])
    within = lo <= fit.slope <= hi
    _write_json(
        out_dir / "fit.json",
        cfg,
        {
            "slope": fit.slope,
            "intercept": fit.intercept,
            "residual": fit.residual,
            "slope_band": [lo, hi],
            "within_band": within,
        },
    )
    return EXIT_OK if within else EXIT_OUT_OF_BAND


def cmd_normality(cfg: ExperimentConfig, out_dir: Path, *, n_workers: int | None = None) -> int:
    """Normality experiment at one level: predicted Sigma vs. ensemble diagnostics."""
    model = from_config(cfg.model)
    if model.field.jacobian is None:
        raise CapabilityError("normality experiment needs a model jacobian")
    p = _single_partition(cfg, model.horizon)
    ref_tol = float(cfg.tolerances["reference_tol"])
    ref = solve_reference(
        model.field, model.x0, model.horizon, ref_tol,
        min_steps=REFINEMENT_FACTOR * p.n_steps,
    )

    t_star = cfg.eval_time
    if model.sigma_closed is not None:
        predicted = np.asarray(model.sigma_closed(t_star), dtype=np.float64)
    else:
        predicted = sigma(
            model.field,
            model.estimator,
            ref,
            t_star,
            tol=float(cfg.tolerances["sigma_tol"]),
        )

    ens = run_ensemble(
        model.field,
        model.estimator,
        p,
        model.x0,
        t_star,
        cfg.replications,
        cfg.master_seed,
        ref=ref,
        n_workers=n_workers,
    )
    report = normality_report(ens, predicted)
    _write_json(out_dir / "normality.json", cfg, report.to_json_dict())
    return EXIT_DEGENERATE if report.degenerate else EXIT_OK


def cmd_trace(cfg: ExperimentConfig, out_dir: Path) -> int:
    """Single-seed sup-error trace over increasing dyadic levels."""
    levels = _dyadic_levels(cfg)
    model = from_config(cfg.model)
    trace = as_trace(
        model.field,
        model.estimator,
        model.x0,
        model.horizon,
        levels,
        cfg.master_seed,
        ref_tol=float(cfg.tolerances["reference_tol"]),
    )
    _write_csv(
        out_dir / "trace.csv",
        cfg,
        "level,sup_error",
        ([str(l), _fmt(e)] for l, e in trace),
    )
    return EXIT_OK


def cmd_propagator(cfg: ExperimentConfig, out_dir: Path) -> int:
    """Deviation of the discrete propagator from its limit over a probe grid."""
    levels = _dyadic_levels(cfg)
    model = from_config(cfg.model)
    if model.field.jacobian is None:
        raise CapabilityError("propagator experiment needs a model jacobian")
    ref = solve_reference(
        model.field, model.x0, model.horizon, float(cfg.tolerances["reference_tol"]),
        min_steps=REFINEMENT_FACTOR * (1 << max(levels)),
    )

    n_probe = int(cfg.partition.get("probe_points", 10))
    probes = np.linspace(0.0, model.horizon, n_probe)
    pairs = [(s, t) for s in probes for t in probes if s <= t]
    limits = {pair: propagator_ode(model.field, ref, *pair) for pair in pairs}

    rows = []
    for level in levels:
        grid = build_propagator_grid(model.field, ref, dyadic_partition(level, model.horizon))
        dev = max(
            float(np.linalg.norm(grid.product(s, t) - limits[(s, t)], 2)) for s, t in pairs
        )
        rows.append([str(level), _fmt(dev)])
    _write_csv(out_dir / "propagator.csv", cfg, "level,deviation", rows)
    return EXIT_OK


_COMMANDS = {
    "converge": cmd_converge,
    "normality": cmd_normality,
    "trace": cmd_trace,
    "propagator": cmd_propagator,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stocheuler",
        description="Randomized Euler scheme verification experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", required=True, help="path to the JSON config")
        cmd.add_argument("--out", default=None, help="output directory (overrides config)")
        cmd.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
    return parser


def run_command(command: str, config_path: str, out: str | None = None, seed: int | None = None) -> int:
    try:
        with open(config_path) as fh:
            raw = json.load(fh)
    except OSError as err:
        print(f"error: cannot read config: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except json.JSONDecodeError as err:
        print(f"error: config is not valid JSON: {err}", file=sys.stderr)
        return EXIT_CONFIG

    if seed is not None:
        raw["master_seed"] = seed
    if out is not None:
        raw["output_dir"] = out

    try:
        cfg = ExperimentConfig.from_dict(raw)
        out_dir = Path(cfg.output_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        workers = resolve_workers(None)
        if command in ("converge", "normality"):
            return _COMMANDS[command](cfg, out_dir, n_workers=workers)
        return _COMMANDS[command](cfg, out_dir)
    except (ConfigError, DomainError, ResourceLimitError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except CapabilityError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CAPABILITY
    except (DivergenceError, AccuracyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NUMERIC


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    return run_command(args.command, args.config, args.out, args.seed)


if __name__ == "__main__":
    sys.exit(main())
