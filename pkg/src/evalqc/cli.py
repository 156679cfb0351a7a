"""Command-line front end.

Four subcommands: ``detect`` runs the regression and stepwise screen on
a dataset, ``simulate`` runs scenario replicates (optionally a grid over
sigma, alpha, rho, and variance choice), ``critical-values`` tabulates
per-step thresholds for a stored fit or an identity covariance, and
``plot-effects`` renders stored reports as SVG.

Exit codes: 0 success, 2 input or schema problems, 3 numerical or
convergence failures, 4 configuration mistakes.  Errors print a single
``kind: message`` line on stderr.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

from .data import SchemaConfig, build_design, load_dataset
from .detection import DetectionConfig, TrimSpec, critical_values, detect_outliers
from .errors import EXIT_OK, ConfigurationError, EvalqcError, InputError
from .gee import CORRELATION_KINDS, fit_gee
from .plotting import BACKING_TABLE_HEADER, plot_effects
from .reports import (
    build_detection_report,
    build_fit_report,
    build_metrics_report,
    format_step_table,
    metrics_table_header,
    metrics_table_row,
    read_json,
    write_json,
    write_table,
)
from .simulation import SimulationScenario, run_grid, run_replicates

FORMAT_VERSION = 1


@dataclass(frozen=True)
class RunManifest:
    """What was run, on which inputs, writing where; enough to re-run."""

    command: str
    inputs: dict
    output_dir: str
    seed: int | None
    threads: int

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "command": self.command,
            "inputs": self.inputs,
            "output_dir": self.output_dir,
            "seed": self.seed,
            "threads": self.threads,
        }


def _check_inputs_exist(inputs: dict) -> None:
    for role, path in inputs.items():
        if path is None:
            continue
        paths = path if isinstance(path, list) else [path]
        for p in paths:
            if not Path(p).is_file():
                raise InputError(f"{role} file does not exist: {p}")


def _prepare_output_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {out}: {exc}") from None
    if not os.access(out, os.W_OK):
        raise InputError(f"output directory {out} is not writable")
    return out


def _apply_thread_budget(threads: int) -> None:
    """Cap numeric-library threads process-wide; worker processes inherit
    the cap through the environment."""
    if threads < 1:
        raise ConfigurationError(f"threads must be at least 1, got {threads}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(threads)
    try:
        import threadpoolctl
    except ImportError:
        return
    threadpoolctl.threadpool_limits(limits=threads)


def _merged_detection_config(args, base: dict | None = None) -> DetectionConfig:
    """Config-file values overridden by whichever flags were given."""
    merged = dict(base or {})
    merged.pop("format_version", None)
    if args.alpha is not None:
        merged["alpha"] = args.alpha
    if args.max_outliers is not None:
        merged["max_outliers"] = args.max_outliers
    if args.trim is not None:
        merged["trim"] = TrimSpec.parse(args.trim).to_dict()
    if args.variance is not None:
        merged["variance_choice"] = args.variance
    if args.mc_samples is not None:
        merged["mc_samples"] = args.mc_samples
    if args.seed is not None:
        merged["seed"] = args.seed
    return DetectionConfig.from_dict(merged)


def _omega_for(fit_or_report, variance_choice: str):
    import numpy as np

    if isinstance(fit_or_report, dict):
        key = "omega_sandwich" if variance_choice == "sandwich" else "omega_model"
        return np.asarray(fit_or_report[key], dtype=float)
    if variance_choice == "sandwich":
        return fit_or_report.omega_sandwich
    return fit_or_report.omega_model


def cmd_detect(args) -> int:
    inputs = {"data": args.data, "schema": args.schema, "config": args.config}
    _check_inputs_exist(inputs)
    out = _prepare_output_dir(args.output_dir)

    schema = SchemaConfig.from_json(args.schema)
    dataset = load_dataset(args.data, schema)
    design = build_design(dataset)
    fit = fit_gee(design, correlation=args.correlation)

    base = read_json(args.config) if args.config else None
    config = _merged_detection_config(args, base)
    result = detect_outliers(
        fit.beta_hat, _omega_for(fit, config.variance_choice), list(fit.evaluator_labels), config
    )

    manifest = RunManifest(
        command="detect",
        inputs=inputs,
        output_dir=str(out),
        seed=args.seed,
        threads=args.threads,
    )
    write_json(manifest.to_dict(), out / "manifest.json")
    fit_report = build_fit_report(fit)
    write_json(fit_report, out / "fit_report.json")
    detection_report = build_detection_report(result)
    write_json(detection_report, out / "detection_report.json")
    (out / "detection_steps.txt").write_text(format_step_table(result))
    if args.plot:
        svg, rows = plot_effects(fit_report, [detection_report])
        (out / "effects.svg").write_text(svg)
        write_table(out / "effects_table.csv", BACKING_TABLE_HEADER, rows)

    if result.k_prime:
        print(f"detected {result.k_prime} outlier evaluator(s): {', '.join(result.detected)}")
    else:
        print("detected 0 outlier evaluators")
    print(f"reports written to {out}")
    return EXIT_OK


def _parse_float_list(text: str, flag: str) -> tuple[float, ...]:
    try:
        values = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise ConfigurationError(f"{flag} expects comma-separated numbers, got {text!r}") from None
    if not values:
        raise ConfigurationError(f"{flag} must name at least one value")
    return values


def _parse_variance_list(text: str) -> tuple[str, ...]:
    values = tuple(v.strip() for v in text.split(","))
    for v in values:
        if v not in ("model", "sandwich"):
            raise ConfigurationError(
                f"--grid-variance entries must be 'model' or 'sandwich', got {v!r}"
            )
    return values


def cmd_simulate(args) -> int:
    inputs = {"scenario": args.scenario}
    _check_inputs_exist(inputs)
    out = _prepare_output_dir(args.output_dir)

    scenario = SimulationScenario.from_dict(read_json(args.scenario))
    detection = _merged_detection_config(args, scenario.detection.to_dict())
    scenario = replace(scenario, detection=detection)
    if args.seed is not None:
        scenario = replace(scenario, seed=args.seed)

    manifest = RunManifest(
        command="simulate",
        inputs=inputs,
        output_dir=str(out),
        seed=args.seed,
        threads=args.threads,
    )
    write_json(manifest.to_dict(), out / "manifest.json")

    if args.grid:
        cells = run_grid(
            scenario,
            sigmas=_parse_float_list(args.grid_sigma, "--grid-sigma") if args.grid_sigma else None,
            alphas=_parse_float_list(args.grid_alpha, "--grid-alpha") if args.grid_alpha else None,
            rhos=_parse_float_list(args.grid_rho, "--grid-rho") if args.grid_rho else None,
            variances=_parse_variance_list(args.grid_variance) if args.grid_variance else None,
            threads=args.threads,
        )
        rows = [metrics_table_row(cell, metrics) for cell, metrics in cells]
        write_table(out / "grid.csv", metrics_table_header(), rows)
        write_json(
            {
                "format_version": FORMAT_VERSION,
                "scenario": scenario.to_dict(),
                "cells": [
                    {"cell": cell, "metrics": build_metrics_report(m, include_records=False)}
                    for cell, m in cells
                ],
            },
            out / "grid.json",
        )
        print(f"{len(cells)} grid cells written to {out}")
        return EXIT_OK

    metrics = run_replicates(scenario, threads=args.threads)
    write_json(build_metrics_report(metrics), out / "metrics.json")
    cell = {
        "sigma": scenario.sigma,
        "alpha": scenario.detection.alpha,
        "rho": scenario.rho,
        "variance": scenario.detection.variance_choice,
    }
    write_table(out / "metrics.csv", metrics_table_header(), [metrics_table_row(cell, metrics)])
    print(
        f"type-I rate {metrics.type_i_rate:.4f}"
        + ("" if metrics.tpr is None else f", TPR {metrics.tpr:.4f}, TNR {metrics.tnr:.4f}")
    )
    print(f"reports written to {out}")
    return EXIT_OK


def cmd_critical_values(args) -> int:
    import numpy as np

    if (args.fit_report is None) == (args.dimension is None):
        raise ConfigurationError("give exactly one of --fit-report or --dimension")
    inputs = {"fit_report": args.fit_report}
    _check_inputs_exist(inputs)
    out = _prepare_output_dir(args.output_dir)

    config = _merged_detection_config(args)
    beta = None
    if args.fit_report:
        report = read_json(args.fit_report)
        omega = _omega_for(report, config.variance_choice)
        m = len(report["evaluators"])
        beta = report["beta_hat"]
    else:
        if args.dimension < 2:
            raise ConfigurationError(f"--dimension must be at least 2, got {args.dimension}")
        m = args.dimension
        omega = np.eye(m)

    values = critical_values(omega, m, config, beta_hat=beta)
    manifest = RunManifest(
        command="critical-values",
        inputs=inputs,
        output_dir=str(out),
        seed=args.seed,
        threads=args.threads,
    )
    write_json(manifest.to_dict(), out / "manifest.json")
    rows = [
        [step + 1, m - step, f"{value:.8f}", f"{value**0.5:.8f}"]
        for step, value in enumerate(values)
    ]
    write_table(out / "critical_values.csv", ["step", "candidates", "lambda", "sqrt_lambda"], rows)
    for row in rows:
        print(f"step {row[0]:>3}  candidates {row[1]:>4}  lambda {row[2]}")
    return EXIT_OK


def cmd_plot_effects(args) -> int:
    inputs = {"fit_report": args.fit_report, "detection_report": list(args.detection_report)}
    _check_inputs_exist(inputs)
    out = _prepare_output_dir(args.output_dir)

    fit_report = read_json(args.fit_report)
    detection_reports = [read_json(path) for path in args.detection_report]
    svg, rows = plot_effects(fit_report, detection_reports)
    (out / "effects.svg").write_text(svg)
    write_table(out / "effects_table.csv", BACKING_TABLE_HEADER, rows)
    manifest = RunManifest(
        command="plot-effects",
        inputs=inputs,
        output_dir=str(out),
        seed=args.seed,
        threads=args.threads,
    )
    write_json(manifest.to_dict(), out / "manifest.json")
    print(f"plot written to {out / 'effects.svg'}")
    return EXIT_OK


def _add_common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--alpha", type=float, default=None, help="test size in (0, 1)")
    parser.add_argument(
        "--max-outliers", type=int, default=None, help="number of elimination steps k"
    )
    parser.add_argument(
        "--trim",
        default=None,
        help="truncation rule, 'count:G' or 'fraction:DELTA' (default count:k)",
    )
    parser.add_argument(
        "--variance",
        choices=("model", "sandwich"),
        default=None,
        help="covariance fed to the screen",
    )
    parser.add_argument(
        "--mc-samples", type=int, default=None, help="Monte Carlo draws per critical value"
    )
    parser.add_argument("--seed", type=int, default=None, help="base random seed")
    parser.add_argument("--threads", type=int, default=1, help="worker thread budget")
    parser.add_argument("--output-dir", default="evalqc-out", help="directory for reports")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evalqc",
        description="Screen evaluator panels for outliers via regression "
        "effects and a stepwise maximum-deviation test.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_detect = sub.add_parser("detect", help="run detection on a dataset")
    p_detect.add_argument("--data", required=True, help="delimited data file")
    p_detect.add_argument("--schema", required=True, help="schema JSON")
    p_detect.add_argument("--config", default=None, help="detection config JSON")
    p_detect.add_argument(
        "--correlation",
        choices=CORRELATION_KINDS,
        default="independent",
        help="working correlation for the regression",
    )
    p_detect.add_argument("--plot", action="store_true", help="also write the effects plot")
    _add_common_flags(p_detect)
    p_detect.set_defaults(func=cmd_detect)

    p_sim = sub.add_parser("simulate", help="run a simulation scenario")
    p_sim.add_argument("--scenario", required=True, help="scenario JSON")
    p_sim.add_argument("--grid", action="store_true", help="cross sigma x alpha x rho x variance")
    p_sim.add_argument("--grid-sigma", default=None, help="comma-separated sigma values")
    p_sim.add_argument("--grid-alpha", default=None, help="comma-separated alpha values")
    p_sim.add_argument("--grid-rho", default=None, help="comma-separated rho values")
    p_sim.add_argument("--grid-variance", default=None, help="comma-separated variance choices")
    _add_common_flags(p_sim)
    p_sim.set_defaults(func=cmd_simulate)

    p_crit = sub.add_parser("critical-values", help="tabulate per-step critical values")
    p_crit.add_argument("--fit-report", default=None, help="fit report JSON from detect")
    p_crit.add_argument(
        "--dimension", type=int, default=None, help="identity-covariance dimension instead"
    )
    _add_common_flags(p_crit)
    p_crit.set_defaults(func=cmd_critical_values)

    p_plot = sub.add_parser("plot-effects", help="render stored reports as SVG")
    p_plot.add_argument("--fit-report", required=True, help="fit report JSON")
    p_plot.add_argument(
        "--detection-report",
        action="append",
        required=True,
        help="detection report JSON (repeat for an alpha sweep)",
    )
    _add_common_flags(p_plot)
    p_plot.set_defaults(func=cmd_plot_effects)

    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _apply_thread_budget(args.threads)
        return args.func(args)
    except EvalqcError as exc:
        message = " ".join(str(exc).split())
        print(f"{exc.kind}: {message}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(run())
