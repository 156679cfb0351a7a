"""Report builders and file round-trips.

Every artifact written by the command-line layer goes through here: JSON
reports carry a ``format_version`` so later readers can refuse files
they do not understand, and delimited tables get one writer so quoting
and float formatting stay uniform.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .detection import DetectionResult
from .errors import ParseError, SchemaError
from .gee import GeeFit
from .simulation import SimulationMetrics

FORMAT_VERSION = 1


def write_json(payload: dict, path: str | Path) -> None:
    path = Path(path)
    path.write_text(json.dumps(payload, indent=2, sort_keys=False) + "\n")


def read_json(path: str | Path, expected_version: int = FORMAT_VERSION) -> dict:
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: not valid JSON: {exc}") from None
    if not isinstance(payload, dict):
        raise SchemaError(f"{path}: expected a JSON object at top level")
    version = payload.get("format_version")
    if version != expected_version:
        raise SchemaError(
            f"{path}: format_version {version!r} not supported (expected {expected_version})"
        )
    return payload


def write_table(path: str | Path, header: list[str], rows: list[list]) -> None:
    """Delimited table with a leading comment line carrying the format
    version, so the files are self-describing like the JSON reports."""
    path = Path(path)
    with path.open("w", newline="") as handle:
        handle.write(f"# format_version={FORMAT_VERSION}\n")
        writer = csv.writer(handle)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def _nu_payload(nu) -> float | list | None:
    if nu is None:
        return None
    if np.ndim(nu) == 0:
        return float(nu)
    return np.asarray(nu).tolist()


def build_fit_report(fit: GeeFit) -> dict:
    """Everything needed to rerun detection on a stored fit: effects,
    both covariance blocks, and the convergence diagnostics."""
    return {
        "format_version": FORMAT_VERSION,
        "correlation": fit.correlation,
        "converged": fit.converged,
        "iterations": fit.iterations,
        "phi_hat": fit.phi_hat,
        "nu_hat": _nu_payload(fit.nu_hat),
        "evaluators": list(fit.evaluator_labels),
        "beta_hat": [float(v) for v in fit.beta_hat],
        "coefficients": {
            name: float(value)
            for name, value in zip(fit.column_names, fit.theta_hat)
        },
        "omega_model": fit.omega_model.tolist(),
        "omega_sandwich": fit.omega_sandwich.tolist(),
    }


def build_detection_report(result: DetectionResult) -> dict:
    return result.to_report()


def format_step_table(result: DetectionResult) -> str:
    """Human-readable step table: one line per elimination step, then the
    final count and the detected labels in selection order."""
    lines = [
        f"{'step':>4}  {'candidates':>10}  {'selected':>8}  "
        f"{'statistic':>12}  {'critical':>12}  rejected"
    ]
    for record in result.steps:
        lines.append(
            f"{record.step:>4}  {len(record.candidate_set):>10}  "
            f"{record.selected:>8}  {record.statistic:>12.4f}  "
            f"{record.critical_value:>12.4f}  {'yes' if record.rejected else 'no':>8}"
        )
    if result.k_prime:
        lines.append(
            f"\ndetected (k' = {result.k_prime}): {', '.join(result.detected)}"
        )
    else:
        lines.append("\ndetected (k' = 0): none")
    return "\n".join(lines) + "\n"


def build_metrics_report(metrics: SimulationMetrics, include_records: bool = True) -> dict:
    return metrics.to_dict(include_records=include_records)


def metrics_table_header() -> list[str]:
    return [
        "sigma",
        "alpha",
        "rho",
        "variance",
        "replicates",
        "failures",
        "type_i_rate",
        "type_i_se",
        "tpr",
        "tpr_se",
        "tnr",
        "tnr_se",
    ]


def metrics_table_row(cell: dict, metrics: SimulationMetrics) -> list:
    return [
        cell["sigma"],
        cell["alpha"],
        cell["rho"],
        cell["variance"],
        metrics.replicates_completed,
        len(metrics.failures),
        f"{metrics.type_i_rate:.6f}",
        f"{metrics.type_i_se:.6f}",
        "" if metrics.tpr is None else f"{metrics.tpr:.6f}",
        "" if metrics.tpr_se is None else f"{metrics.tpr_se:.6f}",
        f"{metrics.tnr:.6f}",
        f"{metrics.tnr_se:.6f}",
    ]
