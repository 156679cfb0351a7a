"""Evaluation datasets and regression design assembly.

A dataset is a collection of participants, each assigned to exactly one
evaluator and carrying one or more outcome measurements (for example one
per ear).  The design matrix puts one indicator column per evaluator
first, so the indicators absorb the intercept and the indicator
coefficients are the evaluator effects, followed by participant-level
covariates and then element-level covariates.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Sequence

import numpy as np
import scipy.linalg

from .errors import IdentifiabilityError, IntegrityError, ParseError, SchemaError

RANK_RTOL = 1e-10

LAYOUTS = ("long", "wide")


@dataclass(frozen=True, slots=True)
class SchemaConfig:
    """Column roles and layout of a delimited input file.

    Long layout: one row per outcome element, with an optional integer
    ``unit_index`` column distinguishing elements within a participant
    (file order is used when absent).  Wide layout: one row per
    participant with one column per outcome element; blank outcome cells
    mean the element was not measured.

    ``categorical`` maps a participant-covariate column to its reference
    level; the loader expands such columns into indicator covariates named
    ``column=level`` for every observed non-reference level.
    """

    layout: str = "long"
    delimiter: str = ","
    participant_id: str = "participant_id"
    evaluator: str = "evaluator_id"
    outcome: str = "outcome"
    unit_index: str | None = None
    outcomes: tuple[str, ...] = ()
    participant_covariates: tuple[str, ...] = ()
    unit_covariates: tuple[str, ...] = ()
    categorical: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.layout not in LAYOUTS:
            raise SchemaError(f"layout must be one of {LAYOUTS}, got {self.layout!r}")
        if self.layout == "wide" and not self.outcomes:
            raise SchemaError("wide layout requires a nonempty 'outcomes' column list")
        if self.layout == "wide" and self.unit_covariates:
            raise SchemaError("unit covariates are only supported in the long layout")
        object.__setattr__(self, "outcomes", tuple(self.outcomes))
        object.__setattr__(self, "participant_covariates", tuple(self.participant_covariates))
        object.__setattr__(self, "unit_covariates", tuple(self.unit_covariates))
        for name, decl in self.categorical.items():
            if name not in self.participant_covariates:
                raise SchemaError(
                    f"categorical declaration for {name!r} does not match any "
                    f"declared participant covariate"
                )
            if not isinstance(decl, dict) or "reference" not in decl:
                raise SchemaError(
                    f"categorical declaration for {name!r} must provide an "
                    f"explicit 'reference' level"
                )

    @classmethod
    def from_dict(cls, data: dict) -> "SchemaConfig":
        known = {
            "format_version",
            "layout",
            "delimiter",
            "participant_id",
            "evaluator",
            "outcome",
            "unit_index",
            "outcomes",
            "participant_covariates",
            "unit_covariates",
            "categorical",
        }
        unknown = set(data) - known
        if unknown:
            raise SchemaError(f"unknown schema keys: {sorted(unknown)}")
        kwargs = {k: v for k, v in data.items() if k != "format_version"}
        return cls(**kwargs)

    @classmethod
    def from_json(cls, path: str | Path) -> "SchemaConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise SchemaError(f"schema file {path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise SchemaError(f"schema file {path} must hold a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {
            "format_version": 1,
            "layout": self.layout,
            "delimiter": self.delimiter,
            "participant_id": self.participant_id,
            "evaluator": self.evaluator,
            "outcome": self.outcome,
            "unit_index": self.unit_index,
            "outcomes": list(self.outcomes),
            "participant_covariates": list(self.participant_covariates),
            "unit_covariates": list(self.unit_covariates),
            "categorical": self.categorical,
        }


@dataclass(frozen=True, slots=True)
class ParticipantRecord:
    """One participant: evaluator assignment, outcomes, covariates."""

    participant_id: str
    evaluator: str
    outcomes: tuple[float, ...]
    unit_indices: tuple[int, ...]
    covariates: tuple[float, ...]
    unit_covariates: tuple[tuple[float, ...], ...] = ()


@dataclass(frozen=True, slots=True)
class EvaluationDataset:
    """Validated participant records plus the naming they share."""

    participants: tuple[ParticipantRecord, ...]
    evaluators: tuple[str, ...]
    covariate_names: tuple[str, ...]
    unit_covariate_names: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if not self.participants:
            raise IntegrityError("dataset has no participants")
        if len(set(self.evaluators)) != len(self.evaluators):
            raise IntegrityError("evaluator labels must be distinct")
        counts = {label: 0 for label in self.evaluators}
        q = len(self.covariate_names)
        u = len(self.unit_covariate_names)
        seen_ids = set()
        for rec in self.participants:
            if rec.participant_id in seen_ids:
                raise IntegrityError(f"participant {rec.participant_id!r} appears twice")
            seen_ids.add(rec.participant_id)
            if rec.evaluator not in counts:
                raise IntegrityError(
                    f"participant {rec.participant_id!r} references unknown "
                    f"evaluator {rec.evaluator!r}"
                )
            counts[rec.evaluator] += 1
            if len(rec.outcomes) < 1:
                raise IntegrityError(f"participant {rec.participant_id!r} has no outcomes")
            if not all(math.isfinite(y) for y in rec.outcomes):
                raise IntegrityError(
                    f"participant {rec.participant_id!r} has a non-finite outcome"
                )
            if len(rec.unit_indices) != len(rec.outcomes):
                raise IntegrityError(
                    f"participant {rec.participant_id!r}: unit indices do not "
                    f"match outcome count"
                )
            if len(rec.covariates) != q:
                raise IntegrityError(
                    f"participant {rec.participant_id!r} has {len(rec.covariates)} "
                    f"covariates, expected {q}"
                )
            if u:
                if len(rec.unit_covariates) != len(rec.outcomes):
                    raise IntegrityError(
                        f"participant {rec.participant_id!r}: unit covariate rows "
                        f"do not match outcome count"
                    )
                if any(len(row) != u for row in rec.unit_covariates):
                    raise IntegrityError(
                        f"participant {rec.participant_id!r}: unit covariate row "
                        f"width differs from declared names"
                    )
        missing = [label for label, count in counts.items() if count == 0]
        if missing:
            raise IntegrityError(f"evaluators with no participants: {missing}")

    @property
    def n_participants(self) -> int:
        return len(self.participants)

    @property
    def n_evaluators(self) -> int:
        return len(self.evaluators)


@dataclass(frozen=True, slots=True)
class DesignMatrix:
    """Design bundle for the regression stage.

    ``matrix`` holds one row per outcome element: M evaluator indicator
    columns (no global intercept; the indicators absorb it), then
    participant covariates, then unit covariates.  ``cluster_index`` maps
    each row to its participant ordinal; ``unit_index`` carries the
    element position used by the unstructured working correlation.
    """

    matrix: np.ndarray
    outcome: np.ndarray
    cluster_index: np.ndarray
    unit_index: np.ndarray
    column_names: tuple[str, ...]
    evaluator_labels: tuple[str, ...]

    @property
    def beta_column_range(self) -> slice:
        return slice(0, len(self.evaluator_labels))

    @property
    def n_rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_columns(self) -> int:
        return self.matrix.shape[1]


def _parse_number(text: str, column: str, line: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(
            f"row {line}: column {column!r}: could not parse {text!r} as a number"
        ) from None
    if not math.isfinite(value):
        raise ParseError(f"row {line}: column {column!r}: non-finite value {text!r}")
    return value


def _parse_unit_index(text: str, column: str, line: int) -> int:
    try:
        value = int(text)
    except ValueError:
        raise ParseError(
            f"row {line}: column {column!r}: could not parse {text!r} as an integer"
        ) from None
    if value < 0:
        raise ParseError(f"row {line}: column {column!r}: unit index must be nonnegative")
    return value


class _HeaderMap:
    """Resolve declared column names against the header row."""

    def __init__(self, header: Sequence[str]) -> None:
        self.positions: dict[str, int] = {}
        for pos, name in enumerate(header):
            if name in self.positions:
                raise SchemaError(f"duplicate column {name!r} in header")
            self.positions[name] = pos

    def require(self, name: str) -> int:
        if name not in self.positions:
            raise SchemaError(f"column {name!r} not found in header")
        return self.positions[name]


def _cell(row: Sequence[str], position: int, line: int) -> str:
    if position >= len(row):
        raise ParseError(f"row {line}: too few cells")
    return row[position].strip()


class _ParticipantBuilder:
    __slots__ = ("evaluator", "covariates", "elements", "first_line")

    def __init__(self, evaluator: str, covariates: tuple, first_line: int) -> None:
        self.evaluator = evaluator
        self.covariates = covariates
        self.elements: list[tuple[int, float, tuple[float, ...]]] = []
        self.first_line = first_line


def _load_long(reader, header: _HeaderMap, schema: SchemaConfig):
    i_pid = header.require(schema.participant_id)
    i_eval = header.require(schema.evaluator)
    i_out = header.require(schema.outcome)
    i_unit = header.require(schema.unit_index) if schema.unit_index else None
    i_cov = [header.require(name) for name in schema.participant_covariates]
    i_unit_cov = [header.require(name) for name in schema.unit_covariates]
    categorical = set(schema.categorical)

    builders: dict[str, _ParticipantBuilder] = {}
    order: list[str] = []
    for line, row in enumerate(reader, start=2):
        if not row:
            continue
        pid = _cell(row, i_pid, line)
        if not pid:
            raise IntegrityError(f"row {line}: empty participant id")
        evaluator = _cell(row, i_eval, line)
        if not evaluator:
            raise IntegrityError(f"row {line}: empty evaluator cell")
        covariates = tuple(
            _cell(row, pos, line)
            if name in categorical
            else _parse_number(_cell(row, pos, line), name, line)
            for name, pos in zip(schema.participant_covariates, i_cov)
        )
        outcome = _parse_number(_cell(row, i_out, line), schema.outcome, line)
        if i_unit is not None:
            unit = _parse_unit_index(_cell(row, i_unit, line), schema.unit_index, line)
        else:
            unit = None
        unit_cov = tuple(
            _parse_number(_cell(row, pos, line), name, line)
            for name, pos in zip(schema.unit_covariates, i_unit_cov)
        )
        builder = builders.get(pid)
        if builder is None:
            builder = _ParticipantBuilder(evaluator, covariates, line)
            builders[pid] = builder
            order.append(pid)
        else:
            if builder.evaluator != evaluator:
                raise IntegrityError(
                    f"participant {pid!r} is mapped to evaluators "
                    f"{builder.evaluator!r} and {evaluator!r} (rows {builder.first_line} "
                    f"and {line})"
                )
            if builder.covariates != covariates:
                raise IntegrityError(
                    f"participant {pid!r} has conflicting covariate values "
                    f"(rows {builder.first_line} and {line})"
                )
        position = unit if unit is not None else len(builder.elements)
        if any(existing == position for existing, _, _ in builder.elements):
            raise IntegrityError(f"row {line}: duplicate unit index {position} for {pid!r}")
        builder.elements.append((position, outcome, unit_cov))
    return builders, order


def _load_wide(reader, header: _HeaderMap, schema: SchemaConfig):
    i_pid = header.require(schema.participant_id)
    i_eval = header.require(schema.evaluator)
    i_outs = [header.require(name) for name in schema.outcomes]
    i_cov = [header.require(name) for name in schema.participant_covariates]
    categorical = set(schema.categorical)

    builders: dict[str, _ParticipantBuilder] = {}
    order: list[str] = []
    for line, row in enumerate(reader, start=2):
        if not row:
            continue
        pid = _cell(row, i_pid, line)
        if not pid:
            raise IntegrityError(f"row {line}: empty participant id")
        if pid in builders:
            raise IntegrityError(f"row {line}: participant {pid!r} appears twice")
        evaluator = _cell(row, i_eval, line)
        if not evaluator:
            raise IntegrityError(f"row {line}: empty evaluator cell")
        covariates = tuple(
            _cell(row, pos, line)
            if name in categorical
            else _parse_number(_cell(row, pos, line), name, line)
            for name, pos in zip(schema.participant_covariates, i_cov)
        )
        builder = _ParticipantBuilder(evaluator, covariates, line)
        for position, (name, pos) in enumerate(zip(schema.outcomes, i_outs)):
            text = _cell(row, pos, line)
            if text == "":
                continue
            builder.elements.append((position, _parse_number(text, name, line), ()))
        if not builder.elements:
            raise IntegrityError(f"row {line}: participant {pid!r} has no outcomes")
        builders[pid] = builder
        order.append(pid)
    return builders, order


def _expand_categorical(
    builders: dict[str, _ParticipantBuilder], order: list[str], schema: SchemaConfig
) -> tuple[tuple[str, ...], dict[str, tuple[float, ...]]]:
    """Replace categorical covariates with indicator columns.

    Levels are sorted for determinism; the declared reference level is
    dropped.  Returns the expanded covariate names and per-participant
    numeric covariate tuples.
    """
    names: list[str] = []
    plans: list[tuple[int, str | None, list[str]]] = []
    for position, name in enumerate(schema.participant_covariates):
        if name in schema.categorical:
            reference = str(schema.categorical[name]["reference"])
            levels = sorted(
                {str(builders[pid].covariates[position]) for pid in order} - {reference}
            )
            plans.append((position, reference, levels))
            names.extend(f"{name}={level}" for level in levels)
        else:
            plans.append((position, None, []))
            names.append(name)
    expanded: dict[str, tuple[float, ...]] = {}
    for pid in order:
        raw = builders[pid].covariates
        values: list[float] = []
        for position, reference, levels in plans:
            if reference is None:
                values.append(float(raw[position]))
            else:
                values.extend(1.0 if str(raw[position]) == level else 0.0 for level in levels)
        expanded[pid] = tuple(values)
    return tuple(names), expanded


def load_dataset(source: str | Path | IO[str], schema: SchemaConfig) -> EvaluationDataset:
    """Parse a delimited text stream into a validated dataset.

    ``source`` may be a path or an open text stream.  The first row must
    be a header naming every column the schema declares.
    """
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8", newline="") as handle:
            return load_dataset(handle, schema)
    reader = csv.reader(source, delimiter=schema.delimiter)
    try:
        header_row = next(reader)
    except StopIteration:
        raise SchemaError("input is empty; a header row is required") from None
    header = _HeaderMap([name.strip() for name in header_row])
    if schema.layout == "long":
        builders, order = _load_long(reader, header, schema)
    else:
        builders, order = _load_wide(reader, header, schema)
    if not order:
        raise IntegrityError("input has a header but no data rows")

    covariate_names, covariates = _expand_categorical(builders, order, schema)
    participants = []
    evaluators: list[str] = []
    seen = set()
    for pid in order:
        builder = builders[pid]
        if builder.evaluator not in seen:
            seen.add(builder.evaluator)
            evaluators.append(builder.evaluator)
        elements = sorted(builder.elements)
        participants.append(
            ParticipantRecord(
                participant_id=pid,
                evaluator=builder.evaluator,
                outcomes=tuple(outcome for _, outcome, _ in elements),
                unit_indices=tuple(position for position, _, _ in elements),
                covariates=covariates[pid],
                unit_covariates=tuple(cov for _, _, cov in elements)
                if schema.unit_covariates
                else (),
            )
        )
    return EvaluationDataset(
        participants=tuple(participants),
        evaluators=tuple(evaluators),
        covariate_names=covariate_names,
        unit_covariate_names=tuple(schema.unit_covariates),
    )


def write_dataset(dataset: EvaluationDataset, path: str | Path) -> SchemaConfig:
    """Write a dataset as long-layout CSV and return the matching schema.

    Floats are written with shortest round-trip precision, so loading the
    file back yields an identical dataset.
    """
    schema = SchemaConfig(
        layout="long",
        participant_id="participant_id",
        evaluator="evaluator_id",
        outcome="outcome",
        unit_index="unit_index",
        participant_covariates=dataset.covariate_names,
        unit_covariates=dataset.unit_covariate_names,
    )
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, delimiter=schema.delimiter)
        writer.writerow(
            ["participant_id", "evaluator_id", "unit_index", "outcome"]
            + list(dataset.covariate_names)
            + list(dataset.unit_covariate_names)
        )
        for rec in dataset.participants:
            for element, (unit, outcome) in enumerate(zip(rec.unit_indices, rec.outcomes)):
                row = [rec.participant_id, rec.evaluator, str(unit), repr(float(outcome))]
                row.extend(repr(float(value)) for value in rec.covariates)
                if dataset.unit_covariate_names:
                    row.extend(repr(float(value)) for value in rec.unit_covariates[element])
                writer.writerow(row)
    return schema


def _check_rank(matrix: np.ndarray, column_names: Sequence[str]) -> None:
    """Numerical rank check via pivoted QR with a relative tolerance."""
    _, r, pivots = scipy.linalg.qr(matrix, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    p = matrix.shape[1]
    if diag.size == 0:
        raise IdentifiabilityError("design matrix has no rows")
    threshold = RANK_RTOL * diag[0]
    deficient = [pivots[j] for j in range(p) if j >= diag.size or diag[j] <= threshold]
    if deficient:
        names = ", ".join(repr(column_names[j]) for j in sorted(deficient))
        raise IdentifiabilityError(
            f"design matrix is rank deficient; offending columns: {names}"
        )


def build_design(dataset: EvaluationDataset) -> DesignMatrix:
    """Assemble the regression design from a validated dataset.

    Deterministic: identical datasets give identical matrices.  Raises an
    identifiability error when any column lies in the span of the others
    (for example a covariate constant across all rows, which duplicates
    the indicator span).
    """
    m = dataset.n_evaluators
    q = len(dataset.covariate_names)
    u = len(dataset.unit_covariate_names)
    evaluator_position = {label: j for j, label in enumerate(dataset.evaluators)}
    n_rows = sum(len(rec.outcomes) for rec in dataset.participants)

    matrix = np.zeros((n_rows, m + q + u))
    outcome = np.empty(n_rows)
    cluster_index = np.empty(n_rows, dtype=int)
    unit_index = np.empty(n_rows, dtype=int)
    row = 0
    for ordinal, rec in enumerate(dataset.participants):
        j = evaluator_position[rec.evaluator]
        for element, y in enumerate(rec.outcomes):
            matrix[row, j] = 1.0
            if q:
                matrix[row, m : m + q] = rec.covariates
            if u:
                matrix[row, m + q :] = rec.unit_covariates[element]
            outcome[row] = y
            cluster_index[row] = ordinal
            unit_index[row] = rec.unit_indices[element]
            row += 1

    column_names = (
        tuple(f"evaluator={label}" for label in dataset.evaluators)
        + dataset.covariate_names
        + dataset.unit_covariate_names
    )
    _check_rank(matrix, column_names)
    return DesignMatrix(
        matrix=matrix,
        outcome=outcome,
        cluster_index=cluster_index,
        unit_index=unit_index,
        column_names=column_names,
        evaluator_labels=dataset.evaluators,
    )
