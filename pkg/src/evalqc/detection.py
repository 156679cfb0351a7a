"""Stepwise screening of evaluator effects for outliers.

Stage two of the pipeline.  Given effect estimates ``beta_hat`` and their
covariance ``omega`` from the regression stage, the detector runs a fixed
number of elimination steps.  Each step singles out the candidate whose
estimate lies farthest from a truncated mean of the current candidates,
studentized by the contrast variance, and compares that squared deviation
against a Monte Carlo critical value.  The number of reported outliers is
the largest step index whose statistic exceeds its critical value, so a
late rejection pulls in every earlier selection.

Estimates and covariance are computed once upstream and sub-setted as
candidates are removed; nothing is refit between steps.  The trimmed set
is recomputed from the current candidates at every step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    DegenerateCovarianceError,
    InputError,
)
from .mvn import MaxAbsQuantileRequest, _covariance_factor, max_abs_quantile
from .rng import TAG_STEP, child_seed, validate_seed

# Contrast variances at or below this are treated as degenerate.
MIN_CONTRAST_VARIANCE = 1e-12

VARIANCE_CHOICES = ("model", "sandwich")


@dataclass(frozen=True, slots=True)
class TrimSpec:
    """How many order statistics to drop from each end of a candidate set.

    ``count`` trims a fixed number g from each end at every step;
    ``fraction`` trims g = floor(delta * n) where n is the current
    candidate-set size, so g shrinks as candidates are removed.
    """

    kind: str
    value: float

    def __post_init__(self) -> None:
        if self.kind == "count":
            if int(self.value) != self.value or self.value < 0:
                raise ConfigurationError(f"trim count must be a nonnegative integer, got {self.value}")
            object.__setattr__(self, "value", int(self.value))
        elif self.kind == "fraction":
            if not 0.0 <= self.value < 0.5:
                raise ConfigurationError(f"trim fraction must lie in [0, 0.5), got {self.value}")
            object.__setattr__(self, "value", float(self.value))
        else:
            raise ConfigurationError(f"trim kind must be 'count' or 'fraction', got {self.kind!r}")

    @classmethod
    def count(cls, c: int) -> "TrimSpec":
        return cls("count", c)

    @classmethod
    def fraction(cls, delta: float) -> "TrimSpec":
        return cls("fraction", delta)

    @classmethod
    def parse(cls, text: str) -> "TrimSpec":
        """Parse 'count:10' or 'fraction:0.2'."""
        kind, sep, value = text.partition(":")
        if not sep:
            raise ConfigurationError(f"trim must look like 'count:10' or 'fraction:0.2', got {text!r}")
        try:
            number = int(value) if kind == "count" else float(value)
        except ValueError:
            raise ConfigurationError(f"trim value {value!r} is not numeric") from None
        return cls(kind, number)

    def trim_count(self, n: int) -> int:
        """Number trimmed from each end for a candidate set of size n.

        The floor for the fraction form is taken with a small guard so a
        product like 0.3 * 10 that lands one ulp under an integer still
        counts as that integer.
        """
        if self.kind == "count":
            g = int(self.value)
        else:
            g = int(math.floor(self.value * n + 1e-9))
        if n - 2 * g < 1:
            raise ConfigurationError(
                f"trimming {g} from each end of {n} candidates leaves no untrimmed element"
            )
        return g

    def to_dict(self) -> dict:
        return {"kind": self.kind, "value": self.value}

    @classmethod
    def from_dict(cls, data: dict) -> "TrimSpec":
        return cls(data["kind"], data["value"])


@dataclass(frozen=True, slots=True)
class DetectionConfig:
    """Settings for one detection run.

    ``trim`` defaults to Count(max_outliers): excluding the largest and
    smallest k candidates from the mean protects it from the very
    outliers being hunted.
    """

    alpha: float = 0.05
    max_outliers: int = 10
    trim: TrimSpec | None = None
    variance_choice: str = "model"
    mc_samples: int = 200_000
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ConfigurationError(f"alpha must lie in (0, 1), got {self.alpha}")
        if int(self.max_outliers) != self.max_outliers or self.max_outliers < 1:
            raise ConfigurationError(f"max_outliers must be a positive integer, got {self.max_outliers}")
        object.__setattr__(self, "max_outliers", int(self.max_outliers))
        if self.trim is None:
            object.__setattr__(self, "trim", TrimSpec.count(self.max_outliers))
        elif not isinstance(self.trim, TrimSpec):
            raise ConfigurationError(f"trim must be a TrimSpec, got {self.trim!r}")
        if self.variance_choice not in VARIANCE_CHOICES:
            raise ConfigurationError(
                f"variance_choice must be one of {VARIANCE_CHOICES}, got {self.variance_choice!r}"
            )
        if self.mc_samples < 1000:
            raise ConfigurationError(f"mc_samples must be at least 1000, got {self.mc_samples}")
        validate_seed(self.seed)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "max_outliers": self.max_outliers,
            "trim": self.trim.to_dict(),
            "variance_choice": self.variance_choice,
            "mc_samples": self.mc_samples,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DetectionConfig":
        known = {"alpha", "max_outliers", "trim", "variance_choice", "mc_samples", "seed"}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown detection config keys: {sorted(unknown)}")
        kwargs = dict(data)
        if "trim" in kwargs and kwargs["trim"] is not None:
            kwargs["trim"] = TrimSpec.from_dict(kwargs["trim"])
        return cls(**kwargs)


@dataclass(frozen=True, slots=True)
class StepRecord:
    """Outcome of one elimination step."""

    step: int
    candidate_set: tuple[str, ...]
    selected: str
    statistic: float
    critical_value: float
    rejected: bool


@dataclass(frozen=True, slots=True)
class DetectionResult:
    """Full output of a detection run, immutable and self-describing."""

    labels: tuple[str, ...]
    beta_hat: tuple[float, ...]
    variance_choice: str
    config: DetectionConfig
    steps: tuple[StepRecord, ...]
    k_prime: int
    detected: tuple[str, ...]

    def to_report(self) -> dict:
        """JSON-style report: config echo, per-step table, k', detections."""
        return {
            "format_version": 1,
            "config": self.config.to_dict(),
            "variance_choice": self.variance_choice,
            "evaluators": list(self.labels),
            "beta_hat": list(self.beta_hat),
            "steps": [
                {
                    "step": rec.step,
                    "candidate_count": len(rec.candidate_set),
                    "selected": rec.selected,
                    "statistic": rec.statistic,
                    "critical_value": rec.critical_value,
                    "rejected": rec.rejected,
                }
                for rec in self.steps
            ],
            "k_prime": self.k_prime,
            "detected": list(self.detected),
        }


def truncated_mean(values: Sequence[float], trim: TrimSpec) -> float:
    """Mean of the values after dropping g order statistics from each end."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise InputError(f"values must be a nonempty vector, got shape {arr.shape}")
    g = trim.trim_count(arr.size)
    inner = np.sort(arr)[g : arr.size - g]
    return float(inner.mean())


def _trimmed_positions(values: np.ndarray, g: int) -> np.ndarray:
    """Positions of the g smallest and g largest values.

    Ties are resolved by ascending-sort order with the position as the
    secondary key, which favors lower labels on the low end and keeps the
    trimmed set consistent with the order statistics dropped by
    truncated_mean even when values repeat.
    """
    if g == 0:
        return np.empty(0, dtype=int)
    order = np.lexsort((np.arange(values.size), values))
    return np.sort(np.concatenate([order[:g], order[values.size - g :]]))


def _contrast_matrix(n: int, trimmed: np.ndarray) -> np.ndarray:
    """All n contrast rows for a candidate set of size n.

    Row m reproduces the deviation of candidate m from the truncated mean:
    trimmed columns carry 0, untrimmed columns carry -1/(n-2g), and the
    diagonal entry gets +1 on top.
    """
    u = n - trimmed.size
    contrasts = np.zeros((n, n))
    untrimmed = np.setdiff1d(np.arange(n), trimmed, assume_unique=True)
    contrasts[:, untrimmed] = -1.0 / u
    contrasts[np.arange(n), np.arange(n)] += 1.0
    return contrasts


def contrast_vector(m: int, n: int, trimmed: Iterable[int]) -> np.ndarray:
    """Contrast for candidate m in a set of size n with the given trimmed
    positions; satisfies L · beta = beta[m] - truncated mean."""
    if not 0 <= m < n:
        raise InputError(f"candidate index {m} outside the candidate set of size {n}")
    trimmed_arr = np.asarray(sorted(set(int(i) for i in trimmed)), dtype=int)
    if trimmed_arr.size and (trimmed_arr[0] < 0 or trimmed_arr[-1] >= n):
        raise InputError("trimmed positions outside the candidate set")
    if n - trimmed_arr.size < 1:
        raise ConfigurationError("trimming leaves no untrimmed element")
    return _contrast_matrix(n, trimmed_arr)[m]


def _step_pieces(
    beta: np.ndarray, omega: np.ndarray, trim: TrimSpec
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shared per-step computation: contrast matrix, deviations, variances."""
    n = beta.size
    g = trim.trim_count(n)
    trimmed = _trimmed_positions(beta, g)
    contrasts = _contrast_matrix(n, trimmed)
    deviations = contrasts @ beta
    variances = np.einsum("ij,ij->i", contrasts @ omega, contrasts)
    if np.min(variances) <= MIN_CONTRAST_VARIANCE:
        worst = int(np.argmin(variances))
        raise DegenerateCovarianceError(
            f"contrast variance for candidate at position {worst} is "
            f"{variances[worst]:.3e}, at or below {MIN_CONTRAST_VARIANCE:g}"
        )
    return contrasts, deviations, variances


def mesd_step(
    beta_sub: Sequence[float], omega_sub: np.ndarray, trim: TrimSpec
) -> tuple[float, int]:
    """One elimination scan over the current candidates.

    Returns the largest studentized squared deviation from the truncated
    mean and the position of the candidate attaining it (exact ties go to
    the lower position, hence the lower label).
    """
    beta = np.asarray(beta_sub, dtype=float)
    omega = np.asarray(omega_sub, dtype=float)
    if beta.ndim != 1 or omega.shape != (beta.size, beta.size):
        raise InputError(
            f"estimates of length {beta.size} need a matching square covariance, "
            f"got shape {omega.shape}"
        )
    _, deviations, variances = _step_pieces(beta, omega, trim)
    ratios = deviations**2 / variances
    position = int(np.argmax(ratios))
    return float(ratios[position]), position


def _step_critical_value(
    omega: np.ndarray,
    contrasts: np.ndarray,
    variances: np.ndarray,
    alpha: float,
    mc_samples: int,
    seed: int,
) -> float:
    """Squared (1-alpha) Monte Carlo quantile of the max absolute
    normalized contrast under the current-step null."""
    normalized = contrasts / np.sqrt(variances)[:, None]
    cov = normalized @ omega @ normalized.T
    cov = (cov + cov.T) / 2.0
    root = max_abs_quantile(MaxAbsQuantileRequest(cov, alpha, mc_samples, seed))
    return root * root


def k_prime(rejected: Sequence[bool]) -> int:
    """Detected count: the largest 1-based step index whose statistic was
    rejected, or 0 when none was.  Later rejections override earlier
    non-rejections."""
    result = 0
    for index, flag in enumerate(rejected, start=1):
        if flag:
            result = index
    return result


def _run_steps(
    beta: np.ndarray,
    omega: np.ndarray,
    labels: tuple[str, ...],
    config: DetectionConfig,
) -> list[StepRecord]:
    """All k elimination steps, unconditionally (the k' rule needs every
    statistic, so there is no early stop)."""
    indices = np.arange(beta.size)
    records: list[StepRecord] = []
    for step in range(1, config.max_outliers + 1):
        beta_sub = beta[indices]
        omega_sub = omega[np.ix_(indices, indices)]
        contrasts, deviations, variances = _step_pieces(beta_sub, omega_sub, config.trim)
        ratios = deviations**2 / variances
        position = int(np.argmax(ratios))
        statistic = float(ratios[position])
        critical = _step_critical_value(
            omega_sub,
            contrasts,
            variances,
            config.alpha,
            config.mc_samples,
            child_seed(config.seed, TAG_STEP, step),
        )
        records.append(
            StepRecord(
                step=step,
                candidate_set=tuple(labels[i] for i in indices),
                selected=labels[indices[position]],
                statistic=statistic,
                critical_value=critical,
                rejected=statistic > critical,
            )
        )
        indices = np.delete(indices, position)
    return records


def _validate_inputs(
    beta_hat: Sequence[float],
    omega: np.ndarray,
    labels: Sequence[str],
    config: DetectionConfig,
) -> tuple[np.ndarray, np.ndarray, tuple[str, ...]]:
    beta = np.asarray(beta_hat, dtype=float)
    omega_arr = np.asarray(omega, dtype=float)
    m = beta.size
    if beta.ndim != 1 or m == 0:
        raise InputError("beta_hat must be a nonempty vector")
    if not np.all(np.isfinite(beta)):
        raise InputError("beta_hat contains non-finite entries")
    if omega_arr.shape != (m, m):
        raise InputError(f"omega must be {m}x{m}, got shape {omega_arr.shape}")
    label_tuple = tuple(str(lab) for lab in labels)
    if len(label_tuple) != m:
        raise InputError(f"{m} estimates need {m} labels, got {len(label_tuple)}")
    if len(set(label_tuple)) != m:
        raise InputError("evaluator labels must be distinct")
    if config.max_outliers >= m:
        raise ConfigurationError(
            f"max_outliers must be smaller than the evaluator count, "
            f"got k={config.max_outliers} with M={m}"
        )
    for step in range(1, config.max_outliers + 1):
        config.trim.trim_count(m - step + 1)
    _covariance_factor(omega_arr)
    return beta, omega_arr, label_tuple


def detect_outliers(
    beta_hat: Sequence[float],
    omega: np.ndarray,
    labels: Sequence[str],
    config: DetectionConfig,
) -> DetectionResult:
    """Run the full stepwise screen over (beta_hat, omega).

    ``omega`` must be the covariance named by config.variance_choice; the
    choice is echoed into the result as provenance.  Critical-value draws
    for step t come from the substream (config.seed, TAG_STEP, t), so a
    fixed config reproduces the result bit for bit.
    """
    beta, omega_arr, label_tuple = _validate_inputs(beta_hat, omega, labels, config)
    records = _run_steps(beta, omega_arr, label_tuple, config)
    detected_count = k_prime([rec.rejected for rec in records])
    return DetectionResult(
        labels=label_tuple,
        beta_hat=tuple(float(b) for b in beta),
        variance_choice=config.variance_choice,
        config=config,
        steps=tuple(records),
        k_prime=detected_count,
        detected=tuple(rec.selected for rec in records[:detected_count]),
    )


def critical_values(
    omega: np.ndarray,
    m: int,
    config: DetectionConfig,
    beta_hat: Sequence[float] | None = None,
) -> tuple[float, ...]:
    """Critical values for every step of a detection run.

    With ``beta_hat`` supplied the candidate chain and trimmed sets match
    detect_outliers exactly.  Without estimates the chain cannot be known,
    so a fixed positional convention stands in: each step trims the first
    and last g positions of the current candidate list and removes the
    last candidate.  Under an exchangeable covariance the convention is
    distributionally equivalent to any other choice.
    """
    omega_arr = np.asarray(omega, dtype=float)
    if omega_arr.shape != (m, m):
        raise InputError(f"omega must be {m}x{m}, got shape {omega_arr.shape}")
    if beta_hat is not None:
        result = detect_outliers(beta_hat, omega_arr, [str(i + 1) for i in range(m)], config)
        return tuple(rec.critical_value for rec in result.steps)
    if config.max_outliers >= m:
        raise ConfigurationError(
            f"max_outliers must be smaller than the evaluator count, "
            f"got k={config.max_outliers} with M={m}"
        )
    _covariance_factor(omega_arr)
    indices = np.arange(m)
    values = []
    for step in range(1, config.max_outliers + 1):
        n = indices.size
        omega_sub = omega_arr[np.ix_(indices, indices)]
        g = config.trim.trim_count(n)
        trimmed = np.concatenate([np.arange(g), np.arange(n - g, n)]).astype(int)
        contrasts = _contrast_matrix(n, trimmed)
        variances = np.einsum("ij,ij->i", contrasts @ omega_sub, contrasts)
        if np.min(variances) <= MIN_CONTRAST_VARIANCE:
            worst = int(np.argmin(variances))
            raise DegenerateCovarianceError(
                f"contrast variance for candidate at position {worst} is "
                f"{variances[worst]:.3e}, at or below {MIN_CONTRAST_VARIANCE:g}"
            )
        values.append(
            _step_critical_value(
                omega_sub,
                contrasts,
                variances,
                config.alpha,
                config.mc_samples,
                child_seed(config.seed, TAG_STEP, step),
            )
        )
        indices = indices[:-1]
    return tuple(values)
