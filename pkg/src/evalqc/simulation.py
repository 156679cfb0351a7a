"""Simulation harness: synthetic hearing-study generators and the
replicate loop that turns detection outcomes into calibration and power
metrics.

A scenario describes a panel of M evaluators, each testing a fixed block
of participants.  Outcomes follow a linear model in age, age squared,
and two self-reported-status indicators, shifted by the assigned
evaluator's effect.  Outlier evaluators are planted by giving the first
``n_significant`` evaluators the large effect and the next
``n_intermediate`` the intermediate one; assignment is exchangeable, so
the fixed rule is as good as any.

Replicate r draws all of its randomness from the substream derived from
(scenario.seed, r), and its detection run gets an independently derived
seed, so results do not depend on execution order or worker count.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import partial
from multiprocessing import get_context

import numpy as np

from .data import EvaluationDataset, ParticipantRecord, build_design
from .detection import DetectionConfig, detect_outliers
from .errors import ConfigurationError, EvalqcError, HarnessError, InputError
from .gee import fit_gee
from .rng import TAG_DETECTION, TAG_REPLICATE, child_seed, generator, validate_seed

MAX_FAILURE_FRACTION = 0.01

COVARIATE_NAMES = ("age", "age_squared", "very_good", "little_trouble")


@dataclass(frozen=True)
class SimulationScenario:
    """Complete description of one simulation cell.

    Defaults reproduce the base single-outcome null configuration:
    50 evaluators with 120 participants each, eta = (-2.73, 0.03, 0.03,
    3.32), ages N(56.56, 4.36^2), status prevalences 0.44 and 0.25 with
    the remainder in the reference category, and every evaluator at the
    common effect 66.95.
    """

    n_evaluators: int = 50
    participants_per_evaluator: int = 120
    outcome_arity: int = 1
    sigma: float = 6.0
    rho: float = 0.0
    eta: tuple[float, float, float, float] = (-2.73, 0.03, 0.03, 3.32)
    beta_normal: float = 66.95
    beta_intermediate: float = 70.10
    beta_significant: float = 75.10
    n_intermediate: int = 0
    n_significant: int = 0
    age_mean: float = 56.56
    age_sd: float = 4.36
    prevalence_very_good: float = 0.44
    prevalence_little_trouble: float = 0.25
    replicates: int = 1000
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_evaluators < 1:
            raise ConfigurationError(
                f"n_evaluators must be at least 1, got {self.n_evaluators}"
            )
        if self.participants_per_evaluator < 1:
            raise ConfigurationError(
                "participants_per_evaluator must be at least 1, got "
                f"{self.participants_per_evaluator}"
            )
        if self.outcome_arity not in (1, 2):
            raise ConfigurationError(
                f"outcome_arity must be 1 or 2, got {self.outcome_arity}"
            )
        if not self.sigma >= 0:
            raise ConfigurationError(f"sigma must be nonnegative, got {self.sigma}")
        if not -1.0 < self.rho < 1.0:
            raise ConfigurationError(f"rho must lie in (-1, 1), got {self.rho}")
        if len(self.eta) != 4 or not all(math.isfinite(v) for v in self.eta):
            raise ConfigurationError(f"eta must be 4 finite values, got {self.eta!r}")
        for name in ("beta_normal", "beta_intermediate", "beta_significant"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigurationError(f"{name} must be finite")
        if self.n_intermediate < 0 or self.n_significant < 0:
            raise ConfigurationError("outlier counts must be nonnegative")
        if self.n_intermediate + self.n_significant >= self.n_evaluators:
            raise ConfigurationError(
                f"n_intermediate + n_significant must be below n_evaluators, got "
                f"{self.n_intermediate} + {self.n_significant} with "
                f"{self.n_evaluators} evaluators"
            )
        if not math.isfinite(self.age_mean):
            raise ConfigurationError("age_mean must be finite")
        if not self.age_sd >= 0:
            raise ConfigurationError(f"age_sd must be nonnegative, got {self.age_sd}")
        p_vg, p_lt = self.prevalence_very_good, self.prevalence_little_trouble
        if p_vg < 0 or p_lt < 0 or p_vg + p_lt > 1.0:
            raise ConfigurationError(
                f"prevalences must be nonnegative and sum to at most 1, got "
                f"{p_vg} and {p_lt}"
            )
        if self.replicates < 1:
            raise ConfigurationError(f"replicates must be at least 1, got {self.replicates}")
        if not isinstance(self.detection, DetectionConfig):
            raise ConfigurationError("detection must be a DetectionConfig")
        validate_seed(self.seed)

    @property
    def n_participants(self) -> int:
        return self.n_evaluators * self.participants_per_evaluator

    def evaluator_labels(self) -> tuple[str, ...]:
        return tuple(str(j + 1) for j in range(self.n_evaluators))

    def true_effects(self) -> np.ndarray:
        effects = np.full(self.n_evaluators, self.beta_normal)
        effects[: self.n_significant] = self.beta_significant
        effects[self.n_significant : self.n_significant + self.n_intermediate] = (
            self.beta_intermediate
        )
        return effects

    def planted_outliers(self) -> tuple[str, ...]:
        return self.evaluator_labels()[: self.n_significant + self.n_intermediate]

    def to_dict(self) -> dict:
        return {
            "format_version": 1,
            "n_evaluators": self.n_evaluators,
            "participants_per_evaluator": self.participants_per_evaluator,
            "outcome_arity": self.outcome_arity,
            "sigma": self.sigma,
            "rho": self.rho,
            "eta": list(self.eta),
            "beta_normal": self.beta_normal,
            "beta_intermediate": self.beta_intermediate,
            "beta_significant": self.beta_significant,
            "n_intermediate": self.n_intermediate,
            "n_significant": self.n_significant,
            "age_mean": self.age_mean,
            "age_sd": self.age_sd,
            "prevalence_very_good": self.prevalence_very_good,
            "prevalence_little_trouble": self.prevalence_little_trouble,
            "replicates": self.replicates,
            "detection": self.detection.to_dict(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "SimulationScenario":
        if not isinstance(payload, dict):
            raise InputError(f"scenario must be a mapping, got {type(payload).__name__}")
        known = {
            "n_evaluators",
            "participants_per_evaluator",
            "outcome_arity",
            "sigma",
            "rho",
            "eta",
            "beta_normal",
            "beta_intermediate",
            "beta_significant",
            "n_intermediate",
            "n_significant",
            "age_mean",
            "age_sd",
            "prevalence_very_good",
            "prevalence_little_trouble",
            "replicates",
            "detection",
            "seed",
        }
        unknown = set(payload) - known - {"format_version"}
        if unknown:
            raise InputError(f"unknown scenario fields: {sorted(unknown)}")
        kwargs = {k: v for k, v in payload.items() if k in known}
        if "eta" in kwargs:
            eta = kwargs["eta"]
            if not isinstance(eta, (list, tuple)):
                raise InputError(f"eta must be a list of 4 numbers, got {eta!r}")
            kwargs["eta"] = tuple(float(v) for v in eta)
        if "detection" in kwargs:
            kwargs["detection"] = DetectionConfig.from_dict(kwargs["detection"])
        return cls(**kwargs)


@dataclass(frozen=True)
class ReplicateRecord:
    """Outcome of one replicate: what was detected and how it scored."""

    replicate: int
    k_prime: int
    detected: tuple[str, ...]
    n_true_positive: int
    n_false_positive: int
    tpr: float | None
    tnr: float

    def to_dict(self) -> dict:
        return {
            "replicate": self.replicate,
            "k_prime": self.k_prime,
            "detected": list(self.detected),
            "n_true_positive": self.n_true_positive,
            "n_false_positive": self.n_false_positive,
            "tpr": self.tpr,
            "tnr": self.tnr,
        }


@dataclass(frozen=True)
class SimulationMetrics:
    """Aggregated rates over completed replicates.

    ``type_i_rate`` is the fraction of replicates flagging at least one
    evaluator (its usual reading requires a null scenario).  ``tpr`` and
    ``tnr`` are per-replicate proportions averaged over replicates; tpr
    is None when the scenario plants no outliers.  Standard errors: the
    binomial formula for the type-I rate, the standard error of the mean
    for tpr/tnr.
    """

    scenario: SimulationScenario
    replicates_completed: int
    failures: tuple[tuple[int, str], ...]
    type_i_rate: float
    type_i_se: float
    tpr: float | None
    tpr_se: float | None
    tnr: float
    tnr_se: float
    records: tuple[ReplicateRecord, ...]

    def to_dict(self, include_records: bool = True) -> dict:
        payload = {
            "format_version": 1,
            "scenario": self.scenario.to_dict(),
            "replicates_completed": self.replicates_completed,
            "failures": [{"replicate": r, "message": m} for r, m in self.failures],
            "type_i_rate": self.type_i_rate,
            "type_i_se": self.type_i_se,
            "tpr": self.tpr,
            "tpr_se": self.tpr_se,
            "tnr": self.tnr,
            "tnr_se": self.tnr_se,
        }
        if include_records:
            payload["records"] = [record.to_dict() for record in self.records]
        return payload


def _draw_covariates(scenario: SimulationScenario, rng) -> tuple[np.ndarray, ...]:
    n = scenario.n_participants
    ages = rng.normal(scenario.age_mean, scenario.age_sd, n)
    status = rng.random(n)
    very_good = (status < scenario.prevalence_very_good).astype(float)
    little_trouble = (
        (status >= scenario.prevalence_very_good)
        & (status < scenario.prevalence_very_good + scenario.prevalence_little_trouble)
    ).astype(float)
    return ages, very_good, little_trouble


def _mean_response(scenario, ages, very_good, little_trouble) -> np.ndarray:
    eta1, eta2, eta3, eta4 = scenario.eta
    evaluator_of = np.repeat(
        np.arange(scenario.n_evaluators), scenario.participants_per_evaluator
    )
    return (
        eta1 * ages
        + eta2 * ages**2
        + eta3 * very_good
        + eta4 * little_trouble
        + scenario.true_effects()[evaluator_of]
    )


def _build_dataset(scenario, ages, very_good, little_trouble, outcomes) -> EvaluationDataset:
    labels = scenario.evaluator_labels()
    arity = outcomes.shape[1]
    unit_indices = tuple(range(arity))
    records = []
    for i in range(scenario.n_participants):
        records.append(
            ParticipantRecord(
                participant_id=f"p{i + 1:05d}",
                evaluator=labels[i // scenario.participants_per_evaluator],
                outcomes=tuple(float(v) for v in outcomes[i]),
                unit_indices=unit_indices,
                covariates=(
                    float(ages[i]),
                    # plain multiply, not pow: keeps the stored covariate
                    # bitwise equal to the value the mean response used
                    float(ages[i] * ages[i]),
                    float(very_good[i]),
                    float(little_trouble[i]),
                ),
            )
        )
    return EvaluationDataset(
        participants=tuple(records),
        evaluators=labels,
        covariate_names=COVARIATE_NAMES,
    )


def generate_single(scenario: SimulationScenario, replicate_seed: int = 0) -> EvaluationDataset:
    """Generate one single-outcome replicate.

    Draw order within the (scenario.seed, replicate_seed) substream is
    fixed: ages, then status uniforms, then outcome noise.
    """
    if scenario.outcome_arity != 1:
        raise InputError(
            f"generate_single requires outcome_arity 1, got {scenario.outcome_arity}"
        )
    rng = generator(scenario.seed, TAG_REPLICATE, replicate_seed)
    ages, very_good, little_trouble = _draw_covariates(scenario, rng)
    noise = rng.normal(0.0, scenario.sigma, scenario.n_participants)
    outcomes = (_mean_response(scenario, ages, very_good, little_trouble) + noise)[:, None]
    return _build_dataset(scenario, ages, very_good, little_trouble, outcomes)


def generate_multiple(scenario: SimulationScenario, replicate_seed: int = 0) -> EvaluationDataset:
    """Generate one bivariate replicate; the two outcomes share the
    participant's covariates and evaluator, with noise covariance
    sigma^2 [[1, rho], [rho, 1]]."""
    if scenario.outcome_arity != 2:
        raise InputError(
            f"generate_multiple requires outcome_arity 2, got {scenario.outcome_arity}"
        )
    rng = generator(scenario.seed, TAG_REPLICATE, replicate_seed)
    ages, very_good, little_trouble = _draw_covariates(scenario, rng)
    z = rng.standard_normal((scenario.n_participants, 2))
    factor = scenario.sigma * np.array(
        [[1.0, 0.0], [scenario.rho, math.sqrt(1.0 - scenario.rho**2)]]
    )
    noise = z @ factor.T
    mean = _mean_response(scenario, ages, very_good, little_trouble)
    return _build_dataset(scenario, ages, very_good, little_trouble, mean[:, None] + noise)


def generate(scenario: SimulationScenario, replicate_seed: int = 0) -> EvaluationDataset:
    if scenario.outcome_arity == 1:
        return generate_single(scenario, replicate_seed)
    return generate_multiple(scenario, replicate_seed)


def _run_one(scenario: SimulationScenario, replicate: int) -> ReplicateRecord:
    dataset = generate(scenario, replicate)
    design = build_design(dataset)
    correlation = "exchangeable" if scenario.outcome_arity == 2 else "independent"
    fit = fit_gee(design, correlation=correlation)
    omega = (
        fit.omega_sandwich
        if scenario.detection.variance_choice == "sandwich"
        else fit.omega_model
    )
    config = replace(
        scenario.detection,
        seed=child_seed(scenario.seed, TAG_DETECTION, replicate),
    )
    result = detect_outliers(fit.beta_hat, omega, list(fit.evaluator_labels), config)

    planted = set(scenario.planted_outliers())
    detected = set(result.detected)
    n_tp = len(detected & planted)
    n_fp = len(detected - planted)
    n_normal = scenario.n_evaluators - len(planted)
    tpr = n_tp / len(planted) if planted else None
    tnr = (n_normal - n_fp) / n_normal if n_normal else 1.0
    return ReplicateRecord(
        replicate=replicate,
        k_prime=result.k_prime,
        detected=tuple(result.detected),
        n_true_positive=n_tp,
        n_false_positive=n_fp,
        tpr=tpr,
        tnr=tnr,
    )


def _mean_and_se(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    mean = float(arr.mean())
    se = float(arr.std(ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else 0.0
    return mean, se


def run_replicates(scenario: SimulationScenario, threads: int = 1) -> SimulationMetrics:
    """Run the scenario's replicates and aggregate detection outcomes.

    Each replicate generates a dataset, fits the regression (exchangeable
    working correlation for bivariate outcomes, independent otherwise),
    and runs detection with the scenario's configuration under a
    replicate-specific seed.  Replicates that fail numerically are
    recorded and excluded; more than 1% failing aborts the run.
    Aggregation is a fold in replicate order regardless of thread count.
    """
    if threads < 1:
        raise ConfigurationError(f"threads must be at least 1, got {threads}")
    if scenario.replicates < 30:
        warnings.warn(
            f"{scenario.replicates} replicates give unstable rates and "
            f"standard errors",
            stacklevel=2,
        )

    records: list[ReplicateRecord] = []
    failures: list[tuple[int, str]] = []

    def absorb(replicate: int, outcome) -> None:
        if isinstance(outcome, ReplicateRecord):
            records.append(outcome)
        else:
            failures.append((replicate, str(outcome)))

    if threads == 1:
        for replicate in range(scenario.replicates):
            try:
                absorb(replicate, _run_one(scenario, replicate))
            except EvalqcError as exc:
                absorb(replicate, exc)
    else:
        worker = partial(_run_one_guarded, scenario)
        chunk = max(1, scenario.replicates // (threads * 8))
        with ProcessPoolExecutor(
            max_workers=threads, mp_context=get_context("spawn")
        ) as pool:
            for replicate, outcome in enumerate(
                pool.map(worker, range(scenario.replicates), chunksize=chunk)
            ):
                absorb(replicate, outcome)

    allowed = MAX_FAILURE_FRACTION * scenario.replicates
    if len(failures) > allowed:
        first = failures[0]
        raise HarnessError(
            f"{len(failures)} of {scenario.replicates} replicates failed "
            f"(more than {MAX_FAILURE_FRACTION:.0%}); first failure at "
            f"replicate {first[0]}: {first[1]}"
        )
    if not records:
        raise HarnessError("no replicate completed")

    detected_any = [1.0 if record.k_prime >= 1 else 0.0 for record in records]
    n = len(records)
    type_i_rate = float(np.mean(detected_any))
    type_i_se = math.sqrt(type_i_rate * (1.0 - type_i_rate) / n)

    if scenario.planted_outliers():
        tpr, tpr_se = _mean_and_se([record.tpr for record in records])
    else:
        tpr, tpr_se = None, None
    tnr, tnr_se = _mean_and_se([record.tnr for record in records])

    return SimulationMetrics(
        scenario=scenario,
        replicates_completed=n,
        failures=tuple(failures),
        type_i_rate=type_i_rate,
        type_i_se=type_i_se,
        tpr=tpr,
        tpr_se=tpr_se,
        tnr=tnr,
        tnr_se=tnr_se,
        records=tuple(records),
    )


def _run_one_guarded(scenario: SimulationScenario, replicate: int):
    """Worker wrapper: failures travel back as error messages so one bad
    replicate cannot take the pool down."""
    try:
        return _run_one(scenario, replicate)
    except EvalqcError as exc:
        return exc


def run_grid(
    scenario: SimulationScenario,
    sigmas: tuple[float, ...] | None = None,
    alphas: tuple[float, ...] | None = None,
    rhos: tuple[float, ...] | None = None,
    variances: tuple[str, ...] | None = None,
    threads: int = 1,
) -> list[tuple[dict, SimulationMetrics]]:
    """Cross the scenario with sigma, alpha, rho, and variance-choice
    values; each cell is the base scenario with those fields replaced.
    Returns (cell, metrics) pairs in deterministic grid order."""
    sigmas = sigmas or (scenario.sigma,)
    alphas = alphas or (scenario.detection.alpha,)
    rhos = rhos or (scenario.rho,)
    variances = variances or (scenario.detection.variance_choice,)
    results = []
    for variance in variances:
        for rho in rhos:
            for sigma in sigmas:
                for alpha in alphas:
                    detection = replace(
                        scenario.detection, alpha=alpha, variance_choice=variance
                    )
                    cell_scenario = replace(
                        scenario, sigma=sigma, rho=rho, detection=detection
                    )
                    cell = {
                        "sigma": sigma,
                        "alpha": alpha,
                        "rho": rho,
                        "variance": variance,
                    }
                    results.append((cell, run_replicates(cell_scenario, threads=threads)))
    return results
