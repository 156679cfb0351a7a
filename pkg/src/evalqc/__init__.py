"""Outlier screening for evaluator panels.

Two stages: a clustered linear regression isolates per-evaluator effects
with model-based and sandwich covariances, then a stepwise
maximum-deviation test compares each remaining candidate against the
truncated mean of its peers, with Monte Carlo critical values sized to
the covariance of the contrasts.  A simulation harness measures the
procedure's calibration and power.
"""

from .data import (
    DesignMatrix,
    EvaluationDataset,
    ParticipantRecord,
    SchemaConfig,
    build_design,
    load_dataset,
    write_dataset,
)
from .detection import (
    DetectionConfig,
    DetectionResult,
    StepRecord,
    TrimSpec,
    contrast_vector,
    critical_values,
    detect_outliers,
    k_prime,
    mesd_step,
    truncated_mean,
)
from .errors import (
    ConfigurationError,
    ConvergenceError,
    DegenerateCovarianceError,
    DegenerateStructureError,
    EvalqcError,
    HarnessError,
    IdentifiabilityError,
    InputError,
    IntegrityError,
    NumericalError,
    ParseError,
    SchemaError,
)
from .gee import (
    GeeFit,
    GeeOptions,
    estimate_correlation,
    estimate_dispersion,
    fit_gee,
    model_based_variance,
    sandwich_variance,
)
from .mvn import MaxAbsQuantileRequest, max_abs_quantile, sample_mvn
from .simulation import (
    ReplicateRecord,
    SimulationMetrics,
    SimulationScenario,
    generate_multiple,
    generate_single,
    run_grid,
    run_replicates,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "ConvergenceError",
    "DegenerateCovarianceError",
    "DegenerateStructureError",
    "DesignMatrix",
    "DetectionConfig",
    "DetectionResult",
    "EvalqcError",
    "EvaluationDataset",
    "GeeFit",
    "GeeOptions",
    "HarnessError",
    "IdentifiabilityError",
    "InputError",
    "IntegrityError",
    "MaxAbsQuantileRequest",
    "NumericalError",
    "ParseError",
    "ParticipantRecord",
    "ReplicateRecord",
    "SchemaConfig",
    "SchemaError",
    "SimulationMetrics",
    "SimulationScenario",
    "StepRecord",
    "TrimSpec",
    "build_design",
    "contrast_vector",
    "critical_values",
    "detect_outliers",
    "estimate_correlation",
    "estimate_dispersion",
    "fit_gee",
    "generate_multiple",
    "generate_single",
    "k_prime",
    "load_dataset",
    "max_abs_quantile",
    "mesd_step",
    "model_based_variance",
    "run_grid",
    "run_replicates",
    "sample_mvn",
    "sandwich_variance",
    "truncated_mean",
    "write_dataset",
]
