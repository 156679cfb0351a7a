"""Exception hierarchy shared across the package.

Errors are grouped by how a batch run should react, and each class carries
the process exit code the command line front end maps it to: bad input
data or schema (2), numerical trouble during estimation (3), bad
configuration (4).  ``kind`` is a stable machine-parsable tag printed on
stderr by the CLI.
"""

from __future__ import annotations

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERICAL = 3
EXIT_CONFIG = 4


class EvalqcError(Exception):
    """Base class for every error raised deliberately by this package."""

    kind = "error"
    exit_code = 1


class InputError(EvalqcError):
    """A caller-supplied value fails validation (bad matrix, bad path...)."""

    kind = "input-error"
    exit_code = EXIT_INPUT


class SchemaError(InputError):
    """The data file does not match the declared schema."""

    kind = "schema-error"


class ParseError(InputError):
    """A cell could not be parsed; message carries the file row number."""

    kind = "parse-error"


class IntegrityError(InputError):
    """Parsed data violates dataset invariants (conflicting rows etc.)."""

    kind = "integrity-error"


class NumericalError(EvalqcError):
    """Estimation failed for numerical reasons."""

    kind = "numerical-error"
    exit_code = EXIT_NUMERICAL


class IdentifiabilityError(NumericalError):
    """The design matrix is rank deficient."""

    kind = "identifiability-error"


class ConvergenceError(NumericalError):
    """The iterative fit did not converge within the iteration cap."""

    kind = "convergence-error"


class DegenerateStructureError(NumericalError):
    """A correlation structure cannot be estimated from the clusters."""

    kind = "degenerate-structure-error"


class DegenerateCovarianceError(NumericalError):
    """A contrast variance is too small for the statistic to be defined."""

    kind = "degenerate-covariance-error"


class HarnessError(NumericalError):
    """Too many replicate-level failures inside a simulation run."""

    kind = "harness-error"


class ConfigurationError(EvalqcError):
    """A configuration value is outside its documented domain."""

    kind = "configuration-error"
    exit_code = EXIT_CONFIG
