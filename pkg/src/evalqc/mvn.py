"""Multivariate normal sampling and max-component tail quantiles.

The detector calibrates each step against the distribution of
``max_b |Z_b|`` where ``Z ~ N(0, S)`` and ``S`` is built from normalized
contrast rows.  Such an ``S`` is typically singular (the contrasts are
linearly dependent through the shared mean), so the sampler factorizes the
covariance with a symmetric eigendecomposition and clips slightly negative
eigenvalues at zero instead of insisting on a triangular factorization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, InputError
from .rng import TAG_BLOCK, generator, validate_seed

# Draws per sampling block inside max_abs_quantile.  Blocks use derived
# substreams, so the estimate depends on (seed, mc_samples, BLOCK_SIZE)
# but not on how blocks are scheduled.
BLOCK_SIZE = 65536

_SYMMETRY_RTOL = 1e-10
_EIGENVALUE_RTOL = 1e-8
MIN_MC_SAMPLES = 1000


def _covariance_factor(covariance: np.ndarray) -> np.ndarray:
    """Validate a covariance matrix and return F with F Fᵀ = covariance."""
    cov = np.asarray(covariance, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1] or cov.shape[0] == 0:
        raise InputError(f"covariance must be a nonempty square matrix, got shape {cov.shape}")
    if not np.all(np.isfinite(cov)):
        raise InputError("covariance contains non-finite entries")
    scale = float(np.abs(cov).max())
    asym = float(np.abs(cov - cov.T).max())
    if asym > _SYMMETRY_RTOL * max(scale, 1e-300):
        raise InputError(
            f"covariance fails the symmetry check: max |S - S^T| = {asym:.3e} "
            f"exceeds {_SYMMETRY_RTOL:g} relative"
        )
    eigenvalues, eigenvectors = np.linalg.eigh((cov + cov.T) / 2.0)
    floor = -_EIGENVALUE_RTOL * max(float(eigenvalues[-1]), 0.0) - 1e-300
    if eigenvalues[0] < floor:
        raise InputError(
            f"covariance fails the positive-semidefinite check: smallest eigenvalue "
            f"{eigenvalues[0]:.3e} is below {_EIGENVALUE_RTOL:g} relative"
        )
    return eigenvectors * np.sqrt(np.clip(eigenvalues, 0.0, None))


def sample_mvn(covariance: np.ndarray, n: int, seed: int) -> np.ndarray:
    """Draw ``n`` rows from N(0, covariance).

    Rank-deficient covariances are handled by clipping negative
    eigenvalues at zero.  A fixed seed reproduces the exact sample.
    """
    if n < 1:
        raise InputError(f"sample count must be positive, got {n}")
    factor = _covariance_factor(covariance)
    draws = generator(seed).standard_normal((int(n), factor.shape[0]))
    return draws @ factor.T


@dataclass(frozen=True, eq=False)
class MaxAbsQuantileRequest:
    """One quantile estimation task for max_b |Z_b|, Z ~ N(0, covariance)."""

    covariance: np.ndarray
    alpha: float
    mc_samples: int = 200_000
    seed: int = 0
    _factor: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ConfigurationError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.mc_samples < MIN_MC_SAMPLES:
            raise ConfigurationError(
                f"mc_samples below {MIN_MC_SAMPLES} makes the quantile too noisy, "
                f"got {self.mc_samples}"
            )
        validate_seed(self.seed)
        object.__setattr__(self, "_factor", _covariance_factor(self.covariance))


def _quantile_index(n: int, alpha: float) -> int:
    """1-based order-statistic index ceil((1-alpha)*n), guarded against
    the float product overshooting an exact integer by one ulp."""
    return min(n, max(1, math.ceil((1.0 - alpha) * n - 1e-9)))


def max_abs_quantile(request: MaxAbsQuantileRequest) -> float:
    """Empirical (1-alpha) quantile of max_b |Z_b| over mc_samples draws.

    Draws are produced in blocks of BLOCK_SIZE, each block from the
    substream ``(seed, TAG_BLOCK, block_index)``, so the result is
    deterministic given (seed, mc_samples, BLOCK_SIZE) regardless of
    block scheduling.
    """
    factor = request._factor
    d = factor.shape[0]
    maxima = np.empty(request.mc_samples)
    done = 0
    block = 0
    while done < request.mc_samples:
        take = min(BLOCK_SIZE, request.mc_samples - done)
        draws = generator(request.seed, TAG_BLOCK, block).standard_normal((take, d))
        np.abs(draws @ factor.T, out=draws)
        maxima[done : done + take] = draws.max(axis=1)
        done += take
        block += 1
    k = _quantile_index(request.mc_samples, request.alpha)
    return float(np.partition(maxima, k - 1)[k - 1])
