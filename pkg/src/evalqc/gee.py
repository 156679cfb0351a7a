"""Generalized estimating equations for the evaluator-effect regression.

The mean model is linear with an identity link: each outcome element is
an evaluator effect plus covariate terms.  Estimation solves

    sum_i  X_i' V_i^{-1} (y_i - X_i theta) = 0

by alternating a generalized least squares update of theta with moment
re-estimation of the dispersion phi and the working-correlation
parameter nu, where V_i = phi * R_i(nu) for the chosen structure
(independent, exchangeable, or unstructured over element positions).

Two covariance estimates for the evaluator-effect block are produced:
the model-based form  phi * (sum_i X_i' R_i^{-1} X_i)^{-1}, valid when
the working structure is correct, and the sandwich form  A^{-1} B A^{-1}
with  B = sum_i X_i' R_i^{-1} e_i e_i' R_i^{-1} X_i,  which stays valid
under misspecification of R.

For the exchangeable and independent structures the weighted cross
products decompose as  a(r) * sum_i X_i'X_i + b(r) * sum_i (X_i'1)(X_i'1)'
with coefficients depending only on the cluster size r, so those pieces
are accumulated once and every iteration just recombines them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .data import DesignMatrix
from .errors import (
    ConvergenceError,
    DegenerateStructureError,
    IdentifiabilityError,
    InputError,
    NumericalError,
)

CORRELATION_KINDS = ("independent", "exchangeable", "unstructured")

_CLAMP_MARGIN = 1e-6


@dataclass(frozen=True, slots=True)
class GeeOptions:
    """Convergence settings: relative infinity-norm tolerance on theta and
    the iteration cap."""

    tol: float = 1e-8
    max_iter: int = 100

    def __post_init__(self) -> None:
        if not self.tol > 0:
            raise InputError(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise InputError(f"max_iter must be at least 1, got {self.max_iter}")


@dataclass(frozen=True)
class GeeFit:
    """Converged fit: coefficients, covariances, and diagnostics.

    ``omega_model`` and ``omega_sandwich`` are the evaluator-effect blocks
    of the corresponding full-coefficient covariances (``theta_cov_model``
    and ``theta_cov_sandwich`` hold the full matrices).  ``nu_hat`` is
    None for the independent structure, a scalar for exchangeable, and a
    position-by-position matrix for unstructured.
    """

    theta_hat: np.ndarray
    beta_hat: np.ndarray
    omega_model: np.ndarray
    omega_sandwich: np.ndarray
    theta_cov_model: np.ndarray
    theta_cov_sandwich: np.ndarray
    nu_hat: float | np.ndarray | None
    phi_hat: float
    iterations: int
    converged: bool
    correlation: str
    column_names: tuple[str, ...]
    evaluator_labels: tuple[str, ...]


class _Prepared:
    """Design repackaged in (cluster, unit position) order with the
    residual-independent cross products accumulated per cluster size."""

    def __init__(self, design: DesignMatrix, kind: str) -> None:
        x = np.asarray(design.matrix, dtype=float)
        y = np.asarray(design.outcome, dtype=float)
        cluster = np.asarray(design.cluster_index)
        unit = np.asarray(design.unit_index)
        order = np.lexsort((unit, cluster))
        self.row_order = order
        self.x = x[order]
        self.y = y[order]
        cluster = cluster[order]
        unit = unit[order]

        _, starts, sizes = np.unique(cluster, return_index=True, return_counts=True)
        self.starts = starts
        self.sizes = sizes
        self.n_clusters = sizes.size
        self.cluster_ordinal = np.repeat(np.arange(sizes.size), sizes)
        self.n, self.p = self.x.shape

        self.positions = np.unique(unit)
        position_of = {int(pos): i for i, pos in enumerate(self.positions)}
        self.unit_pos = np.array([position_of[int(v)] for v in unit])

        # Per-size accumulations for the affine (independent/exchangeable)
        # weighting; cluster sums are shared with the sandwich step.
        self.cluster_x_sums = np.add.reduceat(self.x, starts, axis=0)
        self.cluster_y_sums = np.add.reduceat(self.y, starts)
        self.size_groups = []
        for r in np.unique(sizes):
            cluster_sel = np.flatnonzero(sizes == r)
            row_sel = np.flatnonzero(np.isin(self.cluster_ordinal, cluster_sel))
            xr = self.x[row_sel]
            xc = self.cluster_x_sums[cluster_sel]
            self.size_groups.append(
                {
                    "r": int(r),
                    "cluster_sel": cluster_sel,
                    "s1": xr.T @ xr,
                    "s2": xc.T @ xc,
                    "v1": xr.T @ self.y[row_sel],
                    "v2": xc.T @ self.cluster_y_sums[cluster_sel],
                }
            )

        self.pattern_groups = None
        if kind == "unstructured":
            self.pattern_groups = self._build_pattern_groups()

    def _build_pattern_groups(self):
        groups: dict[tuple, list[int]] = {}
        for i in range(self.n_clusters):
            start = self.starts[i]
            pattern = tuple(self.unit_pos[start : start + self.sizes[i]])
            groups.setdefault(pattern, []).append(i)
        built = []
        for pattern, members in groups.items():
            members_arr = np.asarray(members)
            row_sel = np.flatnonzero(np.isin(self.cluster_ordinal, members_arr))
            r = len(pattern)
            built.append(
                {
                    "pattern": pattern,
                    "cluster_sel": members_arr,
                    "x3": self.x[row_sel].reshape(-1, r, self.p),
                    "y2": self.y[row_sel].reshape(-1, r),
                    "row_sel": row_sel,
                }
            )
        return built


def _exchangeable_weights(r: int, nu: float) -> tuple[float, float]:
    """Coefficients (a, b) with R^{-1} = a I + b J for the exchangeable
    structure of size r; nu = 0 recovers the independent weighting."""
    a = 1.0 / (1.0 - nu)
    b = -nu / ((1.0 - nu) * (1.0 + (r - 1) * nu))
    return a, b


def _pattern_inverse(nu_matrix: np.ndarray, pattern: tuple) -> np.ndarray:
    sub = nu_matrix[np.ix_(pattern, pattern)]
    try:
        return np.linalg.inv(sub)
    except np.linalg.LinAlgError:
        raise NumericalError(
            f"working correlation for unit pattern {pattern} is singular"
        ) from None


def _assemble(prep: _Prepared, kind: str, nu) -> tuple[np.ndarray, np.ndarray]:
    """Weighted normal equations: A = sum X'R^{-1}X, rhs = sum X'R^{-1}y."""
    a_mat = np.zeros((prep.p, prep.p))
    rhs = np.zeros(prep.p)
    if kind == "unstructured":
        for group in prep.pattern_groups:
            rinv = _pattern_inverse(nu, group["pattern"])
            w3 = np.matmul(rinv, group["x3"])
            flat_x = group["x3"].reshape(-1, prep.p)
            flat_w = w3.reshape(-1, prep.p)
            a_mat += flat_x.T @ flat_w
            rhs += np.einsum("gsp,gs->p", w3, group["y2"])
    else:
        scalar_nu = 0.0 if kind == "independent" else float(nu)
        for group in prep.size_groups:
            a, b = _exchangeable_weights(group["r"], scalar_nu)
            a_mat += a * group["s1"] + b * group["s2"]
            rhs += a * group["v1"] + b * group["v2"]
    return a_mat, rhs


def _butter(prep: _Prepared, kind: str, nu, residuals: np.ndarray) -> np.ndarray:
    """Score outer products: B = sum_i g_i g_i', g_i = X_i'R^{-1}e_i."""
    b_mat = np.zeros((prep.p, prep.p))
    if kind == "unstructured":
        for group in prep.pattern_groups:
            rinv = _pattern_inverse(nu, group["pattern"])
            e2 = residuals[group["row_sel"]].reshape(-1, len(group["pattern"]))
            w3 = np.matmul(rinv, group["x3"])
            g = np.einsum("gsp,gs->gp", w3, e2)
            b_mat += g.T @ g
    else:
        scalar_nu = 0.0 if kind == "independent" else float(nu)
        cross = np.add.reduceat(prep.x * residuals[:, None], prep.starts, axis=0)
        sums = np.add.reduceat(residuals, prep.starts)
        for group in prep.size_groups:
            a, b = _exchangeable_weights(group["r"], scalar_nu)
            sel = group["cluster_sel"]
            g = a * cross[sel] + b * prep.cluster_x_sums[sel] * sums[sel, None]
            b_mat += g.T @ g
    return b_mat


def estimate_dispersion(residuals: np.ndarray, p_dim: int) -> float:
    """Moment estimate of the residual variance with a p_dim correction."""
    residuals = np.asarray(residuals, dtype=float)
    denominator = residuals.size - p_dim
    if denominator <= 0:
        denominator = residuals.size
    return float(residuals @ residuals) / denominator


def estimate_correlation(
    residuals: np.ndarray,
    cluster_index: np.ndarray,
    unit_index: np.ndarray,
    kind: str,
    phi: float,
    p_dim: int = 0,
) -> float | np.ndarray | None:
    """Moment estimate of the working-correlation parameter.

    ``residuals`` are raw residuals aligned with cluster and unit index
    vectors.  Exchangeable returns the pooled pairwise moment

        nu = [sum_i sum_{p1<p2} e_ip1 e_ip2 / phi] / [sum_i r_i(r_i-1)/2 - p_dim]

    clamped into the valid range with a 1e-6 margin; unstructured returns
    the per-position-pair analog as a matrix; independent returns None.
    When the p_dim correction would make a denominator nonpositive the
    uncorrected count is used instead.
    """
    if kind not in CORRELATION_KINDS:
        raise InputError(f"correlation must be one of {CORRELATION_KINDS}, got {kind!r}")
    if kind == "independent":
        return None
    if not phi > 0:
        raise InputError(f"phi must be positive, got {phi}")
    residuals = np.asarray(residuals, dtype=float)
    cluster_index = np.asarray(cluster_index)
    _, cluster_ordinal = np.unique(cluster_index, return_inverse=True)
    sizes = np.bincount(cluster_ordinal)
    r_max = int(sizes.max())
    if r_max < 2:
        raise DegenerateStructureError(
            f"all clusters have a single element; the {kind} structure is "
            f"unidentifiable - use the independent working correlation"
        )

    if kind == "exchangeable":
        sums = np.bincount(cluster_ordinal, weights=residuals)
        squares = np.bincount(cluster_ordinal, weights=residuals**2)
        numerator = float(((sums**2 - squares) / 2.0).sum()) / phi
        pairs = float((sizes * (sizes - 1) / 2.0).sum())
        denominator = pairs - p_dim
        if denominator <= 0:
            denominator = pairs
        lo = -1.0 / (r_max - 1) + _CLAMP_MARGIN
        hi = 1.0 - _CLAMP_MARGIN
        return float(np.clip(numerator / denominator, lo, hi))

    positions, position_ordinal = np.unique(np.asarray(unit_index), return_inverse=True)
    n_pos = positions.size
    matrix = np.zeros((sizes.size, n_pos))
    mask = np.zeros((sizes.size, n_pos))
    matrix[cluster_ordinal, position_ordinal] = residuals
    mask[cluster_ordinal, position_ordinal] = 1.0
    cross = (matrix.T @ matrix) / phi
    counts = mask.T @ mask
    denominator = counts - p_dim
    denominator[denominator <= 0] = counts[denominator <= 0]
    with np.errstate(invalid="ignore", divide="ignore"):
        nu = np.where(counts > 0, cross / denominator, 0.0)
    np.fill_diagonal(nu, 1.0)
    nu = np.clip((nu + nu.T) / 2.0, -1.0 + _CLAMP_MARGIN, 1.0 - _CLAMP_MARGIN)
    np.fill_diagonal(nu, 1.0)
    # Pairwise moments need not form a positive-definite matrix; shrink
    # toward the identity (unit diagonal preserved) until they do.
    for _ in range(200):
        if np.linalg.eigvalsh(nu)[0] > 1e-8:
            break
        nu = 0.95 * nu + 0.05 * np.eye(n_pos)
    else:
        raise NumericalError("unstructured correlation could not be made positive definite")
    return nu


def _solve(a_mat: np.ndarray, rhs) -> np.ndarray:
    try:
        factor = scipy.linalg.cho_factor(a_mat)
    except (scipy.linalg.LinAlgError, np.linalg.LinAlgError):
        raise IdentifiabilityError(
            "information matrix is not positive definite; the design is "
            "numerically rank deficient under the working correlation"
        ) from None
    return scipy.linalg.cho_solve(factor, rhs)


def _beta_block(matrix: np.ndarray, m: int) -> np.ndarray:
    block = matrix[:m, :m]
    return (block + block.T) / 2.0


def _check_psd(matrix: np.ndarray, name: str) -> None:
    eigenvalues = np.linalg.eigvalsh(matrix)
    floor = -1e-10 * max(float(eigenvalues[-1]), 1e-300)
    if eigenvalues[0] < floor:
        raise NumericalError(f"{name} is not positive semidefinite within tolerance")


def _identity_nu(kind: str, prep: _Prepared):
    if kind == "exchangeable":
        return 0.0
    if kind == "unstructured":
        return np.eye(prep.positions.size)
    return None


def fit_gee(
    design: DesignMatrix,
    correlation: str = "independent",
    options: GeeOptions | None = None,
) -> GeeFit:
    """Fit the evaluator-effect regression under a working correlation.

    Starts from the ordinary least squares solution, then alternates
    moment updates of (phi, nu) with generalized least squares updates of
    theta until the relative infinity-norm change in theta drops below
    ``options.tol`` (default 1e-8) or ``options.max_iter`` iterations
    pass, in which case a convergence error carries the last change.
    """
    if correlation not in CORRELATION_KINDS:
        raise InputError(
            f"correlation must be one of {CORRELATION_KINDS}, got {correlation!r}"
        )
    options = options or GeeOptions()
    prep = _Prepared(design, correlation)
    if correlation != "independent" and int(prep.sizes.max()) < 2:
        raise DegenerateStructureError(
            f"all clusters have a single element; the {correlation} structure is "
            f"unidentifiable - use the independent working correlation"
        )

    a_mat, rhs = _assemble(prep, "independent", None)
    theta = _solve(a_mat, rhs)

    def moments(residuals: np.ndarray):
        phi = estimate_dispersion(residuals, prep.p)
        if phi <= 0.0:
            # Exact fit: no residual variation to estimate a correlation
            # from; fall back to the identity structure.
            return 0.0, _identity_nu(correlation, prep)
        nu = estimate_correlation(
            residuals,
            prep.cluster_ordinal,
            prep.unit_pos,
            correlation,
            phi,
            prep.p,
        )
        return phi, nu

    converged = False
    iterations = 0
    last_change = np.inf
    for iteration in range(1, options.max_iter + 1):
        residuals = prep.y - prep.x @ theta
        phi, nu = moments(residuals)
        a_mat, rhs = _assemble(prep, correlation, nu)
        theta_new = _solve(a_mat, rhs)
        scale = max(float(np.abs(theta_new).max()), 1e-300)
        last_change = float(np.abs(theta_new - theta).max()) / scale
        theta = theta_new
        iterations = iteration
        if last_change < options.tol:
            converged = True
            break
    if not converged:
        raise ConvergenceError(
            f"no convergence after {iterations} iterations; last relative "
            f"change in theta was {last_change:.3e}"
        )

    residuals = prep.y - prep.x @ theta
    phi, nu = moments(residuals)
    a_mat, _ = _assemble(prep, correlation, nu)
    butter = _butter(prep, correlation, nu, residuals)
    try:
        factor = scipy.linalg.cho_factor(a_mat)
    except (scipy.linalg.LinAlgError, np.linalg.LinAlgError):
        raise IdentifiabilityError(
            "information matrix is not positive definite at the solution"
        ) from None
    bread_inv = scipy.linalg.cho_solve(factor, np.eye(prep.p))
    cov_model = phi * bread_inv
    cov_model = (cov_model + cov_model.T) / 2.0
    cov_sandwich = bread_inv @ butter @ bread_inv
    cov_sandwich = (cov_sandwich + cov_sandwich.T) / 2.0

    m = len(design.evaluator_labels)
    omega_model = _beta_block(cov_model, m)
    omega_sandwich = _beta_block(cov_sandwich, m)
    _check_psd(omega_model, "model-based covariance")
    _check_psd(omega_sandwich, "sandwich covariance")

    return GeeFit(
        theta_hat=theta,
        beta_hat=theta[:m].copy(),
        omega_model=omega_model,
        omega_sandwich=omega_sandwich,
        theta_cov_model=cov_model,
        theta_cov_sandwich=cov_sandwich,
        nu_hat=nu,
        phi_hat=phi,
        iterations=iterations,
        converged=converged,
        correlation=correlation,
        column_names=design.column_names,
        evaluator_labels=design.evaluator_labels,
    )


def model_based_variance(
    design: DesignMatrix, correlation: str, nu, phi: float
) -> np.ndarray:
    """Evaluator-effect block of phi * (sum_i X_i' R_i^{-1} X_i)^{-1}."""
    if correlation not in CORRELATION_KINDS:
        raise InputError(f"correlation must be one of {CORRELATION_KINDS}, got {correlation!r}")
    prep = _Prepared(design, correlation)
    a_mat, _ = _assemble(prep, correlation, nu)
    try:
        factor = scipy.linalg.cho_factor(a_mat)
    except (scipy.linalg.LinAlgError, np.linalg.LinAlgError):
        raise NumericalError("information matrix is singular") from None
    cov = phi * scipy.linalg.cho_solve(factor, np.eye(prep.p))
    return _beta_block(cov, len(design.evaluator_labels))


def sandwich_variance(
    design: DesignMatrix, correlation: str, nu, residuals: np.ndarray
) -> np.ndarray:
    """Evaluator-effect block of A^{-1} B A^{-1} computed from raw
    residuals given in design-row order."""
    if correlation not in CORRELATION_KINDS:
        raise InputError(f"correlation must be one of {CORRELATION_KINDS}, got {correlation!r}")
    residuals = np.asarray(residuals, dtype=float)
    if residuals.shape != (design.n_rows,):
        raise InputError(
            f"residuals must have one entry per design row, got shape {residuals.shape}"
        )
    prep = _Prepared(design, correlation)
    a_mat, _ = _assemble(prep, correlation, nu)
    butter = _butter(prep, correlation, nu, residuals[prep.row_order])
    try:
        factor = scipy.linalg.cho_factor(a_mat)
    except (scipy.linalg.LinAlgError, np.linalg.LinAlgError):
        raise NumericalError("information matrix is singular") from None
    bread_inv = scipy.linalg.cho_solve(factor, np.eye(prep.p))
    cov = bread_inv @ butter @ bread_inv
    return _beta_block(cov, len(design.evaluator_labels))
