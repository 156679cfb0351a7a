import numpy as np
import pytest

from evalqc.data import DesignMatrix, build_design
from evalqc.errors import (
    ConvergenceError,
    DegenerateStructureError,
    IdentifiabilityError,
    InputError,
)
from evalqc.gee import (
    GeeOptions,
    estimate_correlation,
    estimate_dispersion,
    fit_gee,
    model_based_variance,
    sandwich_variance,
)
from evalqc.simulation import SimulationScenario, generate

OLS_TOL = 1e-8
EXACT_TOL = 1e-10


def make_design(x, y, cluster, unit=None, m=None):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    cluster = np.asarray(cluster)
    if unit is None:
        # within-cluster arrival order
        unit = np.concatenate([np.arange(c) for c in np.bincount(cluster)])
    if m is None:
        m = x.shape[1]
    labels = tuple(f"e{i + 1}" for i in range(m))
    names = tuple(f"evaluator={lab}" for lab in labels) + tuple(
        f"x{j}" for j in range(x.shape[1] - m)
    )
    return DesignMatrix(
        matrix=x,
        outcome=y,
        cluster_index=cluster,
        unit_index=np.asarray(unit),
        column_names=names,
        evaluator_labels=labels,
    )


def random_design(rng, n_clusters=40, r=2, m=4, q=2):
    """Indicator block plus q continuous covariates, r rows per cluster."""
    n = n_clusters * r
    cluster = np.repeat(np.arange(n_clusters), r)
    assignment = np.repeat(rng.integers(0, m, size=n_clusters), r)
    indicators = np.zeros((n, m))
    indicators[np.arange(n), assignment] = 1.0
    # force every evaluator at least one cluster
    for j in range(m):
        rows = slice(j * r, (j + 1) * r)
        indicators[rows] = 0.0
        indicators[rows, j] = 1.0
    covariates = rng.standard_normal((n, q))
    x = np.hstack([indicators, covariates])
    theta = rng.standard_normal(m + q)
    y = x @ theta + rng.standard_normal(n)
    return make_design(x, y, cluster, m=m)


def correlated_pairs(rng, n_clusters, rho, sigma=1.0):
    factor = sigma * np.array([[1.0, 0.0], [rho, np.sqrt(1.0 - rho * rho)]])
    return rng.standard_normal((n_clusters, 2)) @ factor.T


def dense_gls_oracle(design, nu, phi, kind):
    """Sum X_i' R_i^{-1} X_i and the matching rhs, built cluster by cluster
    with explicit inverses."""
    x = np.asarray(design.matrix, dtype=float)
    y = np.asarray(design.outcome, dtype=float)
    a = np.zeros((x.shape[1], x.shape[1]))
    rhs = np.zeros(x.shape[1])
    for c in np.unique(design.cluster_index):
        rows = np.flatnonzero(design.cluster_index == c)
        rows = rows[np.argsort(design.unit_index[rows])]
        r = rows.size
        if kind == "exchangeable":
            corr = (1.0 - nu) * np.eye(r) + nu * np.ones((r, r))
        elif kind == "unstructured":
            pos = design.unit_index[rows]
            corr = nu[np.ix_(pos, pos)]
        else:
            corr = np.eye(r)
        inv = np.linalg.inv(corr)
        xi = x[rows]
        a += xi.T @ inv @ xi
        rhs += xi.T @ inv @ y[rows]
    return a, rhs


# -------------------------------------------------------------- dispersion


def test_dispersion_hand_case():
    assert estimate_dispersion(np.array([1.0, -1.0, 2.0]), 1) == 3.0


def test_dispersion_falls_back_when_correction_exhausts_rows():
    assert estimate_dispersion(np.array([1.0, -1.0, 2.0]), 3) == 2.0


# -------------------------------------------------------------- correlation


def test_exchangeable_nu_hand_case():
    residuals = np.array([1.0, 2.0, -1.0, 1.0, 2.0])
    cluster = np.array([0, 0, 1, 1, 2])
    unit = np.array([0, 1, 0, 1, 0])
    nu = estimate_correlation(residuals, cluster, unit, "exchangeable", phi=1.0)
    # pairwise products 2 and -1 over two pairs
    assert nu == 0.5


def test_exchangeable_nu_clamps_perfect_correlation():
    residuals = np.array([1.0, 1.0])
    nu = estimate_correlation(residuals, [0, 0], [0, 1], "exchangeable", phi=0.1)
    assert nu == pytest.approx(1.0 - 1e-6)


def test_exchangeable_nu_clamps_anticorrelation():
    residuals = np.array([1.0, -1.0])
    nu = estimate_correlation(residuals, [0, 0], [0, 1], "exchangeable", phi=0.1)
    assert nu == pytest.approx(-1.0 + 1e-6)


def test_exchangeable_nu_recovers_generating_correlation():
    rng = np.random.default_rng(7)
    pairs = correlated_pairs(rng, 10000, rho=0.3)
    residuals = pairs.ravel()
    phi = estimate_dispersion(residuals, 0)
    cluster = np.repeat(np.arange(10000), 2)
    unit = np.tile([0, 1], 10000)
    nu = estimate_correlation(residuals, cluster, unit, "exchangeable", phi)
    assert nu == pytest.approx(0.3, abs=0.03)


def test_unstructured_nu_hand_case():
    residuals = np.array([1.0, 2.0, 2.0, 1.0])
    cluster = np.array([0, 0, 1, 1])
    unit = np.array([0, 1, 0, 1])
    nu = estimate_correlation(residuals, cluster, unit, "unstructured", phi=1.0)
    assert nu.shape == (2, 2)
    assert nu[0, 0] == nu[1, 1] == 1.0
    # raw moment (1*2 + 2*1) / 2 = 2 exceeds one, so it clips
    assert nu[0, 1] == pytest.approx(1.0 - 1e-6)


def test_unstructured_nu_recovers_generating_correlation():
    rng = np.random.default_rng(8)
    pairs = correlated_pairs(rng, 10000, rho=0.6)
    residuals = pairs.ravel()
    phi = estimate_dispersion(residuals, 0)
    cluster = np.repeat(np.arange(10000), 2)
    unit = np.tile([0, 1], 10000)
    nu = estimate_correlation(residuals, cluster, unit, "unstructured", phi)
    assert nu[0, 1] == pytest.approx(0.6, abs=0.03)


def test_independent_returns_none():
    assert estimate_correlation([1.0, 2.0], [0, 0], [0, 1], "independent", 1.0) is None


def test_correlation_rejects_singleton_clusters():
    with pytest.raises(DegenerateStructureError, match="single element"):
        estimate_correlation([1.0, 2.0], [0, 1], [0, 0], "exchangeable", 1.0)


def test_correlation_rejects_unknown_kind():
    with pytest.raises(InputError, match="correlation"):
        estimate_correlation([1.0, 2.0], [0, 0], [0, 1], "toeplitz", 1.0)


# ----------------------------------------------------------------- fitting


def test_single_evaluator_spec_of_means():
    design = make_design(np.ones((3, 1)), [1.0, 2.0, 3.0], [0, 1, 2])
    fit = fit_gee(design, "independent")
    assert fit.beta_hat[0] == pytest.approx(2.0, abs=1e-12)
    assert fit.phi_hat == pytest.approx(1.0, abs=1e-12)
    assert fit.omega_model[0, 0] == pytest.approx(1.0 / 3.0, abs=1e-12)
    assert fit.converged
    assert fit.nu_hat is None


def test_independent_fit_matches_least_squares():
    rng = np.random.default_rng(0)
    design = random_design(rng, n_clusters=60, m=5, q=3)
    fit = fit_gee(design, "independent")
    oracle, *_ = np.linalg.lstsq(design.matrix, design.outcome, rcond=None)
    assert np.max(np.abs(fit.theta_hat - oracle)) < OLS_TOL


def test_model_variance_matches_normal_equations_oracle():
    rng = np.random.default_rng(1)
    design = random_design(rng, n_clusters=50, m=4, q=2)
    fit = fit_gee(design, "independent")
    x = design.matrix
    residuals = design.outcome - x @ fit.theta_hat
    phi = residuals @ residuals / (x.shape[0] - x.shape[1])
    oracle = phi * np.linalg.inv(x.T @ x)
    assert np.allclose(fit.theta_cov_model, oracle, atol=EXACT_TOL)
    assert np.allclose(fit.omega_model, oracle[:4, :4], atol=EXACT_TOL)


def test_sandwich_matches_hc0_on_unit_clusters():
    rng = np.random.default_rng(2)
    design = random_design(rng, n_clusters=80, r=1, m=4, q=2)
    fit = fit_gee(design, "independent")
    x = design.matrix
    residuals = design.outcome - x @ fit.theta_hat
    bread = np.linalg.inv(x.T @ x)
    hc0 = bread @ (x.T * residuals**2) @ x @ bread
    assert np.allclose(fit.theta_cov_sandwich, hc0, atol=EXACT_TOL)
    assert np.allclose(fit.omega_sandwich, hc0[:4, :4], atol=EXACT_TOL)


def _indicator_pairs(m, per_evaluator):
    n_clusters = m * per_evaluator
    indicators = np.zeros((2 * n_clusters, m))
    indicators[np.arange(2 * n_clusters), np.repeat(np.arange(n_clusters) % m, 2)] = 1.0
    return indicators, np.repeat(np.arange(n_clusters), 2)


def test_model_variance_tracks_sampling_covariance_when_correct():
    # correctly specified exchangeable noise: the averaged model-based
    # covariance should track the sampling covariance of beta_hat
    rng = np.random.default_rng(21)
    indicators, cluster = _indicator_pairs(3, 30)
    beta = np.array([1.0, 2.0, 3.0])
    draws, covs = [], []
    for _ in range(1000):
        noise = correlated_pairs(rng, 90, rho=0.5, sigma=1.5)
        design = make_design(indicators, indicators @ beta + noise.ravel(), cluster, m=3)
        fit = fit_gee(design, "exchangeable")
        draws.append(fit.beta_hat)
        covs.append(fit.omega_model)
    empirical = np.cov(np.array(draws).T)
    average = np.mean(covs, axis=0)
    assert np.allclose(np.diag(average), np.diag(empirical), rtol=0.15)
    assert np.max(np.abs(average - empirical)) < 0.15 * np.max(np.diag(empirical))


def test_sandwich_tracks_sampling_covariance_under_misspecification():
    # truth rho=0.8 but the fit assumes independence: the sandwich stays
    # honest about Var(beta_hat) while the model-based form undershoots
    rng = np.random.default_rng(22)
    indicators, cluster = _indicator_pairs(3, 40)
    beta = np.array([1.0, 2.0, 3.0])
    draws, model_covs, sand_covs = [], [], []
    for _ in range(1000):
        noise = correlated_pairs(rng, 120, rho=0.8)
        design = make_design(indicators, indicators @ beta + noise.ravel(), cluster, m=3)
        fit = fit_gee(design, "independent")
        draws.append(fit.beta_hat)
        model_covs.append(fit.omega_model)
        sand_covs.append(fit.omega_sandwich)
    empirical = np.diag(np.cov(np.array(draws).T))
    assert np.allclose(np.diag(np.mean(sand_covs, axis=0)), empirical, rtol=0.15)
    assert np.all(np.diag(np.mean(model_covs, axis=0)) < 0.75 * empirical)


def test_sandwich_equals_model_on_exact_inputs():
    # when every squared residual equals the dispersion the meat reduces
    # to phi times the bread, so the two estimators coincide
    rng = np.random.default_rng(23)
    design = random_design(rng, n_clusters=70, r=1, m=4, q=2)
    phi = 0.7
    residuals = rng.choice([-1.0, 1.0], size=design.matrix.shape[0]) * np.sqrt(phi)
    model = model_based_variance(design, "independent", None, phi)
    sandwich = sandwich_variance(design, "independent", None, residuals)
    assert np.allclose(sandwich, model, atol=1e-12)


def test_exchangeable_solve_matches_dense_oracle():
    rng = np.random.default_rng(3)
    # ragged cluster sizes exercise every size group in the fast path
    sizes = rng.integers(1, 4, size=30)
    cluster = np.repeat(np.arange(30), sizes)
    n = cluster.size
    m = 3
    indicators = np.zeros((n, m))
    indicators[np.arange(n), np.repeat(np.arange(30) % m, sizes)] = 1.0
    x = np.hstack([indicators, rng.standard_normal((n, 2))])
    y = rng.standard_normal(n) + x @ rng.standard_normal(m + 2)
    design = make_design(x, y, cluster, m=m)
    fit = fit_gee(design, "exchangeable")

    a, rhs = dense_gls_oracle(design, fit.nu_hat, fit.phi_hat, "exchangeable")
    theta_oracle = np.linalg.solve(a, rhs)
    assert np.allclose(fit.theta_hat, theta_oracle, atol=EXACT_TOL)
    cov_oracle = fit.phi_hat * np.linalg.inv(a)
    assert np.allclose(fit.theta_cov_model, cov_oracle, atol=EXACT_TOL)


def test_unstructured_solve_matches_dense_oracle():
    rng = np.random.default_rng(4)
    design = random_design(rng, n_clusters=40, r=2, m=3, q=1)
    fit = fit_gee(design, "unstructured")
    a, rhs = dense_gls_oracle(design, fit.nu_hat, fit.phi_hat, "unstructured")
    theta_oracle = np.linalg.solve(a, rhs)
    assert np.allclose(fit.theta_hat, theta_oracle, atol=EXACT_TOL)


def test_unstructured_agrees_with_exchangeable_on_bivariate_data():
    rng = np.random.default_rng(5)
    n_clusters = 60
    noise = correlated_pairs(rng, n_clusters, rho=0.5)
    cluster = np.repeat(np.arange(n_clusters), 2)
    m = 3
    indicators = np.zeros((2 * n_clusters, m))
    indicators[np.arange(2 * n_clusters), np.repeat(np.arange(n_clusters) % m, 2)] = 1.0
    z = np.repeat(rng.standard_normal(n_clusters), 2)
    x = np.hstack([indicators, z[:, None]])
    y = x @ np.array([1.0, 2.0, 3.0, 0.5]) + noise.ravel()
    design = make_design(x, y, cluster, m=m)

    exch = fit_gee(design, "exchangeable")
    unst = fit_gee(design, "unstructured")
    # with exactly one position pair the two structures estimate the same
    # moment, so the fits coincide
    assert unst.nu_hat[0, 1] == pytest.approx(exch.nu_hat, rel=1e-9)
    assert np.allclose(unst.theta_hat, exch.theta_hat, rtol=1e-8, atol=1e-10)
    assert np.allclose(unst.omega_model, exch.omega_model, rtol=1e-8, atol=1e-10)


def test_balanced_bivariate_exchangeable_matches_least_squares():
    # when the two rows of every cluster share identical covariates the
    # generalized solve reduces to ordinary least squares exactly
    scenario = SimulationScenario(
        n_evaluators=5,
        participants_per_evaluator=20,
        outcome_arity=2,
        rho=0.6,
        replicates=1,
        seed=11,
    )
    design = build_design(generate(scenario, 0))
    fit = fit_gee(design, "exchangeable")
    oracle, *_ = np.linalg.lstsq(design.matrix, design.outcome, rcond=None)
    assert np.max(np.abs(fit.theta_hat - oracle)) < OLS_TOL
    assert fit.iterations == 1


def test_nonconvergence_reports_last_change():
    rng = np.random.default_rng(6)
    n_clusters = 50
    noise = correlated_pairs(rng, n_clusters, rho=0.7)
    cluster = np.repeat(np.arange(n_clusters), 2)
    z = rng.standard_normal(2 * n_clusters)  # varies within cluster
    x = np.hstack([np.ones((2 * n_clusters, 1)), z[:, None]])
    y = 2.0 + 1.5 * z + noise.ravel()
    design = make_design(x, y, cluster, m=1)
    with pytest.raises(ConvergenceError, match="relative"):
        fit_gee(design, "exchangeable", GeeOptions(max_iter=1))
    fit = fit_gee(design, "exchangeable")
    assert fit.converged
    assert fit.iterations > 1


def test_location_shift_moves_effects_only():
    rng = np.random.default_rng(9)
    design = random_design(rng, n_clusters=40, m=4, q=2)
    shifted = make_design(design.matrix, design.outcome + 37.5, design.cluster_index, m=4)
    base = fit_gee(design, "exchangeable")
    moved = fit_gee(shifted, "exchangeable")
    assert np.allclose(moved.beta_hat, base.beta_hat + 37.5, rtol=1e-8, atol=1e-8)
    assert np.allclose(moved.theta_hat[4:], base.theta_hat[4:], rtol=1e-8, atol=1e-8)
    assert np.allclose(moved.omega_model, base.omega_model, rtol=1e-8)
    assert np.allclose(moved.omega_sandwich, base.omega_sandwich, rtol=1e-8)
    assert moved.phi_hat == pytest.approx(base.phi_hat, rel=1e-8)


def test_exact_fit_yields_zero_covariances():
    cluster = np.repeat(np.arange(4), 2)
    indicators = np.zeros((8, 2))
    indicators[:4, 0] = 1.0
    indicators[4:, 1] = 1.0
    y = np.where(indicators[:, 0] == 1.0, 5.0, 7.0)
    design = make_design(indicators, y, cluster)
    fit = fit_gee(design, "exchangeable")
    assert fit.phi_hat == 0.0
    assert fit.nu_hat == 0.0
    assert np.array_equal(fit.beta_hat, [5.0, 7.0])
    assert np.all(fit.omega_model == 0.0)
    assert np.all(fit.omega_sandwich == 0.0)


def test_fit_is_invariant_to_row_permutation():
    rng = np.random.default_rng(10)
    design = random_design(rng, n_clusters=30, m=3, q=2)
    perm = rng.permutation(design.n_rows)
    shuffled = DesignMatrix(
        matrix=design.matrix[perm],
        outcome=design.outcome[perm],
        cluster_index=design.cluster_index[perm],
        unit_index=design.unit_index[perm],
        column_names=design.column_names,
        evaluator_labels=design.evaluator_labels,
    )
    a = fit_gee(design, "exchangeable")
    b = fit_gee(shuffled, "exchangeable")
    assert np.array_equal(a.theta_hat, b.theta_hat)
    assert np.array_equal(a.omega_model, b.omega_model)
    assert np.array_equal(a.omega_sandwich, b.omega_sandwich)


def test_fit_recovers_generating_parameters():
    scenario = SimulationScenario(
        outcome_arity=2, rho=0.5, sigma=6.0, replicates=1, seed=0
    )
    design = build_design(generate(scenario, 0))
    fit = fit_gee(design, "exchangeable")
    assert fit.nu_hat == pytest.approx(0.5, abs=0.05)
    age_col = design.column_names.index("age")
    se = np.sqrt(fit.theta_cov_model[age_col, age_col])
    assert abs(fit.theta_hat[age_col] - (-2.73)) < 3.0 * se


def test_variance_helpers_match_fit():
    scenario = SimulationScenario(
        n_evaluators=6,
        participants_per_evaluator=15,
        outcome_arity=2,
        rho=0.4,
        replicates=1,
        seed=2,
    )
    design = build_design(generate(scenario, 0))
    fit = fit_gee(design, "exchangeable")
    model = model_based_variance(design, "exchangeable", fit.nu_hat, fit.phi_hat)
    assert np.allclose(model, fit.omega_model, atol=1e-12)
    residuals = design.outcome - design.matrix @ fit.theta_hat
    sandwich = sandwich_variance(design, "exchangeable", fit.nu_hat, residuals)
    assert np.allclose(sandwich, fit.omega_sandwich, atol=1e-12)


def test_sandwich_rejects_wrong_residual_length():
    rng = np.random.default_rng(12)
    design = random_design(rng, n_clusters=10, m=2, q=1)
    with pytest.raises(InputError, match="per design row"):
        sandwich_variance(design, "independent", None, np.zeros(3))


def test_fit_rejects_singleton_clusters_for_paired_structures():
    design = make_design(np.ones((3, 1)), [1.0, 2.0, 3.0], [0, 1, 2])
    with pytest.raises(DegenerateStructureError):
        fit_gee(design, "exchangeable")
    with pytest.raises(DegenerateStructureError):
        fit_gee(design, "unstructured")


def test_fit_rejects_rank_deficient_design():
    x = np.ones((4, 2))
    design = make_design(x, [1.0, 2.0, 3.0, 4.0], [0, 0, 1, 1])
    with pytest.raises(IdentifiabilityError):
        fit_gee(design, "independent")


def test_fit_rejects_unknown_correlation():
    design = make_design(np.ones((3, 1)), [1.0, 2.0, 3.0], [0, 1, 2])
    with pytest.raises(InputError, match="correlation"):
        fit_gee(design, "ar1")


@pytest.mark.parametrize("tol,max_iter", [(0.0, 100), (-1e-8, 100), (1e-8, 0)])
def test_options_validation(tol, max_iter):
    with pytest.raises(InputError):
        GeeOptions(tol=tol, max_iter=max_iter)
