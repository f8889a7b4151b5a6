import numpy as np
import pytest
from scipy import optimize

from reservelab import (
    ConvergenceError,
    DegenerateFitError,
    GlmSpec,
    SingularDesignError,
    cross_classified_design,
    fit_glm,
    index_sets,
    pearson_dispersion,
    psi_comparison,
)
from reservelab.glm import coefficient_covariance, poisson_loglik

from helpers import fit_pair


def macro_spec_from(triangle, family="poisson"):
    sets = index_sets(triangle)
    y = np.array([triangle.cell(i, j) for (i, j) in sets.observed])
    X = cross_classified_design(sets.observed, triangle.n_periods)
    return GlmSpec(y=y, X=X, family=family), sets


def test_saturated_single_row_recovers_mean():
    fit = fit_glm(GlmSpec(y=[7.0], X=[[1.0]]))
    assert fit.fitted[0] == pytest.approx(7.0, rel=1e-12)
    assert fit.converged


def test_macro_fit_balances_totals(uk_motor):
    spec, _ = macro_spec_from(uk_motor)
    fit = fit_glm(spec)
    # occurrence indicators sum to one per row, so fitted totals balance
    assert fit.fitted.sum() == pytest.approx(spec.y.sum(), rel=1e-10)
    score = spec.X.T @ (spec.y - fit.fitted)
    assert np.max(np.abs(score)) <= 1e-8 * spec.y.sum()


def test_irls_matches_direct_likelihood_optimizer(uk_motor):
    spec, _ = macro_spec_from(uk_motor)
    fit = fit_glm(spec)

    def negloglik(beta):
        mu = np.exp(spec.X @ beta)
        return -poisson_loglik(spec.y, mu)

    def grad(beta):
        mu = np.exp(spec.X @ beta)
        return -(spec.X.T @ (spec.y - mu))

    direct = optimize.minimize(
        negloglik, np.zeros(spec.n_params) + np.log(spec.y.mean()) * np.eye(spec.n_params)[0],
        jac=grad, method="BFGS", options={"gtol": 1e-3, "maxiter": 500},
    )
    # scale the gradient tolerance: responses are in the millions
    assert np.max(np.abs(fit.coef - direct.x)) < 1e-5


def test_micro_macro_coefficients_and_sums_match():
    rng = np.random.default_rng(211)
    for _ in range(25):
        macro, micro = fit_pair(rng)
        assert np.max(np.abs(macro.coef - micro.coef)) <= 1e-8
        assert micro.fitted.sum() == pytest.approx(macro.fitted.sum(), rel=1e-8)


def test_offset_split_of_triangle_matches_macro(uk_motor):
    spec, sets = macro_spec_from(uk_motor)
    macro = fit_glm(spec)
    rng = np.random.default_rng(5)
    rows_X, rows_y, rows_off = [], [], []
    for r, (i, j) in enumerate(sets.observed):
        n_g = int(rng.integers(1, 6))
        shares = rng.multinomial(int(spec.y[r]), np.ones(n_g) / n_g).astype(float)
        for share in shares:
            rows_X.append(spec.X[r])
            rows_y.append(share)
            rows_off.append(np.log(1.0 / n_g))
    micro = fit_glm(GlmSpec(y=rows_y, X=np.array(rows_X), offset=rows_off))
    assert np.max(np.abs(micro.coef - macro.coef)) <= 1e-8


def test_pearson_dispersion_zero_on_perfect_fit():
    fit = fit_glm(GlmSpec(y=[4.0, 4.0], X=[[1.0], [1.0]]))
    assert pearson_dispersion(fit) == pytest.approx(0.0, abs=1e-12)


def test_pearson_dispersion_unit_split_identical(uk_motor):
    spec, _ = macro_spec_from(uk_motor, family="quasipoisson")
    macro = fit_glm(spec)
    unit = fit_glm(
        GlmSpec(y=spec.y, X=spec.X, offset=np.zeros(spec.n_rows), family="quasipoisson")
    )
    assert pearson_dispersion(unit) == pytest.approx(pearson_dispersion(macro), rel=1e-12)


def test_pearson_dispersion_explicit_dof(uk_motor):
    spec, _ = macro_spec_from(uk_motor)
    fit = fit_glm(spec)
    full = pearson_dispersion(fit)
    assert pearson_dispersion(fit, p_effective=0) == pytest.approx(
        full * (spec.n_rows - spec.n_params) / spec.n_rows, rel=1e-12
    )
    with pytest.raises(ValueError):
        pearson_dispersion(fit, p_effective=spec.n_rows)


def test_covariance_intercept_only_fisher_information():
    fit = fit_glm(GlmSpec(y=[2.0, 4.0], X=[[1.0], [1.0]]))
    # Fisher information is the fitted total, 6
    assert fit.covariance[0, 0] == pytest.approx(1.0 / 6.0, rel=1e-10)

    quasi = fit_glm(GlmSpec(y=[2.0, 4.0], X=[[1.0], [1.0]], family="quasipoisson"))
    phi = ((2 - 3.0) ** 2 / 3.0 + (4 - 3.0) ** 2 / 3.0) / 1.0
    assert quasi.dispersion == pytest.approx(phi, rel=1e-10)
    assert quasi.covariance[0, 0] == pytest.approx(phi / 6.0, rel=1e-10)


def test_poisson_covariances_coincide_across_levels():
    rng = np.random.default_rng(212)
    for _ in range(25):
        macro, micro = fit_pair(rng)
        np.testing.assert_allclose(macro.covariance, micro.covariance, rtol=1e-6)


def test_quasi_dispersions_differ_across_levels(uk_motor):
    spec, sets = macro_spec_from(uk_motor, family="quasipoisson")
    macro = fit_glm(spec)
    for seed in range(10):
        rng = np.random.default_rng(seed)
        rows_X, rows_y, rows_off = [], [], []
        for r, _ in enumerate(sets.observed):
            n_g = int(rng.integers(2, 8))
            shares = np.floor(rng.dirichlet(np.ones(n_g)) * spec.y[r])
            for share in shares:
                rows_X.append(spec.X[r])
                rows_y.append(share)
                rows_off.append(np.log(1.0 / n_g))
        micro = fit_glm(
            GlmSpec(y=rows_y, X=np.array(rows_X), offset=rows_off, family="quasipoisson")
        )
        assert abs(micro.dispersion - macro.dispersion) > 0.0


def test_psi_verdict_equals_dispersion_comparison():
    rng = np.random.default_rng(213)
    for _ in range(50):
        macro, micro = fit_pair(rng, family="quasipoisson")
        psi = psi_comparison(micro, macro)
        assert psi.micro_leq_macro == (psi.phi_micro <= psi.phi_macro)
        assert psi.phi_micro == pytest.approx(micro.dispersion, rel=1e-12)
        assert psi.phi_macro == pytest.approx(macro.dispersion, rel=1e-12)


def test_deviance_trace_is_non_increasing():
    rng = np.random.default_rng(214)
    for _ in range(30):
        macro, micro = fit_pair(rng)
        for fit in (macro, micro):
            trace = np.array(fit.deviance_trace)
            assert np.all(np.diff(trace) <= 1e-12)


def test_coefficient_covariance_function_matches_fit(uk_motor):
    spec, _ = macro_spec_from(uk_motor, family="quasipoisson")
    fit = fit_glm(spec)
    np.testing.assert_allclose(coefficient_covariance(fit), fit.covariance, rtol=1e-12)


def test_covariance_is_symmetric_positive_semidefinite(uk_motor):
    spec, _ = macro_spec_from(uk_motor, family="quasipoisson")
    fit = fit_glm(spec)
    sym_gap = np.max(np.abs(fit.covariance - fit.covariance.T))
    assert sym_gap <= 1e-12 * np.max(np.abs(fit.covariance))
    eigenvalues = np.linalg.eigvalsh(0.5 * (fit.covariance + fit.covariance.T))
    assert eigenvalues.min() >= -1e-12 * eigenvalues.max()


def test_fit_predict_applies_link_and_offset():
    fit = fit_glm(GlmSpec(y=[2.0, 4.0], X=[[1.0], [1.0]]))
    np.testing.assert_allclose(fit.predict([[1.0]]), [3.0], rtol=1e-10)
    np.testing.assert_allclose(
        fit.predict([[1.0]], offset=[np.log(2.0)]), [6.0], rtol=1e-10
    )


def test_zero_response_rows_are_legal():
    fit = fit_glm(GlmSpec(y=[0.0, 3.0, 5.0], X=[[1.0], [1.0], [1.0]]))
    assert fit.fitted[0] == pytest.approx(8.0 / 3.0, rel=1e-10)


def test_all_zero_responses_rejected():
    with pytest.raises(DegenerateFitError):
        fit_glm(GlmSpec(y=[0.0, 0.0], X=[[1.0], [1.0]]))


def test_non_convergence_carries_last_iterate(uk_motor):
    spec, _ = macro_spec_from(uk_motor)
    with pytest.raises(ConvergenceError) as excinfo:
        fit_glm(spec, max_iter=1)
    assert excinfo.value.last_iterate is not None
    assert len(excinfo.value.last_iterate) == spec.n_params


def test_rank_deficiency_raises():
    X = np.array([[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]])
    with pytest.raises(SingularDesignError):
        fit_glm(GlmSpec(y=[1.0, 2.0, 3.0], X=X))
    # an all-zero column (unidentifiable factor level) is rank deficiency too
    X0 = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
    with pytest.raises(SingularDesignError):
        fit_glm(GlmSpec(y=[1.0, 2.0, 3.0], X=X0))


def test_spec_validation():
    with pytest.raises(ValueError, match="non-negative"):
        GlmSpec(y=[-1.0], X=[[1.0]])
    with pytest.raises(ValueError, match="offset"):
        GlmSpec(y=[1.0, 2.0], X=[[1.0], [1.0]], offset=[0.0])
    with pytest.raises(ValueError, match="family"):
        GlmSpec(y=[1.0], X=[[1.0]], family="gamma")
    with pytest.raises(ValueError, match="rows"):
        GlmSpec(y=[1.0], X=[[1.0, 0.0]])
    with pytest.raises(ValueError, match="finite"):
        GlmSpec(y=[1.0], X=[[1.0]], offset=[np.inf])


def test_cross_classified_design_layout():
    X = cross_classified_design([(1, 1), (2, 3)], n_periods=3)
    assert X.shape == (2, 5)
    np.testing.assert_array_equal(X[0], [1, 0, 0, 0, 0])
    np.testing.assert_array_equal(X[1], [0, 1, 0, 0, 1])
    with pytest.raises(ValueError):
        cross_classified_design([(4, 1)], n_periods=3)
    extra = cross_classified_design([(1, 1)], n_periods=2, extra=[0.7])
    np.testing.assert_array_equal(extra, [[1.0, 0.0, 0.0, 0.7]])
