import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import hck_dense, inverse_normal_cdf
from ovbkit.estimators import (
    DegenerateTreatmentError,
    InfeasibleError,
    confidence_interval,
    debiased_lasso,
    independent_columns,
    ols_fit,
    oracle_estimator,
    oracle_with_se,
    post_double_lasso,
)
from ovbkit.model_core import Dataset, DgpSpec, RngStream, demean, dgp_registry_lookup, generate_dataset
from ovbkit.reg_rules import RegularizationChoice, bickel_for_data, column_rms

BIG = 1e6


def _choice(lam, p, rule="bickel"):
    return RegularizationChoice(rule, lam, np.ones(p))


def _data(sigma_x=0.3, n=300, seed=0, name="main"):
    return demean(generate_dataset(dgp_registry_lookup(name, sigma_x, n=n), RngStream(seed)))


def _simple_ratio(d):
    return float(d.D @ d.Y / (d.D @ d.D))


def test_pdl_empty_selection_reduces_to_simple_regression():
    d = _data()
    fit = post_double_lasso(d, _choice(BIG, d.p), _choice(BIG, d.p))
    assert fit.I1.size == fit.I2.size == 0
    assert abs(fit.alpha_tilde - _simple_ratio(d)) <= 1e-10
    assert np.all(fit.beta_tilde == 0)


def test_pdl_with_true_support_matches_ols_on_support():
    d = _data(sigma_x=1.0)
    K = np.arange(5)
    fit = post_double_lasso(d, _choice(BIG, d.p), _choice(BIG, d.p), amelioration=K)
    A = np.column_stack([d.D, d.X[:, K]])
    coef, *_ = np.linalg.lstsq(A, d.Y, rcond=None)
    assert fit.alpha_tilde == pytest.approx(coef[0], abs=1e-10)
    np.testing.assert_allclose(fit.beta_tilde[K], coef[1:], atol=1e-10)
    assert np.all(fit.beta_tilde[5:] == 0)


@given(st.lists(st.integers(0, 199), min_size=0, max_size=30), st.integers(0, 1000))
def test_pdl_frisch_waugh(S, seed):
    d = _data(n=120, seed=seed)
    fit = post_double_lasso(d, _choice(BIG, d.p), _choice(BIG, d.p), amelioration=S)
    S = sorted(set(S))
    XS = d.X[:, S]
    if S:
        ry = d.Y - XS @ np.linalg.lstsq(XS, d.Y, rcond=None)[0]
        rd = d.D - XS @ np.linalg.lstsq(XS, d.D, rcond=None)[0]
    else:
        ry, rd = d.Y, d.D
    assert fit.alpha_tilde == pytest.approx(float(rd @ ry / (rd @ rd)), abs=1e-8)


def test_pdl_collinear_controls_pruned():
    d = _data(n=100)
    X = np.column_stack([d.X[:, :5], d.X[:, 0]])
    dd = Dataset(d.Y, d.D, X, demeaned=True)
    fit = post_double_lasso(dd, _choice(BIG, 6), _choice(BIG, 6), amelioration=range(6))
    assert fit.dropped_collinear.tolist() == [5]
    assert fit.singular_fallback_used


def test_pdl_infeasible_union():
    d = _data(n=30)
    with pytest.raises(InfeasibleError):
        post_double_lasso(d, _choice(BIG, d.p), _choice(BIG, d.p), amelioration=range(29))


def test_pdl_rescaling_invariance():
    d = _data(sigma_x=0.5, n=300, seed=4)
    scale = np.linspace(0.2, 5.0, d.p)
    ds = Dataset(d.Y, d.D, d.X * scale, demeaned=True)
    a = post_double_lasso(d, bickel_for_data(d.X, 1.0), bickel_for_data(d.X, 1.0))
    b = post_double_lasso(ds, bickel_for_data(ds.X, 1.0), bickel_for_data(ds.X, 1.0))
    np.testing.assert_array_equal(a.I1, b.I1)
    np.testing.assert_array_equal(a.I2, b.I2)
    assert a.alpha_tilde == pytest.approx(b.alpha_tilde, abs=1e-9)


def test_debiased_zero_fits_reduce_to_simple_regression():
    d = _data()
    fit = debiased_lasso(d, _choice(BIG, d.p + 1), _choice(BIG, d.p))
    assert fit.alpha_hat_initial == 0.0 and np.all(fit.gamma_hat == 0)
    assert abs(fit.alpha_tilde - _simple_ratio(d)) <= 1e-10
    assert fit.tau1_sq == pytest.approx(d.D @ d.D / d.n)


def test_debiased_no_penalty_is_ols():
    d = _data(n=200, seed=2)
    X = d.X[:, :20]
    dd = Dataset(d.Y, d.D, X, demeaned=True)
    fit = debiased_lasso(dd, _choice(0.0, 21), _choice(0.0, 20))
    coef, *_ = np.linalg.lstsq(np.column_stack([dd.D, X]), dd.Y, rcond=None)
    assert fit.alpha_tilde == pytest.approx(coef[0], abs=1e-8)


def test_debiased_degenerate_treatment():
    d = _data(n=50)
    dd = Dataset(d.Y, np.zeros(d.n), d.X, demeaned=True)
    with pytest.raises(DegenerateTreatmentError):
        debiased_lasso(dd, _choice(BIG, d.p + 1), _choice(BIG, d.p))


def test_debiased_loadings_length_checked():
    d = _data(n=50)
    with pytest.raises(ValueError):
        debiased_lasso(d, _choice(BIG, d.p), _choice(BIG, d.p))


def test_debiased_se_formula():
    d = _data(sigma_x=0.5, seed=3)
    Z = np.column_stack([d.D, d.X])
    c1 = RegularizationChoice("bickel", 0.05, column_rms(Z))
    c2 = bickel_for_data(d.X, 1.0)
    fit = debiased_lasso(d, c1, c2)
    u = d.Y - Z @ np.r_[fit.alpha_hat_initial, fit.beta_hat]
    omega = np.r_[1.0, -fit.gamma_hat] / fit.tau1_sq
    expected = np.sqrt(u @ u / d.n) * np.sqrt(omega @ (Z.T @ Z / d.n) @ omega / d.n)
    assert fit.se == pytest.approx(expected, rel=1e-10)


def _hand_dataset(n, seed=0):
    rng = np.random.default_rng(seed)
    D = rng.standard_normal(n)
    X = rng.standard_normal((n, 1))
    Y = 0.5 * D + X[:, 0] + rng.standard_normal(n) * (1 + np.abs(D))
    return Dataset(Y, D, X)


@pytest.mark.parametrize("n", [6, 8, 12])
def test_hck_matches_dense_solve(n):
    data = _hand_dataset(n)
    fit = ols_fit(data, "HCK")
    assert fit.variance_kind == "HCK" and not fit.singular_fallback_used
    A = np.column_stack([np.ones(n), data.D, data.X])
    s, _ = hck_dense(A, fit.residuals)
    np.testing.assert_allclose(fit.obs_variances, s, atol=1e-12)


def test_hck_singular_system_falls_back_to_hc3():
    # n = 5 with intercept, D and one control: M has rank 2, so M o M has rank <= 3 < 5
    data = _hand_dataset(5)
    A = np.column_stack([np.ones(5), data.D, data.X])
    M = np.eye(5) - A @ np.linalg.pinv(A)
    assert np.linalg.matrix_rank(M * M) < 5
    with pytest.warns(UserWarning, match="HC3"):
        fit = ols_fit(data, "HCK")
    assert fit.variance_kind == "HC3" and fit.singular_fallback_used


def test_hck_iterative_path_matches_dense():
    from ovbkit.estimators import _orthonormal_basis, hck_variances

    data = demean(_hand_dataset(60, seed=5))
    A = np.column_stack([np.ones(60), data.D, data.X])
    Q = _orthonormal_basis(A)
    e = ols_fit(data, "HC0").residuals
    dense, ok1 = hck_variances(Q, e)
    iterative, ok2 = hck_variances(Q, e, dense_max_n=10)
    assert ok1 and ok2
    np.testing.assert_allclose(iterative, dense, rtol=1e-7, atol=1e-10)


def test_hck_balanced_single_regressor_is_degrees_of_freedom_corrected_hc0():
    # D = +-1 balanced: (M o M) 1 = (1 - 2/n) 1 within each arm, so HCK = HC0 * n / (n - 2)
    n = 40
    D = np.tile([1.0, -1.0], n // 2)
    Y = np.random.default_rng(0).standard_normal(n)
    data = Dataset(Y, D, np.empty((n, 0)))
    hc0 = ols_fit(data, "HC0").alpha_se
    hck = ols_fit(data, "HCK").alpha_se
    assert hck**2 == pytest.approx(hc0**2 * n / (n - 2), rel=1e-8)


def test_ols_zero_noise_exact():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((30, 4))
    D = rng.standard_normal(30)
    Y = 1.5 * D + X @ np.r_[1.0, -2.0, 0.0, 0.5]
    for kind in ("HC0", "HC3", "HCK"):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fit = ols_fit(Dataset(Y, D, X), kind)
        assert fit.alpha == pytest.approx(1.5, abs=1e-12)
        np.testing.assert_allclose(fit.residuals, 0.0, atol=1e-12)
        assert fit.alpha_se == pytest.approx(0.0, abs=1e-10)


def test_ols_residuals_orthogonal():
    d = _data(n=300)
    fit = ols_fit(d, "HC0")
    Z = np.column_stack([d.D, d.X])
    scale = np.abs(Z).max() * np.abs(d.Y).max() * d.n
    assert np.max(np.abs(Z.T @ fit.residuals)) <= 1e-8 * scale


def test_ols_infeasible_when_p_exceeds_n():
    d = _data(n=150)
    with pytest.raises(InfeasibleError):
        ols_fit(d, "HCK")


def test_ols_duplicate_column_pruned():
    d = _data(n=80)
    X = np.column_stack([d.X[:, :10], d.X[:, 3]])
    fit = ols_fit(Dataset(d.Y, d.D, X, demeaned=True), "HC0")
    assert fit.singular_fallback_used
    assert fit.kept_columns.size == 11


def test_independent_columns_keeps_treatment():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(20)
    A = np.column_stack([x, 2 * x, rng.standard_normal(20)])
    assert independent_columns(A).tolist() == [0, 2]


def test_oracle_zero_noise():
    z = np.r_[np.ones(3), np.zeros(7)]
    spec = DgpSpec("custom", 50, 10, 3, 0.7, z, z)
    d = generate_dataset(spec, RngStream(0))
    # strip the noise from Y while keeping D's noise as the identifying variation
    clean = Dataset(d.D * 0.7 + d.X @ z, d.D, d.X, truth=d.truth)
    assert oracle_estimator(clean) == pytest.approx(0.7, abs=1e-12)


def test_oracle_needs_truth():
    with pytest.raises(ValueError):
        oracle_estimator(Dataset(np.zeros(3), np.ones(3), np.zeros((3, 1))))


@pytest.mark.parametrize("name,alpha", [("main", 0.0), ("A5", 1.0)])
def test_oracle_unbiased(name, alpha):
    reps = 400
    spec = dgp_registry_lookup(name, 0.3, n=500)
    est = np.array([oracle_estimator(generate_dataset(spec, RngStream(21, r))) for r in range(reps)])
    assert abs(est.mean() - alpha) <= 3 * est.std(ddof=1) / np.sqrt(reps)


def test_oracle_se_positive():
    a, se = oracle_with_se(_data())
    assert se > 0 and np.isfinite(a)


def test_confidence_interval_examples():
    lo, hi = confidence_interval(0.0, 1.0, 0.90)
    z = float(inverse_normal_cdf(0.95))
    assert hi == pytest.approx(z, abs=1e-12) and lo == pytest.approx(-z, abs=1e-12)
    assert round(hi, 4) == 1.6449
    assert confidence_interval(0.3, 0.0) == (0.3, 0.3)
    lo95, hi95 = confidence_interval(0.0, 1.0, 0.95)
    assert hi95 - lo95 > hi - lo
    with pytest.raises(ValueError):
        confidence_interval(0.0, -1.0)
