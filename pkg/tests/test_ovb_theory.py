import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import ovb_product_dense
from ovbkit.model_core import DomainError
from ovbkit.ovb_theory import (
    ENVELOPE_LABEL,
    OvbInputs,
    _t1,
    _t2,
    absence_of_ovb_check,
    asymptotic_sd,
    incoherence_phi,
    ovb_lower_bound,
    scaling_envelopes,
    sparsity_diagnostics,
    under_selection_certificate,
)

WORKED = dict(n=10000, p=4000, tau=0.5, phi=0.95, sigma_eta=1.0, sigma_v=1.0, a=1.0, b=1.0)


def test_certificate_worked_example():
    c = under_selection_certificate(np.r_[0.05, -0.03, 0.0], 1.0, 1.0, 0.95, 0.5, 10000, 4000)
    assert c.all_below
    assert c.thresholds[0] == pytest.approx(0.0525, abs=5e-4)
    assert c.prob_lower_bound == pytest.approx(1 - 4000**-0.5)
    assert round(c.prob_lower_bound, 4) == 0.9842
    assert c.joint_prob_lower_bound == pytest.approx(1 - 2 * 4000**-0.5)
    assert c.joint_prob_lower_bound >= 0.968


def test_certificate_small_s_over_n():
    c = under_selection_certificate(np.r_[0.5], 0.01, 1.0, 0.95, 0.5, 10000, 4000)
    assert c.thresholds[0] == pytest.approx(0.525, abs=5e-3)
    assert c.all_below


def test_certificate_detects_large_coefficient():
    base = under_selection_certificate(np.r_[0.0], 1.0, 1.0, 0.95, 0.5, 10000, 4000).thresholds[0]
    c = under_selection_certificate(np.r_[0.01, 10 * base], 1.0, 1.0, 0.95, 0.5, 10000, 4000)
    assert not c.all_below


def test_certificate_domain():
    with pytest.raises(DomainError):
        under_selection_certificate(np.r_[0.1], 1.0, 1.0, 1.5, 0.5, 100, 10)


@pytest.mark.parametrize("k,target", [(5, 0.52), (1, 0.12)])
def test_ovb_worked_ratios(k, target):
    b = ovb_lower_bound(OvbInputs(k=k, **WORKED))
    assert abs(b.ratio - target) <= 0.02
    assert b.sigma_alpha_tilde == pytest.approx(0.01)
    assert b.value == pytest.approx(b.T1_at_r * b.T2_at_r)
    assert 0 < b.r_star <= 1 and not b.vacuous


@pytest.mark.parametrize("k", [1, 5, 10])
def test_ovb_grid_matches_dense_oracle(k):
    inp = OvbInputs(k=k, **WORKED)
    dense, _ = ovb_product_dense(inp)
    assert ovb_lower_bound(inp).value == pytest.approx(dense, rel=1e-6)


def test_ovb_vanishes_with_a():
    vals = [ovb_lower_bound(OvbInputs(k=5, **{**WORKED, "a": a})).value for a in (1e-2, 1e-4, 1e-8)]
    assert vals[0] > vals[1] > vals[2] and vals[2] < 1e-9


def test_ovb_vacuous_flag():
    b = ovb_lower_bound(OvbInputs(n=100, p=10, k=5))
    assert b.vacuous and b.value == 0.0 and b.ratio == 0.0


def test_ovb_event_probability():
    inp = OvbInputs(k=5, **WORKED)
    b = ovb_lower_bound(inp)
    expected = 1 - 5 * math.exp(-1.5 * math.log(4000) / (4 * 0.95**2)) - 2 * 4000**-0.5
    assert b.event_prob_lower == pytest.approx(expected)


def test_inputs_validation():
    with pytest.raises(DomainError):
        OvbInputs(n=100, p=10, k=1, a=0.0)
    with pytest.raises(DomainError):
        OvbInputs(n=100, p=10, k=1, b=1.5)
    with pytest.raises(DomainError):
        OvbInputs(n=100, p=10, k=1, phi=0.0)
    with pytest.raises(DomainError):
        OvbInputs(n=100, p=10, k=1, tau=0.0)


inputs = st.builds(
    OvbInputs,
    n=st.integers(50, 10**6),
    p=st.integers(2, 10**5),
    k=st.integers(1, 20),
    tau=st.floats(0.05, 3),
    phi=st.floats(0.05, 1.0),
    sigma_eta=st.floats(0.1, 10),
    sigma_v=st.floats(0.1, 10),
    a=st.floats(0.01, 1.0),
    b=st.floats(0.01, 1.0),
)


@given(inputs, st.floats(0.001, 0.999), st.floats(0.001, 0.999))
def test_t1_nonincreasing_t2_nondecreasing(inp, r1, r2):
    lo, hi = min(r1, r2), max(r1, r2)
    assert _t1(inp, hi) <= _t1(inp, lo)
    assert _t2(inp, hi) >= _t2(inp, lo)


@given(inputs)
def test_bound_is_nonnegative_and_consistent(inp):
    b = ovb_lower_bound(inp, r_grid_size=256)
    assert b.value >= 0
    if not b.vacuous:
        assert b.value == pytest.approx(b.T1_at_r * b.T2_at_r, rel=1e-12, abs=1e-300)


def _multipliers(beta, gamma, s_over_n, sigma_eta, sigma_v, phi, tau, n, p):
    base = math.sqrt(2 * (1 + tau) * math.log(p) / n) / phi
    return beta * math.sqrt(s_over_n) / (sigma_eta * base), gamma * math.sqrt(s_over_n) / (sigma_v * base)


@given(st.floats(0.1, 10))
def test_rescaling_leaves_bound_unchanged(c):
    beta = gamma = 0.04
    a1, b1 = _multipliers(beta, gamma, 1.0, 1, 1, 0.95, 0.5, 10000, 4000)
    a2, b2 = _multipliers(beta / c, gamma / c, c**2, 1, 1, 0.95, 0.5, 10000, 4000)
    assert a1 == pytest.approx(a2, rel=1e-12) and b1 == pytest.approx(b2, rel=1e-12)
    v1 = ovb_lower_bound(OvbInputs(k=5, **{**WORKED, "a": a1, "b": b1}))
    v2 = ovb_lower_bound(OvbInputs(k=5, s_over_n=c**2, **{**WORKED, "a": a2, "b": b2}))
    assert v1.value == pytest.approx(v2.value, rel=1e-9)


def test_absence_check():
    assert absence_of_ovb_check(3.1, 1)
    assert absence_of_ovb_check(1, -3.5)
    assert not absence_of_ovb_check(1, 1)
    assert not absence_of_ovb_check(0.1, 0.1)


def test_sparsity_diagnostics():
    d = sparsity_diagnostics(10000, 4000, 5)
    assert d["klogp_over_sqrtn"] == pytest.approx(0.4147, abs=1e-4)
    assert sparsity_diagnostics(10000, 4000, 1)["klogp_over_sqrtn"] == pytest.approx(0.08294, abs=1e-5)
    assert sparsity_diagnostics(100, 50, 0) == {"klogp_over_n": 0.0, "klogp_over_sqrtn": 0.0}


def test_phi_orthogonal_blocks():
    rng = np.random.default_rng(0)
    Q, _ = np.linalg.qr(rng.standard_normal((30, 6)))
    assert incoherence_phi(Q, [0, 1]) == pytest.approx(1.0, abs=1e-12)


def test_phi_single_relevant_column_is_max_correlation():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((200, 8))
    X[:, 3] += 0.5 * X[:, 0]
    X -= X.mean(0)
    X /= np.sqrt((X**2).mean(0))
    corr = np.corrcoef(X, rowvar=False)[0, 1:]
    assert 1 - incoherence_phi(X, [0]) == pytest.approx(np.max(np.abs(corr)), abs=1e-12)


def test_phi_duplicate_column_is_zero():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((50, 4))
    X = np.column_stack([X, X[:, 1]])
    with pytest.warns(UserWarning):
        assert incoherence_phi(X, [0, 1]) == pytest.approx(0.0, abs=1e-12)


def test_phi_singular_block():
    X = np.ones((10, 3))
    with pytest.raises(DomainError):
        incoherence_phi(X, [0, 1])


def test_envelopes():
    lower = scaling_envelopes(10, 10**6, 100, 2.0, 1.0, 0.0, "lower_I", user_constant=3.0)
    assert lower["value"] == pytest.approx(3.0 * 2.0)
    assert lower["label"] == ENVELOPE_LABEL
    assert scaling_envelopes(100, 50, 1, 1, 1, 0.0, "lower_II")["value"] == 0.0
    # k log p / n = 2 exactly
    up = scaling_envelopes(1, math.e**2, 1, 1.0, 1.0, 0.0, "upper_I", r=0.5)
    assert up["klogp_over_n"] == pytest.approx(2.0)
    assert up["value"] == pytest.approx(1.0)
    ii = scaling_envelopes(1000, 100, 5, 1.0, 1.0, 4.0, "upper_II_ii", r=0.01)
    x = 5 * math.log(100) / 1000
    assert ii["value"] == pytest.approx(max(4.0 * x, x))
    with pytest.raises(ValueError):
        scaling_envelopes(10, 10, 1, 1, 1, 0, "middle")


def test_asymptotic_sd():
    assert asymptotic_sd(10000, 1, 1) == pytest.approx(0.01)
    assert asymptotic_sd(10000, 2, 1) == pytest.approx(0.02)
    assert asymptotic_sd(40000, 1, 1) == pytest.approx(0.005)
