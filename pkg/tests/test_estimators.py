import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tsdr.estimators import (
    bce_error,
    bias_bound,
    dr_risk,
    expected_dr,
    ipw_risk,
    naive_risk,
    risk_report,
    true_risk,
    variance_term,
)

seeds = st.integers(0, 2**31 - 1)


def _world(seed, shape=(3, 4)):
    r = np.random.default_rng(seed)
    return (
        r.uniform(0, 3, shape),
        r.uniform(0, 3, shape),
        r.uniform(0.05, 1, shape),
        r.uniform(0.05, 1, shape),
        r,
    )


def test_bce_examples():
    assert bce_error(1, 1 - 1e-7) == pytest.approx(1e-7, rel=1e-3)
    assert bce_error(1, 0.5) == pytest.approx(0.693147, abs=1e-6)
    assert bce_error(0, 0.5) == bce_error(1, 0.5)


def test_bce_finite_at_extremes():
    assert np.all(np.isfinite(bce_error([1, 0], [0.0, 1.0])))


def test_true_risk_examples():
    assert true_risk(np.zeros((2, 3))) == 0
    assert true_risk(np.full((2, 3), math.log(2))) == pytest.approx(math.log(2))
    e = np.random.default_rng(4).uniform(size=(3, 4))
    assert true_risk(e) == pytest.approx(sum(e.ravel()) / 12, abs=1e-15)


def test_true_risk_needs_full_grid():
    with pytest.raises(ValueError):
        true_risk([[1.0, np.nan]])


def test_naive_risk_examples():
    e = np.random.default_rng(5).uniform(size=(3, 4))
    assert naive_risk(e, np.ones_like(e)) == pytest.approx(true_risk(e))
    e2 = e.copy()
    e2[0, 0] = 0.0
    o = np.zeros_like(e)
    o[0, 0] = 1
    assert naive_risk(e2, o) == 0.0
    m = np.random.default_rng(6).integers(0, 2, e.shape)
    m[0, 0] = 1
    assert naive_risk(e, m) == pytest.approx(e[m == 1].mean(), abs=1e-15)


def test_naive_risk_needs_observation():
    with pytest.raises(ValueError):
        naive_risk(np.ones((2, 2)), np.zeros((2, 2)))


def test_dr_hand_case():
    e = np.ones((2, 2))
    o = np.array([[1, 0], [0, 1]])
    assert dr_risk(e, np.zeros((2, 2)), np.full((2, 2), 0.5), o) == pytest.approx(1.0, abs=1e-15)


def test_dr_perfect_imputation():
    e, _, _, p_hat, r = _world(1)
    o = r.integers(0, 2, e.shape)
    assert dr_risk(e, e, p_hat, o) == pytest.approx(true_risk(e), abs=1e-14)


def test_dr_fully_observed():
    e, e_hat, _, _, _ = _world(2)
    ones = np.ones_like(e)
    assert dr_risk(e, e_hat, ones, ones) == pytest.approx(true_risk(e), abs=1e-14)
    assert dr_risk(e, e_hat, ones, ones) == pytest.approx(naive_risk(e, ones), abs=1e-14)


def test_dr_rejects_propensity_below_floor():
    with pytest.raises(ValueError):
        dr_risk(np.ones((1, 2)), np.zeros((1, 2)), np.array([[0.01, 0.5]]), np.ones((1, 2)))


def test_dr_never_reads_unobserved_error():
    e = np.array([[1.0, np.nan]])
    o = np.array([[1, 0]])
    assert dr_risk(e, np.array([[0.5, 0.2]]), np.array([[0.5, 0.5]]), o) == pytest.approx((1.5 + 0.2) / 2)


def test_expected_dr_examples():
    e, e_hat, p, p_hat, _ = _world(3)
    assert expected_dr(e, e_hat, p, p) == pytest.approx(true_risk(e), abs=1e-14)
    assert expected_dr(e, e, p, p_hat) == pytest.approx(true_risk(e), abs=1e-14)


def test_expected_dr_monte_carlo():
    e, e_hat, p, p_hat, _ = _world(7)
    r = np.random.default_rng(70)
    o = (r.random((100_000,) + e.shape) < p).astype(float)
    draws = np.mean(e_hat + o / p_hat * (e - e_hat), axis=(1, 2))
    se = draws.std(ddof=1) / math.sqrt(draws.size)
    assert abs(draws.mean() - expected_dr(e, e_hat, p, p_hat)) < 3 * se


def test_bias_bound_zero_cases():
    d = np.random.default_rng(8).normal(size=(3, 3))
    assert bias_bound(np.zeros((3, 3)), d) == 0
    assert bias_bound(d, np.zeros((3, 3))) == 0


def test_variance_term_examples():
    delta = np.random.default_rng(9).normal(size=(2, 5))
    p_hat = np.full((2, 5), 0.4)
    assert variance_term(np.zeros((2, 5)), p_hat) == 0
    assert variance_term(2 * delta, p_hat) == pytest.approx(2 * variance_term(delta, p_hat), rel=1e-14)
    assert variance_term(np.full(4, 0.5), np.full(4, 0.5), 1, 2 / math.e) == pytest.approx(math.sqrt(1 / 8), abs=1e-15)


def test_variance_term_rejects_bad_eta():
    with pytest.raises(ValueError):
        variance_term(np.ones(2), np.ones(2), eta=1.0)


@given(seed=seeds, which=st.sampled_from(["propensity", "imputation"]))
def test_double_robustness(seed, which):
    e, e_hat, p, p_hat, _ = _world(seed, (4, 5))
    if which == "propensity":
        p_hat = p
    else:
        e_hat = e
    assert expected_dr(e, e_hat, p, p_hat) == pytest.approx(true_risk(e), abs=1e-12)


@given(seed=seeds)
def test_bias_within_bound(seed):
    e, e_hat, p, p_hat, _ = _world(seed, (5, 5))
    gap = abs(expected_dr(e, e_hat, p, p_hat) - true_risk(e))
    assert gap <= bias_bound(e - e_hat, 1 - p / p_hat) + 1e-12


@given(seed=seeds, n=st.integers(1, 10))
def test_exhaustive_average_equals_expectation(seed, n):
    e, e_hat, p, p_hat, _ = _world(seed, (n,))
    total = 0.0
    for bits in itertools.product((0, 1), repeat=n):
        o = np.array(bits, dtype=float)
        w = float(np.prod(np.where(o == 1, p, 1 - p)))
        total += w * dr_risk(e, e_hat, p_hat, o)
    assert total == pytest.approx(expected_dr(e, e_hat, p, p_hat), abs=1e-10)


@given(seed=seeds)
def test_zero_imputation_is_ipw(seed):
    e, _, _, p_hat, r = _world(seed)
    o = r.integers(0, 2, e.shape)
    assert dr_risk(e, np.zeros_like(e), p_hat, o) == pytest.approx(ipw_risk(e, p_hat, o), abs=1e-14)
    assert ipw_risk(e, p_hat, o) == pytest.approx(np.sum(o * e / p_hat) / e.size, abs=1e-14)


def test_risk_report_fields():
    e, e_hat, p, p_hat, r = _world(11)
    o = r.integers(0, 2, e.shape)
    o[0, 0] = 1
    rep = risk_report(e, o, e_hat, p_hat, p)
    assert rep.true_risk == pytest.approx(true_risk(e))
    assert rep.dr_risk == pytest.approx(dr_risk(e, e_hat, p_hat, o))
    assert rep.expected_dr == pytest.approx(expected_dr(e, e_hat, p, p_hat))
    assert rep.bias_bound == pytest.approx(bias_bound(e - e_hat, 1 - p / p_hat))
    assert rep.n_entries == 12 and rep.n_observed == int(o.sum())
    assert '"naive_risk"' in rep.to_json()


def test_risk_report_without_full_grid():
    e = np.array([[1.0, np.nan]])
    rep = risk_report(e, np.array([[1, 0]]), np.array([[0.5, 0.5]]), np.array([[0.5, 0.5]]))
    assert rep.true_risk is None and rep.bias_bound is None and rep.dr_risk is not None
