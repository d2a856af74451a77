from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar

from sdopt import data
from sdopt.dominance import verify_dominance
from sdopt.errors import InvalidInputError, UnsupportedOrderError
from sdopt.risk import (
    average_value_at_risk,
    critical_risk_levels,
    minimizer_curve,
    minimizers,
    risk_curve,
    risk_derivative,
    risk_measure,
    value_at_risk,
    verify_dominance_risk,
    write_risk_csv,
)
from sdopt.scenario import Order, PortfolioWeights, ScenarioVector, portfolio_returns

from conftest import vec

Q = [1.0, 2.0, 4.0]


def brute_risk(y: ScenarioVector, beta: float, q: float) -> float:
    """Independent oracle: bounded scalar minimization of the defining objective."""

    def f(t):
        return t + float(y.probabilities @ np.maximum(y.outcomes - t, 0.0) ** q) ** (1 / q) / (1 - beta)

    lo, hi = y.outcomes.min(), y.outcomes.max()
    span = hi - lo + 1.0
    res = minimize_scalar(f, bounds=(lo - 50 * span, hi), method="bounded", options={"xatol": 1e-12})
    cands = [res.x, *y.outcomes]
    return min(f(t) for t in cands)


def random_vector(rng, n=None):
    return ScenarioVector(rng.normal(size=n or int(rng.integers(1, 25))))


# ---------------------------------------------------------------- examples


@pytest.mark.parametrize("q", [1.0, 2.0, 5.0, math.inf])
def test_constant_variable(q):
    r = risk_measure(vec(3, 3, 3), 0.4, q)
    assert r.value == pytest.approx(3.0)
    assert risk_derivative(vec(3, 3), 0.7, q) == pytest.approx(0.0, abs=1e-9) if not math.isinf(q) else True


def test_avar_examples():
    r = risk_measure(vec(0, 10), 0.5)
    assert r.value == pytest.approx(10.0)
    assert value_at_risk(vec(0, 10), 0.5) == 0.0
    assert value_at_risk(vec(3, 1, 2), 0.9) == 3.0
    value, var = average_value_at_risk(vec(1, 2, 3, 4), 0.5)
    assert (value, var) == (pytest.approx(3.5), 2.0)


def test_avar_closed_form_matches_generic_minimizer():
    rng = np.random.default_rng(0)
    for _ in range(100):
        y = random_vector(rng)
        b = float(rng.uniform(0.01, 0.99))
        a = risk_measure(y, b, 1.0)
        g = risk_measure(y, b, 1.0, method="generic")
        assert g.value == pytest.approx(a.value, abs=1e-10)


@pytest.mark.parametrize("q", [1.0, 2.0, 3.0, 4.0])
def test_risk_matches_brute_force(q):
    rng = np.random.default_rng(int(q))
    for _ in range(40):
        y = random_vector(rng)
        b = float(rng.uniform(0.01, 0.99))
        assert risk_measure(y, b, q).value == pytest.approx(brute_risk(y, b, q), abs=1e-7)


def test_infinite_norm_is_esssup():
    assert risk_measure(vec(1, 5, 2), 0.3, math.inf).value == 5.0


def test_invalid_arguments():
    with pytest.raises(InvalidInputError):
        risk_measure(vec(1, 2), 1.0)
    with pytest.raises(InvalidInputError):
        risk_measure(vec(1, 2), 0.0)
    with pytest.raises(InvalidInputError):
        risk_measure(vec(1, 2), 0.5, 0.5)
    with pytest.raises(InvalidInputError):
        minimizer_curve(vec(1, 2), 2.0, [0.5, 0.2])
    with pytest.raises(InvalidInputError):
        critical_risk_levels(vec(1, 2), vec(1, 2), 2.0, scan_size=8)


def test_published_weights_give_published_risk(a5):
    # the table's own weights, evaluated here; the smallest level is off (see ledger)
    for beta, w, value in zip(data.TABLE2_BETAS[1:], data.TABLE2_WEIGHTS[1:], data.TABLE2_RISK[1:]):
        y = portfolio_returns(a5, w)
        assert risk_measure(-y, beta).value == pytest.approx(value, abs=5e-3)


@pytest.mark.xfail(strict=True, reason="published risk at beta=0.1 is not reproduced by its own weights")
def test_published_weights_give_published_risk_smallest_level(a5):
    y = portfolio_returns(a5, data.TABLE2_WEIGHTS[0])
    assert risk_measure(-y, 0.1).value == pytest.approx(data.TABLE2_RISK[0], abs=5e-3)


# ---------------------------------------------------------------- derivative


def test_derivative_two_point_q2():
    y = vec(0, 10)
    h = 1e-5
    fd = (risk_measure(y, 0.5 + h, 2).value - risk_measure(y, 0.5 - h, 2).value) / (2 * h)
    assert risk_derivative(y, 0.5, 2) == pytest.approx(fd, rel=1e-3, abs=1e-8)


def test_derivative_matches_finite_differences():
    rng = np.random.default_rng(1)
    done = 0
    while done < 100:
        y = random_vector(rng, int(rng.integers(3, 20)))
        q = float(rng.choice(Q))
        b = float(rng.uniform(0.05, 0.95))
        h = 1e-6
        t_lo = risk_measure(y, b - h, q).minimizer_t
        t_hi = risk_measure(y, b + h, q).minimizer_t
        if q == 1 and t_lo != t_hi:
            continue  # quantile jump inside the stencil
        fd = (risk_measure(y, b + h, q).value - risk_measure(y, b - h, q).value) / (2 * h)
        assert risk_derivative(y, b, q) == pytest.approx(fd, rel=1e-3, abs=1e-7)
        done += 1


@given(st.integers(0, 10_000), st.sampled_from(Q), st.floats(0.01, 0.99))
def test_derivative_nonnegative(seed, q, b):
    y = random_vector(np.random.default_rng(seed))
    assert risk_derivative(y, b, q) >= -1e-12


# ---------------------------------------------------------------- structure


def test_concavity_of_scaled_risk():
    rng = np.random.default_rng(2)
    for _ in range(100):
        y = random_vector(rng, int(rng.integers(2, 20)))
        q = float(rng.choice(Q))
        b0, b1 = sorted(rng.uniform(0.001, 0.999, size=2))
        bm = 0.5 * (b0 + b1)
        f = lambda b: (1 - b) * risk_measure(y, b, q).value  # noqa: E731
        assert f(bm) - 0.5 * (f(b0) + f(b1)) >= -1e-8


def test_minimizer_curve_monotone():
    rng = np.random.default_rng(3)
    betas = np.linspace(0.01, 0.99, 100)
    for q in Q:
        for _ in range(10):
            y = random_vector(rng, 15)
            t = np.array(minimizer_curve(y, q, betas))
            assert np.all(np.diff(t) >= -1e-8)


def test_minimizer_curve_q1_is_quantile_step():
    y = vec(4, 1, 3, 2)
    assert minimizer_curve(y, 1.0, [0.1, 0.3, 0.6, 0.9]) == [1.0, 2.0, 3.0, 4.0]
    assert set(minimizer_curve(vec(2, 2), 2.0, [0.2, 0.8])) == {2.0}


def test_vectorized_minimizers_agree():
    rng = np.random.default_rng(4)
    for q in (1.5, 2.0, 4.0):
        y = random_vector(rng, 17)
        betas = np.linspace(0.02, 0.98, 25)
        fast = minimizers(y, betas, q)
        slow = [risk_measure(y, b, q).minimizer_t for b in betas]
        np.testing.assert_allclose(fast, slow, atol=1e-9)


@given(st.integers(0, 10_000), st.sampled_from(Q), st.floats(0.01, 0.99))
def test_coherence_axioms(seed, q, b):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 20))
    x, y = rng.normal(size=n), rng.normal(size=n)
    X, Y = ScenarioVector(x), ScenarioVector(y)
    r = lambda v: risk_measure(v, b, q).value  # noqa: E731
    tol = 1e-9
    for lam in (0.5, 2.0, 10.0):
        assert r(X.scale(lam)) == pytest.approx(lam * r(X), abs=tol * max(1, lam * abs(r(X))) * 10)
    c = float(rng.normal() * 5)
    assert r(X.shift(c)) == pytest.approx(c + r(X), abs=tol * 10 * max(1.0, abs(c)))
    assert r(ScenarioVector(x + y)) <= r(X) + r(Y) + tol
    hi = ScenarioVector(x + np.abs(rng.normal(size=n)))
    assert r(X) <= r(hi) + tol


# ---------------------------------------------------------------- critical levels


def test_identical_pair_is_degenerate():
    v = vec(1, 2, 4)
    lv = critical_risk_levels(v, v, 2.0)
    assert lv.degenerate and lv.betas == () and lv.gammas == ()


def test_q1_crossings_sit_on_cdf_levels():
    rng = np.random.default_rng(5)
    for _ in range(20):
        x, y = random_vector(rng, 8), random_vector(rng, 8)
        lv = critical_risk_levels(x, y, 1.0)
        for b in lv.betas + lv.gammas:
            assert np.isclose(b * 8, round(b * 8), atol=1e-9)


def test_levels_interleave_and_match_dense_sweep():
    rng = np.random.default_rng(6)
    dense = np.linspace(1e-4, 1 - 1e-4, 10_000)
    for _ in range(5):
        x, y = random_vector(rng, 12), random_vector(rng, 12)
        lv = critical_risk_levels(x, y, 2.0)
        merged = sorted([(b, "b") for b in lv.betas] + [(g, "g") for g in lv.gammas])
        assert all(a[1] != b[1] for a, b in zip(merged, merged[1:]))
        d = minimizers(-x, dense, 2.0) - minimizers(-y, dense, 2.0)
        s = np.sign(np.where(np.abs(d) < 1e-12, 0.0, d))
        s = s[s != 0]
        assert len(merged) == int(np.sum(s[1:] != s[:-1]))


def test_mean_preserving_spread_has_one_crossing():
    # minimizers of {0, 2} and the constant 1 cross once, at 1 - 1/sqrt(2)
    lv = critical_risk_levels(vec(0, 2), vec(1, 1), 2.0)
    levels = lv.betas + lv.gammas
    assert len(levels) == 1
    assert levels[0] == pytest.approx(1 - 1 / math.sqrt(2), abs=1e-8)
    dense = np.linspace(1e-4, 1 - 1e-4, 10_000)
    d = minimizers(-vec(0, 2), dense, 2.0) - minimizers(-vec(1, 1), dense, 2.0)
    s = np.sign(d[np.abs(d) > 1e-12])
    assert int(np.sum(s[1:] != s[:-1])) == 1


# ---------------------------------------------------------------- verification


def test_risk_route_basics():
    v = vec(1, 2, 3)
    assert verify_dominance_risk(v, v, Order(3)).dominates
    with pytest.raises(UnsupportedOrderError):
        verify_dominance_risk(v, v, Order(1.5))
    with pytest.raises(UnsupportedOrderError):
        verify_dominance_risk(v, v, Order(math.inf))


@pytest.mark.parametrize("p", [2.0, 3.0])
def test_risk_route_agrees_with_norm_route(p):
    rng = np.random.default_rng(int(p))
    for _ in range(60):
        n = int(rng.integers(2, 20))
        x = rng.normal(size=n)
        y = x + np.abs(rng.normal(size=n)) * rng.random() if rng.random() < 0.5 else rng.normal(0.3, 0.8, size=n)
        X, Y = ScenarioVector(x), ScenarioVector(y)
        assert verify_dominance_risk(X, Y, Order(p)).dominates == verify_dominance(Y, X, Order(p)).dominates


def test_optimal_ssd_portfolio_passes_risk_route(a8, bench8):
    from sdopt.optimizer import ProblemSpec, solve

    rep = solve(ProblemSpec(a8, bench8, Order(2)))
    y = portfolio_returns(a8, rep.weights)
    assert verify_dominance_risk(bench8, y, Order(2)).dominates


def test_risk_curve_csv(tmp_path):
    evals = risk_curve(vec(0, 1, 5), 2.0, [0.1, 0.5, 0.9])
    path = tmp_path / "risk.csv"
    write_risk_csv(path, evals)
    rows = path.read_text().splitlines()
    assert rows[0] == "beta,R_beta,t_of_beta" and len(rows) == 4
    vals = [float(r.split(",")[1]) for r in rows[1:]]
    assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))
