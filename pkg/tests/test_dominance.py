from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sdopt import data
from sdopt.dominance import (
    GapFunction,
    critical_test_points,
    gap,
    gap_curve,
    jump_test_points,
    verify_dense_grid,
    verify_dominance,
    write_gap_csv,
)
from sdopt.errors import InvalidInputError, UnsupportedOrderError
from sdopt.optimizer import ProblemSpec, solve
from sdopt.scenario import Order, PortfolioWeights, ScenarioVector, equal_weight_benchmark, portfolio_returns

from conftest import vec

ORDERS = [Order(1), Order(1.5), Order(2), Order(3), Order(5), Order(math.inf)]


def random_pair(rng, n=None):
    n = n or int(rng.integers(2, 30))
    x = rng.normal(size=n)
    if rng.random() < 0.5:
        y = x + np.abs(rng.normal(size=n)) * rng.random()
    else:
        y = rng.normal(0.3, 0.8, size=n)
    return ScenarioVector(y), ScenarioVector(x)


# ---------------------------------------------------------------- gap


def test_gap_examples():
    assert gap(2.0, vec(2, 4), vec(1, 5), 1) == pytest.approx(-0.5)
    v = vec(1, 3, 8)
    for t in (-3.0, 2.0, 9.0):
        assert gap(t, v, v, 2) == 0.0
    assert gap(-10.0, vec(1, 2), vec(0, 3), 2) == 0.0
    with pytest.raises(InvalidInputError):
        gap(0.0, v, v, -1)


@pytest.mark.parametrize("q", [2.0, 3.0])
def test_gap_derivative_identity(q):
    rng = np.random.default_rng(int(q))
    base, bench = ScenarioVector(rng.normal(size=12)), ScenarioVector(rng.normal(size=12))
    g = GapFunction(base, bench, Order(q + 1))
    kinks = np.concatenate([base.outcomes, bench.outcomes])
    h = 1e-6
    for t in np.linspace(-2.5, 2.5, 37):
        if np.min(np.abs(kinks - t)) < 1e-3:
            continue
        fd = (g(t + h) - g(t - h)) / (2 * h)
        exact = g.derivative(t)
        assert fd == pytest.approx(exact, rel=1e-5, abs=1e-9)


# ---------------------------------------------------------------- test points


def test_jump_points():
    assert jump_test_points(vec(1, 1, 3)) == [1.0, 3.0]
    assert jump_test_points(vec(2)) == [2.0]


def test_benchmark_of_8asset_table_has_22_jump_points(bench8):
    assert len(jump_test_points(bench8)) == 22


def test_critical_points_identical_and_disjoint():
    v = vec(1, 2, 5)
    # the derivative difference vanishes identically: one coincident run
    rep = verify_dominance(v, v, Order(3))
    assert rep.dominates and rep.coincident_intervals == 1
    assert all(g == 0.0 for _, g in rep.test_points)
    far = critical_test_points(vec(100, 101), vec(0, 1), Order(3))
    assert verify_dominance(vec(100, 101), vec(0, 1), Order(3)).dominates
    assert all(np.isfinite(far))


def test_critical_points_preconditions():
    v = vec(1, 2)
    with pytest.raises(UnsupportedOrderError):
        critical_test_points(v, v, Order(1))
    with pytest.raises(UnsupportedOrderError):
        critical_test_points(v, v, Order(math.inf))
    with pytest.raises(InvalidInputError):
        critical_test_points(v, v, Order(3), grid_size=1)


def test_critical_points_example_matches_oracle():
    base, bench = vec(2, 4), vec(1, 5)
    for p in (1.5, 2.5, 3.0):
        fast = verify_dominance(base, bench, Order(p))
        assert fast.dominates == verify_dense_grid(base, bench, Order(p)).dominates


# ---------------------------------------------------------------- verify


@pytest.mark.parametrize("order", ORDERS, ids=str)
def test_identical_inputs_dominate(order):
    v = vec(-1, 0.5, 2, 7)
    for rep in (verify_dominance(v, v, order), verify_dense_grid(v, v, order)):
        assert rep.dominates
        assert rep.worst_violation == 0.0


def test_report_shape_and_json():
    rep = verify_dominance(vec(4, 4), vec(0, 10), Order(2))
    assert not rep.dominates and rep.method == "jump-points"
    assert rep.worst_violation == pytest.approx(1.0)
    d = json.loads(rep.to_json())
    assert set(d) >= {"dominates", "method", "tolerance", "test_points", "worst_violation"}
    assert d["test_points"][0] == {"t": 0.0, "gap": 0.0}
    assert verify_dense_grid(vec(4, 4), vec(0, 10), Order(2)).dominates is False


def test_methods_dispatch():
    v, w = vec(1, 2), vec(0, 2)
    assert verify_dominance(v, w, Order(1)).method == "jump-points"
    assert verify_dominance(v, w, Order(2)).method == "jump-points"
    assert verify_dominance(v, w, Order(3)).method == "derivative-intersection"
    inf = verify_dominance(v, w, Order(math.inf))
    assert inf.method == "essinf" and inf.test_points == []
    with pytest.raises(InvalidInputError):
        verify_dominance(v, w, Order(3), tolerance=-1)
    with pytest.raises(InvalidInputError):
        verify_dense_grid(v, w, Order(3), grid_size=10)


def test_infinity_is_essinf_comparison():
    assert verify_dominance(vec(1, 9), vec(0, 100), Order(math.inf)).dominates
    assert not verify_dominance(vec(-1, 9), vec(0, 1), Order(math.inf)).dominates
    for seed in range(20):
        y, x = random_pair(np.random.default_rng(seed))
        assert verify_dense_grid(y, x, Order(math.inf)).dominates == (y.outcomes.min() >= x.outcomes.min())


def test_published_ssd_portfolio_dominates(a8, bench8):
    # published weights carry four decimals; allow the matching rounding error
    y = portfolio_returns(a8, PortfolioWeights.project(data.TABLE3_WEIGHTS))
    assert verify_dominance(y, bench8, Order(2), tolerance=1e-3).dominates


def test_optimal_ssd_portfolio_has_three_active_points(a8, bench8):
    rep = solve(ProblemSpec(a8, bench8, Order(2)))
    v = verify_dominance(portfolio_returns(a8, rep.weights), bench8, Order(2))
    assert v.dominates
    # several jump points are tight, three of them carry the optimum
    assert rep.active_constraints == 3
    tight = v.active_points(1e-7)
    assert all(np.min(np.abs(np.array(tight) - t)) < 1e-12 for t in rep.active_test_points)


def test_positive_bump_beyond_the_data_is_found():
    # the gap of this pair peaks above every outcome (t ~ 5.1, data end ~ 2.8)
    a5 = data.appendix_5asset().matrix
    bench = equal_weight_benchmark(a5)
    y = portfolio_returns(a5, np.array([0.025, 0.4512, 0.0, 0.0, 0.5238]))
    fast = verify_dominance(y, bench, Order(20))
    dense = verify_dense_grid(y, bench, Order(20))
    assert not fast.dominates and not dense.dominates
    t_worst = max(fast.test_points, key=lambda p: p[1])[0]
    assert 4.5 < t_worst < 6.0
    mpmath = pytest.importorskip("mpmath")
    mpmath.mp.dps = 50

    def norm_gap(t):
        def norm(v):
            s = mpmath.fsum(mpmath.mpf(p) * mpmath.mpf(max(0.0, t - o)) ** 19 for o, p in zip(v.outcomes, v.probabilities))
            return s ** (mpmath.mpf(1) / 19)

        return float(norm(y) - norm(bench))

    assert fast.worst_violation == pytest.approx(norm_gap(t_worst), abs=1e-12)
    assert norm_gap(t_worst - 0.01) < fast.worst_violation > norm_gap(t_worst + 0.01)


def test_coincident_derivative_intervals_are_flagged():
    # identical lower tails: the derivative difference vanishes on an interval
    base, bench = vec(0, 1, 5), vec(0, 1, 3)
    rep = verify_dominance(base, bench, Order(3))
    assert rep.coincident_intervals >= 1
    assert rep.dominates == verify_dense_grid(base, bench, Order(3)).dominates


# ---------------------------------------------------------------- properties


@pytest.mark.parametrize("p", [1.5, 2.0, 3.0, 7.5])
def test_fast_matches_dense_on_random_pairs(p):
    rng = np.random.default_rng(int(10 * p))
    for _ in range(50):
        y, x = random_pair(rng, 20)
        assert verify_dominance(y, x, Order(p)).dominates == verify_dense_grid(y, x, Order(p), 20_000).dominates


@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_translation_invariance(seed, c):
    y, x = random_pair(np.random.default_rng(seed))
    for order in (Order(2), Order(3), Order(math.inf)):
        a = verify_dominance(y, x, order).dominates
        b = verify_dominance(y.shift(c), x.shift(c), order).dominates
        assert a == b


def test_order_nesting():
    rng = np.random.default_rng(11)
    ladder = [Order(1), Order(1.5), Order(2), Order(3), Order(5), Order(math.inf)]
    held = 0
    for _ in range(60):
        y, x = random_pair(rng)
        verdicts = [verify_dominance(y, x, o).dominates for o in ladder]
        first = verdicts.index(True) if True in verdicts else len(verdicts)
        assert all(verdicts[first:]), verdicts
        held += verdicts[0]
    assert held > 0


def test_transitivity():
    rng = np.random.default_rng(7)
    checked = 0
    for _ in range(80):
        z = rng.normal(size=15)
        y = z + np.abs(rng.normal(size=15)) * 0.3 * rng.random() - 0.1 * rng.random()
        x = y + np.abs(rng.normal(size=15)) * 0.3 * rng.random() - 0.1 * rng.random()
        X, Y, Z = (ScenarioVector(v) for v in (x, y, z))
        for o in (Order(2), Order(3)):
            if verify_dominance(X, Y, o).dominates and verify_dominance(Y, Z, o).dominates:
                checked += 1
                assert verify_dominance(X, Z, o, tolerance=1e-8).dominates
    assert checked > 5


# ---------------------------------------------------------------- export


def test_gap_curve_csv(tmp_path):
    t, g = gap_curve(vec(1, 2, 3), vec(0, 2, 4), Order(2), grid_size=50)
    assert t.size == g.size == 50
    path = tmp_path / "gap.csv"
    write_gap_csv(path, t, g)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,gap" and len(lines) == 51
    t_inf, g_inf = gap_curve(vec(1, 2), vec(0, 2), Order(math.inf), grid_size=5)
    assert np.all(g_inf <= 0)


def test_rounding_level_differences_are_not_violations(a8, bench8):
    # the equal-weight portfolio equals the benchmark only up to rounding
    from sdopt.dominance import snap_to_benchmark

    y = portfolio_returns(a8, np.full(a8.d, 1 / a8.d))
    assert np.max(np.abs(y.outcomes - bench8.outcomes)) < 1e-13
    np.testing.assert_array_equal(snap_to_benchmark(y, bench8).outcomes, bench8.outcomes)
    for o in ("1", "1.5", "1.25", "3", "inf"):
        assert verify_dominance(y, bench8, Order.parse(o), tolerance=0.0).dominates
        assert verify_dense_grid(y, bench8, Order.parse(o), 2000).dominates
    # genuine differences are left alone
    z = ScenarioVector(bench8.outcomes + 1e-9)
    assert snap_to_benchmark(z, bench8) is z
