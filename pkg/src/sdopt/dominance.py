"""Deciding ``benchmark <= base`` in p-th stochastic order.

Three exact routes share one report type:

* order 1 and 2 (exponents 0 and 1): the gap is piecewise constant or
  piecewise linear, so it is enough to test the CDF jump locations;
* finite order otherwise: the norm gap can only peak where the derivatives
  of the two partial-moment norms cross, so those crossings are located by
  scan-and-bisect and tested;
* order infinity: compare essential infima.

``verify_dense_grid`` is a brute-force oracle over a fine uniform grid.

All finite-order routes test the whole real line: the benchmark range, the
region up to the largest outcome of either variable, a geometric tail, and
the ``t -> inf`` limit of the norm gap, which equals the mean difference.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from sdopt.errors import InvalidInputError, UnsupportedOrderError
from sdopt.scenario import (
    Order,
    ScenarioVector,
    essinf,
    esssup,
    norm_derivative_values,
    norm_values,
    upm_values,
)

DEFAULT_TOLERANCE = 1e-9
DEFAULT_SCAN = 4096
DENSE_GRID = 100_000
# outcomes within this many ulps (of the data magnitude) of a benchmark outcome are equal
SNAP_ULPS = 64
MARGIN = 0.01
TAIL_OCTAVES = 40
TAIL_PER_OCTAVE = 8
DENSE_TAIL_PER_OCTAVE = 256
GRID_REPORT_POINTS = 32

METHODS = ("derivative-intersection", "jump-points", "essinf", "dense-grid")


@dataclass(frozen=True)
class GapFunction:
    """``g(t) = E(t - base)_+^q - E(t - benchmark)_+^q`` with ``q = p - 1``.

    ``g <= 0`` everywhere is dominance of ``base`` over ``benchmark``.
    """

    base: ScenarioVector
    benchmark: ScenarioVector
    order: Order

    @property
    def exponent(self) -> float:
        return self.order.norm_exponent()

    def evaluate(self, t: float | np.ndarray, q: float | None = None) -> float | np.ndarray:
        q = self.exponent if q is None else q
        t = np.asarray(t, dtype=float)
        out = upm_values(self.base.outcomes, self.base.probabilities, t, q) - upm_values(
            self.benchmark.outcomes, self.benchmark.probabilities, t, q
        )
        return out.item() if out.ndim == 0 else out

    __call__ = evaluate

    def derivative(self, t: float | np.ndarray) -> float | np.ndarray:
        """``dg/dt = q * g_{q-1}(t)``; exact away from outcome kinks."""
        q = self.exponent
        if q == 0:
            return 0.0 * np.asarray(t, dtype=float)
        return q * np.asarray(self.evaluate(t, q - 1.0))


@dataclass
class VerificationReport:
    dominates: bool
    method: str
    tolerance: float
    test_points: list[tuple[float, float]] = field(default_factory=list)
    worst_violation: float = 0.0
    limit_gap: float | None = None
    coincident_intervals: int = 0
    order: str = ""

    def to_dict(self) -> dict:
        out = {
            "dominates": bool(self.dominates),
            "method": self.method,
            "order": self.order,
            "tolerance": self.tolerance,
            "test_points": [{"t": float(t), "gap": float(g)} for t, g in self.test_points],
            "worst_violation": float(self.worst_violation),
        }
        if self.limit_gap is not None:
            out["limit_gap"] = float(self.limit_gap)
        if self.coincident_intervals:
            out["coincident_intervals"] = self.coincident_intervals
        return out

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def active_points(self, atol: float = 1e-6) -> list[float]:
        """Test points where the gap is (numerically) zero."""
        return [t for t, g in self.test_points if abs(g) <= atol]


def gap(t: float, base: ScenarioVector, benchmark: ScenarioVector, q: float) -> float:
    """``E(t - base)_+^q - E(t - benchmark)_+^q``."""
    if not (q >= 0) or math.isinf(q):
        raise InvalidInputError(f"gap exponent must be finite and >= 0, got {q!r}")
    if not math.isfinite(t):
        raise InvalidInputError("t must be finite")
    return float(
        upm_values(base.outcomes, base.probabilities, np.float64(t), q)
        - upm_values(benchmark.outcomes, benchmark.probabilities, np.float64(t), q)
    )


def _above_parts(v: ScenarioVector, t: np.ndarray, q: float) -> tuple[np.ndarray, np.ndarray]:
    """For ``t`` above every outcome: ``N(t) - (t - EX)`` and ``log N'(t)``.

    Written in terms of ``delta = (EX - x) / (t - EX)`` so that neither the
    norm nor its derivative loses digits far out in the tail.
    """
    mean = v.mean()
    m = t[:, None] - mean
    delta = (mean - v.outcomes) / m
    l1 = np.log1p(delta)
    s_q = np.expm1(q * l1) @ v.probabilities
    s_q1 = np.expm1((q - 1.0) * l1) @ v.probabilities
    excess = m[:, 0] * np.expm1(np.log1p(s_q) / q)
    log_deriv = np.log1p(s_q1) - (q - 1.0) / q * np.log1p(s_q)
    return excess, log_deriv


def _split_above(t: np.ndarray, base: ScenarioVector, benchmark: ScenarioVector) -> np.ndarray:
    top = max(esssup(base), esssup(benchmark))
    width = top - min(essinf(base), essinf(benchmark))
    return t > top + max(width, 1e-12)


def _norm_gap(t: np.ndarray, base: ScenarioVector, benchmark: ScenarioVector, q: float) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if math.isinf(q):
        return norm_values(base.outcomes, base.probabilities, t, q) - norm_values(
            benchmark.outcomes, benchmark.probabilities, t, q
        )
    out = np.empty_like(t)
    hi = _split_above(t, base, benchmark)
    lo = ~hi
    out[lo] = norm_values(base.outcomes, base.probabilities, t[lo], q) - norm_values(
        benchmark.outcomes, benchmark.probabilities, t[lo], q
    )
    if hi.any():
        eb, _ = _above_parts(base, t[hi], q)
        ex, _ = _above_parts(benchmark, t[hi], q)
        out[hi] = (benchmark.mean() - base.mean()) + eb - ex
    return out


def _deriv_diff(t: np.ndarray, base: ScenarioVector, benchmark: ScenarioVector, q: float) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    out = np.empty_like(t)
    hi = _split_above(t, base, benchmark)
    lo = ~hi
    out[lo] = norm_derivative_values(base.outcomes, base.probabilities, t[lo], q) - norm_derivative_values(
        benchmark.outcomes, benchmark.probabilities, t[lo], q
    )
    if hi.any():
        _, a = _above_parts(base, t[hi], q)
        _, b = _above_parts(benchmark, t[hi], q)
        out[hi] = np.exp(b) * np.expm1(a - b)
    return out


def scan_region(base: ScenarioVector, benchmark: ScenarioVector) -> tuple[float, float, float]:
    """Main scan interval ``[lo, hi]`` and its width.

    Starts at the benchmark's essential infimum (below it the gap can only
    grow toward that point) and extends to the largest outcome of either
    variable, widened by 1% on each side.
    """
    lo = essinf(benchmark)
    hi = max(esssup(benchmark), esssup(base))
    width = hi - lo
    if width <= 0:
        width = max(1.0, abs(lo))
    m = MARGIN * width
    return lo - m, hi + m, width


def tail_points(
    base: ScenarioVector, benchmark: ScenarioVector, per_octave: int = TAIL_PER_OCTAVE
) -> np.ndarray:
    """Geometric grid ``hi + width * 2**(k / per_octave)`` beyond the outcomes.

    Starts a small fraction of the width above ``hi`` so that bumps just past
    the data are sampled, and reaches ``2**40`` widths out.
    """
    _, hi, width = scan_region(base, benchmark)
    k = np.arange(-4 * per_octave, TAIL_OCTAVES * per_octave + 1)
    return hi + width * 2.0 ** (k / per_octave)


def limit_gap(base: ScenarioVector, benchmark: ScenarioVector) -> float:
    """``lim_{t->inf}`` of the norm gap: ``E benchmark - E base``."""
    return benchmark.mean() - base.mean()


def jump_test_points(benchmark: ScenarioVector) -> list[float]:
    """Sorted distinct benchmark outcomes (jump points of its CDF)."""
    return sorted(float(v) for v in np.unique(benchmark.support()))


def _bisect_sign_change(f, a: float, b: float, fa: float, width: float) -> float:
    while b - a > width:
        m = 0.5 * (a + b)
        if m <= a or m >= b:
            break
        fm = float(f(np.array([m]))[0])
        if fm == 0:
            return m
        if (fm > 0) == (fa > 0):
            a, fa = m, fm
        else:
            b = m
    return 0.5 * (a + b)


def _sign_change_points(f, grid: np.ndarray, width: float) -> tuple[list[float], int]:
    """Sign changes of ``f`` on a sorted grid, refined by bisection.

    Zero runs contribute their endpoints and midpoint; returns the points and
    the number of nontrivial zero runs (curves coinciding on an interval).
    """
    vals = f(grid)
    s = np.sign(vals)
    pts: list[float] = []
    runs = 0
    i, n = 0, grid.size
    while i < n - 1:
        if s[i] != 0 and s[i + 1] != 0 and s[i] != s[i + 1]:
            pts.append(_bisect_sign_change(f, grid[i], grid[i + 1], vals[i], width))
            i += 1
            continue
        if s[i + 1] == 0:
            j = i + 1
            while j + 1 < n and s[j + 1] == 0:
                j += 1
            left, right = grid[i + 1], grid[j]
            pts.extend([left, right, 0.5 * (left + right)])
            if j > i + 1:
                runs += 1
            i = j
            continue
        i += 1
    return pts, runs


def critical_test_points(
    base: ScenarioVector,
    benchmark: ScenarioVector,
    order: Order,
    grid_size: int = DEFAULT_SCAN,
) -> list[float]:
    """Thresholds where the derivatives of the two partial-moment norms cross.

    Scans ``grid_size`` points over the test region plus a geometric tail for
    sign changes of the derivative difference and bisects each bracket to
    ``1e-10`` of the range. Tangential touches are included.
    """
    return _critical_points(base, benchmark, order, grid_size)[0]


def _critical_points(base, benchmark, order, grid_size):
    if grid_size < 2:
        raise InvalidInputError("grid_size must be >= 2")
    base = snap_to_benchmark(base, benchmark)
    if order.is_infinite or order.p <= 1:
        raise UnsupportedOrderError("derivative crossings need a finite order p > 1")
    q = order.norm_exponent()
    lo, hi, width = scan_region(base, benchmark)
    grid = np.concatenate([np.linspace(lo, hi, grid_size), tail_points(base, benchmark)])
    pts, runs = _sign_change_points(lambda t: _deriv_diff(t, base, benchmark, q), grid, 1e-10 * width)
    return sorted(set(pts)), runs


def _report(method, order, tolerance, ts, gaps, limit=None, runs=0, keep=None) -> VerificationReport:
    ts = np.asarray(ts, dtype=float)
    gaps = np.asarray(gaps, dtype=float)
    worst = max(0.0, float(gaps.max())) if gaps.size else 0.0
    if keep is not None and gaps.size > keep:
        # brute-force grids only report their worst points
        idx = np.sort(np.argpartition(gaps, -keep)[-keep:])
        ts, gaps = ts[idx], gaps[idx]
    if limit is not None:
        worst = max(worst, limit)
    return VerificationReport(
        dominates=worst <= tolerance,
        method=method,
        tolerance=tolerance,
        test_points=[(float(t), float(g)) for t, g in zip(ts, gaps)],
        worst_violation=worst,
        limit_gap=limit,
        coincident_intervals=runs,
        order=str(order),
    )


def _essinf_report(base, benchmark, order, tolerance) -> VerificationReport:
    shortfall = essinf(benchmark) - essinf(base)
    worst = max(0.0, shortfall)
    return VerificationReport(
        dominates=worst <= tolerance,
        method="essinf",
        tolerance=tolerance,
        test_points=[],
        worst_violation=worst,
        order=str(order),
    )


def jump_candidates(base: ScenarioVector, benchmark: ScenarioVector, order: Order) -> np.ndarray:
    """Finite test set for orders 1 and 2."""
    if order.p == 2:
        return np.asarray(jump_test_points(benchmark))
    if order.p == 1:
        return np.unique(np.concatenate([base.support(), benchmark.support()]))
    raise UnsupportedOrderError("jump points apply to orders 1 and 2 only")


def snap_to_benchmark(base: ScenarioVector, benchmark: ScenarioVector) -> ScenarioVector:
    """Replace outcomes of ``base`` that equal a benchmark outcome up to rounding.

    A portfolio built from the same scenarios as the benchmark reproduces its
    outcomes only to a few ulps. Below exponent one the gap is Hoelder
    continuous, so such ulps surface as spurious gaps near ``sqrt(eps)``;
    snapping removes them before any evaluation.
    """
    bs = np.unique(benchmark.support())
    x = base.outcomes
    scale = max(float(np.max(np.abs(x))), float(np.max(np.abs(bs))), np.finfo(float).tiny)
    idx = np.clip(np.searchsorted(bs, x), 1, bs.size - 1) if bs.size > 1 else np.zeros(x.size, dtype=int)
    near = bs[idx]
    if bs.size > 1:
        left = bs[idx - 1]
        near = np.where(np.abs(x - left) < np.abs(x - near), left, near)
    hit = (np.abs(x - near) <= SNAP_ULPS * np.finfo(float).eps * scale) & (x != near)
    if not hit.any():
        return base
    return ScenarioVector(np.where(hit, near, x), base.probabilities)


def verify_dominance(
    base: ScenarioVector,
    benchmark: ScenarioVector,
    order: Order,
    tolerance: float = DEFAULT_TOLERANCE,
    grid_size: int = DEFAULT_SCAN,
) -> VerificationReport:
    """Decide whether ``base`` dominates ``benchmark`` in the given order.

    Parameters
    ----------
    base : ScenarioVector
        Candidate dominating variable (e.g. a portfolio's returns).
    benchmark : ScenarioVector
        Reference variable that must be dominated.
    order : Order
        Dominance order ``p``.
    tolerance : float
        Largest admissible gap value, in gap units.
    """
    if tolerance < 0:
        raise InvalidInputError("tolerance must be >= 0")
    base = snap_to_benchmark(base, benchmark)
    if order.is_infinite:
        return _essinf_report(base, benchmark, order, tolerance)
    q = order.norm_exponent()
    if order.p in (1.0, 2.0):
        ts = jump_candidates(base, benchmark, order)
        gaps = upm_values(base.outcomes, base.probabilities, ts, q) - upm_values(
            benchmark.outcomes, benchmark.probabilities, ts, q
        )
        return _report("jump-points", order, tolerance, ts, gaps)
    crit, runs = _critical_points(base, benchmark, order, grid_size)
    lo, hi, _ = scan_region(base, benchmark)
    # outcomes are kinks (cusps below exponent 1); testing them is conservative
    ts = np.unique(np.concatenate([crit, [lo, hi], base.support(), benchmark.support()]))
    ts = ts[ts >= lo]
    gaps = _norm_gap(ts, base, benchmark, q)
    return _report(
        "derivative-intersection", order, tolerance, ts, gaps, limit=limit_gap(base, benchmark), runs=runs
    )


def dense_grid(base: ScenarioVector, benchmark: ScenarioVector, grid_size: int = DENSE_GRID) -> np.ndarray:
    """Uniform grid over the benchmark range widened by one step to the largest outcome."""
    lo = essinf(benchmark)
    hi = max(esssup(benchmark), esssup(base))
    if hi <= lo:
        hi = lo + max(1.0, abs(lo))
    step = (hi - lo) / (grid_size - 1)
    return np.linspace(lo - step, hi + step, grid_size + 2)


def verify_dense_grid(
    base: ScenarioVector,
    benchmark: ScenarioVector,
    order: Order,
    grid_size: int = DENSE_GRID,
    tolerance: float = DEFAULT_TOLERANCE,
) -> VerificationReport:
    """Brute-force check of the gap on a uniform grid.

    The grid also carries every outcome of both variables (cusps of the gap
    for exponents below one), the geometric tail and, for positive exponents,
    the ``t -> inf`` limit.
    """
    if grid_size < 100:
        raise InvalidInputError("dense grid needs at least 100 points")
    base = snap_to_benchmark(base, benchmark)
    grid = np.unique(np.concatenate([dense_grid(base, benchmark, grid_size), base.support(), benchmark.support()]))
    if order.is_infinite:
        gaps = _norm_gap(grid, base, benchmark, math.inf)
        return _report("dense-grid", order, tolerance, grid, gaps, keep=GRID_REPORT_POINTS)
    q = order.norm_exponent()
    gaps = _signed_moment_gap(grid, base, benchmark, q)
    limit = None
    if q > 0:
        tail = tail_points(base, benchmark, DENSE_TAIL_PER_OCTAVE)
        grid = np.concatenate([grid, tail])
        gaps = np.concatenate([gaps, _norm_gap(tail, base, benchmark, q)])
        limit = limit_gap(base, benchmark)
    return _report("dense-grid", order, tolerance, grid, gaps, limit=limit, keep=GRID_REPORT_POINTS)


def _signed_moment_gap(t: np.ndarray, base: ScenarioVector, benchmark: ScenarioVector, q: float) -> np.ndarray:
    # one pass over both variables: sum_i w_i (t - z_i)_+^q with signed weights
    z = np.concatenate([base.outcomes, benchmark.outcomes])
    w = np.concatenate([base.probabilities, -benchmark.probabilities])
    keep = w != 0
    z, w = z[keep], w[keep]
    out = np.empty_like(t)
    for sl in _chunks(t.size, 8_192):
        d = t[sl, None] - z
        np.maximum(d, 0.0, out=d)
        if q == 0:
            d = (d > 0).astype(float)
        elif q == int(q) and q <= 8:
            base_d = d.copy() if q > 1 else d
            for _ in range(int(q) - 1):
                np.multiply(d, base_d, out=d)
        elif q == 0.5:
            np.sqrt(d, out=d)
        elif q != 1:
            np.power(d, q, out=d)
        out[sl] = d @ w
    return out


def _chunks(n: int, size: int) -> Iterable[slice]:
    for a in range(0, n, size):
        yield slice(a, min(n, a + size))


def gap_curve(
    base: ScenarioVector, benchmark: ScenarioVector, order: Order, grid_size: int = 2000
) -> tuple[np.ndarray, np.ndarray]:
    """``(t, g(t))`` over the benchmark range, for plotting.

    At order infinity there is no moment gap; the limiting norm gap
    ``max(0, t - essinf base) - max(0, t - essinf benchmark)`` is returned.
    """
    if grid_size < 2:
        raise InvalidInputError("grid_size must be >= 2")
    base = snap_to_benchmark(base, benchmark)
    lo, hi = essinf(benchmark), esssup(benchmark)
    if hi <= lo:
        hi = lo + max(1.0, abs(lo))
    t = np.linspace(lo, hi, grid_size)
    if order.is_infinite:
        return t, _norm_gap(t, base, benchmark, math.inf)
    return t, np.asarray(GapFunction(base, benchmark, order).evaluate(t))


def write_gap_csv(path: str | Path, t: np.ndarray, g: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "gap"])
        for a, b in zip(t, g):
            w.writerow([repr(float(a)), repr(float(b))])
