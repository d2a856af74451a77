"""Portfolio optimization under a stochastic dominance constraint.

The problem is ``max E x'xi`` (or ``min R_beta(-x'xi)``) over the simplex
subject to ``xi_0 <= x'xi`` in a dominance order. The solver is Newton's
method on the first-order (KKT) system of a finitely constrained problem:

* each dominance cut compares ``||(t - x'xi)_+||_q`` with the benchmark's
  norm at a threshold ``t``. For orders above two the threshold is itself an
  unknown, pinned by the stationarity row ``d/dt [gap] = 0``, so the cut
  tracks a local maximum of the gap (the reduced constraint ``gbar``);
* complementarity is written with the smoothed Fischer-Burmeister function
  and ``(.)_+`` with its Chen-Harker-Kanzow-Smale smoothing; the smoothing
  parameter is driven to zero along a homotopy;
* cuts are added where the dominance gap is still positive and the final
  point is certified by the verification module.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from sdopt.dominance import (
    _critical_points,
    _norm_gap,
    limit_gap,
    scan_region,
    verify_dominance,
)
from sdopt.errors import DimensionError, InvalidInputError, UnsupportedOrderError
from sdopt.risk import risk_measure
from sdopt.scenario import (
    Order,
    PortfolioWeights,
    ScenarioMatrix,
    ScenarioVector,
    essinf,
    esssup,
    portfolio_returns,
    upm_values,
)

OBJECTIVES = ("expected_return", "risk")
RIDGE = 1e-10
SCAN_POINTS = 4096
THRESHOLD_KINDS = ("fixed", "root", "pinned")


@dataclass(frozen=True)
class ProblemSpec:
    """A dominance-constrained portfolio problem.

    ``order`` is on the ``<=^(p)`` scale: ``Order(2)`` is second-order
    dominance, ``Order(3)`` third order, ``Order(inf)`` the essential-infimum
    order. ``risk_norm`` is the norm index of ``R_beta`` (1 gives AVaR).
    """

    scenarios: ScenarioMatrix
    benchmark: ScenarioVector
    order: Order
    objective: str = "expected_return"
    beta: float | None = None
    risk_norm: float = 1.0
    tolerance: float = 1e-8
    max_iter: int = 500
    damping: float = 1.0
    max_rounds: int = 10

    def __post_init__(self) -> None:
        if self.benchmark.n != self.scenarios.n:
            raise DimensionError(f"benchmark has {self.benchmark.n} scenarios, matrix has {self.scenarios.n}")
        if self.objective not in OBJECTIVES:
            raise InvalidInputError(f"objective must be one of {OBJECTIVES}")
        if self.objective == "risk":
            if self.beta is None or not (0.0 < self.beta < 1.0):
                raise InvalidInputError("risk objective needs 0 < beta < 1")
            if not (1.0 <= self.risk_norm < math.inf):
                raise InvalidInputError("risk_norm must be finite and >= 1")
        if not (self.tolerance > 0):
            raise InvalidInputError("tolerance must be positive")
        if self.max_iter < 1 or self.max_rounds < 0:
            raise InvalidInputError("max_iter must be >= 1 and max_rounds >= 0")
        if not (0.0 < self.damping <= 1.0):
            raise InvalidInputError("damping must lie in (0, 1]")

    @property
    def d(self) -> int:
        return self.scenarios.d

    @property
    def scale(self) -> float:
        """Spread of the data, used to make tolerances unit-free."""
        s = float(np.std(self.scenarios.returns))
        return s if s > 0 else max(1.0, float(np.abs(self.scenarios.returns).max()))

    @property
    def has_aux(self) -> bool:
        return self.objective == "risk"

    def feasibility_tolerance(self) -> float:
        return 1e-9 * max(1.0, self.scale)


@dataclass(frozen=True)
class Cut:
    """One constraint of the finite system.

    kind:
      ``fixed``  gap at a fixed threshold (second order: benchmark outcomes);
      ``root``   gap at a threshold that is a Newton unknown;
      ``pinned`` higher-order gap at a fixed threshold (the benchmark's
                 essential infimum, where its norm has a kink);
      ``floor``  scenario ``index`` must not fall below ``essinf`` of the benchmark;
      ``mean``   expected return at least the benchmark's.
    """

    kind: str
    t: float = 0.0
    index: int = -1


@dataclass
class KktState:
    """Primal-dual iterate.

    ``t`` and ``mu`` carry one entry per cut. Second-order cuts and the AVaR
    objective are piecewise linear; they are lifted with slack variables so
    that every kink becomes a complementarity pair: ``slack``/``pi`` hold one
    row per cut (unused rows stay zero), ``w``/``theta`` the AVaR tail.
    """

    x: np.ndarray
    aux: float
    t: np.ndarray
    lam: float
    mu: np.ndarray
    nu: np.ndarray
    cuts: tuple[Cut, ...] = ()
    slack: np.ndarray | None = None
    pi: np.ndarray | None = None
    w: np.ndarray | None = None
    theta: np.ndarray | None = None

    def copy(self) -> "KktState":
        return KktState(
            self.x.copy(),
            self.aux,
            self.t.copy(),
            self.lam,
            self.mu.copy(),
            self.nu.copy(),
            self.cuts,
            None if self.slack is None else self.slack.copy(),
            None if self.pi is None else self.pi.copy(),
            None if self.w is None else self.w.copy(),
            None if self.theta is None else self.theta.copy(),
        )


@dataclass
class SolveReport:
    state: KktState
    objective_value: float
    iterations: int
    active_test_points: list[float]
    refinement_rounds: int
    converged: bool
    order: str = ""
    asset_names: tuple[str, ...] = ()
    residual: float = math.nan
    verified: bool = False
    worst_violation: float = math.nan
    active_constraints: int = 0
    flags: list[str] = field(default_factory=list)

    @property
    def weights(self) -> np.ndarray:
        return self.state.x

    def to_dict(self) -> dict:
        names = self.asset_names or tuple(f"asset {j + 1}" for j in range(self.state.x.size))
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "objective": self.objective_value,
            "weights": [{"asset": a, "weight": float(w)} for a, w in zip(names, self.state.x)],
            "active_test_points": [float(t) for t in self.active_test_points],
            "active_constraints": self.active_constraints,
            "refinement_rounds": self.refinement_rounds,
            "feasibility": {"verified": self.verified, "worst_violation": self.worst_violation},
            "order": self.order,
            "residual": self.residual,
            "flags": list(self.flags),
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


# --------------------------------------------------------------------------
# smooth building blocks


def _smooth_plus(u: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Smoothed ``max(u, 0)`` with first and second derivatives."""
    if tau == 0:
        phi = np.maximum(u, 0.0)
        d1 = np.where(u > 0, 1.0, np.where(u == 0, 0.5, 0.0))
        return phi, d1, np.zeros_like(u)
    r = np.hypot(u, 2.0 * tau)
    # both branches avoid cancellation
    phi = np.where(u > 0, 0.5 * (u + r), 2.0 * tau * tau / (r - np.minimum(u, 0.0)))
    return phi, phi / r, 2.0 * tau * tau / r**3


@dataclass
class _NormParts:
    """``N = ||phi(u)||_e`` with ``dN/du = g`` and ``d2N/du2 = diag(D) + c a a'``."""

    value: float
    g: np.ndarray
    D: np.ndarray
    c: float
    a: np.ndarray


def _norm_parts(u: np.ndarray, p: np.ndarray, e: float, tau: float) -> _NormParts:
    phi, d1, d2 = _smooth_plus(u, tau)
    top = float(phi.max())
    zero = np.zeros_like(u)
    if top <= 0:
        return _NormParts(0.0, zero, zero, 0.0, zero)
    if e == 1:
        return _NormParts(float(p @ phi), p * d1, p * d2, 0.0, zero)
    r = phi / top
    re1 = r ** (e - 1.0)
    s = float(p @ (r * re1))
    a = p * re1 * d1
    with np.errstate(divide="ignore", invalid="ignore"):
        re2 = np.where(r > 0, r ** (e - 2.0), 0.0)
    D = s ** (1.0 / e - 1.0) * p * ((e - 1.0) * re2 * d1 * d1 / top + re1 * d2)
    return _NormParts(top * s ** (1.0 / e), s ** (1.0 / e - 1.0) * a, D, (1.0 - e) / top * s ** (1.0 / e - 2.0), a)


def _fb(a: np.ndarray, b: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Smoothed Fischer-Burmeister ``a + b - sqrt(a^2 + b^2 + 2 tau^2)`` and partials."""
    rho = np.sqrt(a * a + b * b + 2.0 * tau * tau)
    safe = np.where(rho > 0, rho, 1.0)
    da = np.where(rho > 0, 1.0 - a / safe, 1.0 - 1.0 / math.sqrt(2.0))
    db = np.where(rho > 0, 1.0 - b / safe, 1.0 - 1.0 / math.sqrt(2.0))
    return a + b - rho, da, db


# --------------------------------------------------------------------------
# the KKT system


def _lifted_avar(spec: ProblemSpec) -> bool:
    return spec.has_aux and spec.risk_norm == 1


class _Layout:
    """Positions of the unknowns; each equation shares the slot of its paired unknown."""

    def __init__(self, spec: ProblemSpec, cuts: Sequence[Cut]):
        d, n = spec.d, spec.scenarios.n
        self.d, self.n, self.k = d, n, len(cuts)
        self.roots = [i for i, c in enumerate(cuts) if c.kind == "root"]
        self.lifted = [i for i, c in enumerate(cuts) if c.kind == "fixed"]
        self.avar = _lifted_avar(spec)
        self.na = 1 if spec.has_aux else 0
        pos = 0

        def take(m: int) -> slice:
            nonlocal pos
            sl = slice(pos, pos + m)
            pos += m
            return sl

        self.x = take(d)
        self.aux = take(self.na)
        self.t = take(len(self.roots))
        self.lam = take(1).start
        self.mu = take(self.k)
        self.nu = take(d)
        self.s = {i: take(n) for i in self.lifted}
        self.pi = {i: take(n) for i in self.lifted}
        self.w = take(n if self.avar else 0)
        self.theta = take(n if self.avar else 0)
        self.size = pos
        self.t_pos = {ci: self.t.start + j for j, ci in enumerate(self.roots)}
        # no peak of the gap lies below the benchmark's essential infimum
        self.t_floor = essinf(spec.benchmark)

    def pack(self, st: KktState) -> np.ndarray:
        z = np.empty(self.size)
        z[self.x] = st.x
        if self.na:
            z[self.aux] = st.aux
        z[self.t] = st.t[self.roots] if self.roots else []
        z[self.lam] = st.lam
        z[self.mu] = st.mu
        z[self.nu] = st.nu
        for i in self.lifted:
            z[self.s[i]] = st.slack[i]
            z[self.pi[i]] = st.pi[i]
        if self.avar:
            z[self.w] = st.w
            z[self.theta] = st.theta
        return z

    def unpack(self, z: np.ndarray, st: KktState) -> KktState:
        out = st.copy()
        if self.roots:
            out.t[self.roots] = np.maximum(z[self.t], self.t_floor)
        out.x = z[self.x].copy()
        if self.na:
            out.aux = float(z[self.aux][0])
        out.lam = float(z[self.lam])
        out.mu = z[self.mu].copy()
        out.nu = z[self.nu].copy()
        for i in self.lifted:
            out.slack[i] = z[self.s[i]]
            out.pi[i] = z[self.pi[i]]
        if self.avar:
            out.w = z[self.w].copy()
            out.theta = z[self.theta].copy()
        return out


@dataclass
class _CutEval:
    value: float
    grad_x: np.ndarray
    grad_t: float = 0.0
    hess_xx: np.ndarray | None = None
    hess_xt: np.ndarray | None = None
    hess_tt: float = 0.0


def _dominance_exponent(spec: ProblemSpec) -> float:
    return spec.order.norm_exponent()


def _benchmark_moment(spec: ProblemSpec, t: float) -> float:
    b = spec.benchmark
    return float(upm_values(b.outcomes, b.probabilities, np.float64(t), 1.0))


def _eval_cut(spec: ProblemSpec, cut: Cut, t: float, x: np.ndarray, tau: float, second: bool) -> _CutEval:
    """Constraint value ``c <= 0`` with derivatives (unlifted form)."""
    xi = spec.scenarios.returns
    if cut.kind == "floor":
        return _CutEval(essinf(spec.benchmark) - float(xi[cut.index] @ x), -xi[cut.index].copy())
    if cut.kind == "mean":
        m = spec.scenarios.mean_returns()
        return _CutEval(spec.benchmark.mean() - float(m @ x), -m)
    e = _dominance_exponent(spec)
    own = _norm_parts(t - xi @ x, spec.scenarios.probabilities, e, tau)
    ref = _norm_parts(t - spec.benchmark.outcomes, spec.benchmark.probabilities, e, tau)
    out = _CutEval(own.value - ref.value, -(xi.T @ own.g), float(own.g.sum() - ref.g.sum()))
    if second:
        xa = xi.T @ own.a
        sa = float(own.a.sum())
        out.hess_xx = (xi.T * own.D) @ xi + own.c * np.outer(xa, xa)
        out.hess_xt = -(xi.T @ own.D) - own.c * xa * sa
        out.hess_tt = float(own.D.sum() + own.c * sa * sa - ref.D.sum() - ref.c * ref.a.sum() ** 2)
    return out


def _objective(spec: ProblemSpec, x: np.ndarray, aux: float, tau: float):
    """Value, gradient over ``(x, aux)`` and Hessian of the minimized objective."""
    xi = spec.scenarios.returns
    d = spec.d
    if not spec.has_aux:
        m = spec.scenarios.mean_returns()
        return -float(m @ x), -m, np.zeros((d, d))
    k = 1.0 / (1.0 - spec.beta)
    n = _norm_parts(-(xi @ x) - aux, spec.scenarios.probabilities, spec.risk_norm, tau)
    grad = np.empty(d + 1)
    grad[:d] = -k * (xi.T @ n.g)
    grad[d] = 1.0 - k * n.g.sum()
    xa = xi.T @ n.a
    sa = float(n.a.sum())
    H = np.empty((d + 1, d + 1))
    H[:d, :d] = k * ((xi.T * n.D) @ xi + n.c * np.outer(xa, xa))
    H[:d, d] = H[d, :d] = k * (xi.T @ n.D + n.c * xa * sa)
    H[d, d] = k * (n.D.sum() + n.c * sa * sa)
    return aux + k * n.value, grad, H


def _natural(a, b, tau):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.minimum(a, b), None, None


def _system(spec: ProblemSpec, lay: _Layout, st: KktState, tau: float, jacobian: bool = True, natural: bool = False):
    """Smoothed KKT residual ``F`` and its analytic Jacobian.

    With ``natural=True`` every complementarity row is ``min(a, b)`` instead
    (the unsmoothed residual; no Jacobian).
    """
    comp = _natural if natural else _fb
    jacobian = jacobian and not natural
    d, n, x = lay.d, lay.n, st.x
    xi = spec.scenarios.returns
    p = spec.scenarios.probabilities
    F = np.zeros(lay.size)
    J = np.zeros((lay.size, lay.size)) if jacobian else None
    ix = np.arange(d)
    X, NU = lay.x, lay.nu

    F[X] = st.lam - st.nu
    if jacobian:
        J[X, lay.lam] = 1.0
        J[ix, NU.start + ix] = -1.0

    if lay.avar:
        # R = a + k E w,  w >= -x'xi - a,  w >= 0;  multipliers theta in [0, k p]
        k = 1.0 / (1.0 - spec.beta)
        a_ = lay.aux.start
        F[a_] = 1.0 - st.theta.sum()
        F[X] -= xi.T @ st.theta
        g = st.w + xi @ x + st.aux
        f1, da, db = comp(st.theta, g, tau)
        f2, ea, eb = comp(k * p - st.theta, st.w, tau)
        F[lay.theta] = f1
        F[lay.w] = f2
        if jacobian:
            th, w = lay.theta, lay.w
            J[a_, th] = -1.0
            J[X, th] = -xi.T
            J[th, th] = np.diag(da)
            J[th, w] = np.diag(db)
            J[th, X] = db[:, None] * xi
            J[th, a_] = db
            J[w, th] = np.diag(-ea)
            J[w, w] = np.diag(eb)
    else:
        _, grad_f, hess_f = _objective(spec, x, st.aux, tau)
        F[X] += grad_f[:d]
        if jacobian:
            J[X, X] = hess_f[:d, :d]
        if lay.na:
            a_ = lay.aux.start
            F[a_] = grad_f[d]
            if jacobian:
                J[X, a_] = hess_f[:d, d]
                J[a_, X] = hess_f[d, :d]
                J[a_, a_] = hess_f[d, d]

    for i, cut in enumerate(st.cuts):
        mi = lay.mu.start + i
        mu = st.mu[i]
        if cut.kind == "fixed":
            # E s >= ... lifted: s >= t - x'xi, s >= 0, E s <= E(t - xi_0)_+
            S, PI = lay.s[i], lay.pi[i]
            s_, pi_ = st.slack[i], st.pi[i]
            F[X] -= xi.T @ pi_
            g = s_ - cut.t + xi @ x
            f1, da, db = comp(pi_, g, tau)
            f2, ea, eb = comp(mu * p - pi_, s_, tau)
            f3, ca, cb = comp(np.array(mu), np.array(_benchmark_moment(spec, cut.t) - p @ s_), tau)
            F[PI], F[S], F[mi] = f1, f2, f3
            if jacobian:
                J[X, PI] = -xi.T
                J[PI, PI] = np.diag(da)
                J[PI, S] = np.diag(db)
                J[PI, X] = db[:, None] * xi
                J[S, mi] = ea * p
                J[S, PI] = np.diag(-ea)
                J[S, S] = np.diag(eb)
                J[mi, mi] = ca
                J[mi, S] = -cb * p
            continue
        ev = _eval_cut(spec, cut, float(st.t[i]), x, tau, jacobian)
        F[X] += mu * ev.grad_x
        fb, da, db = comp(np.array(mu), np.array(-ev.value), tau)
        F[mi] = fb
        if jacobian:
            J[X, mi] = ev.grad_x
            J[mi, mi] = da
            J[mi, X] = -db * ev.grad_x
            if ev.hess_xx is not None:
                J[X, X] += mu * ev.hess_xx
        if cut.kind == "root":
            tp = lay.t_pos[i]
            F[tp] = ev.grad_t
            if jacobian:
                J[X, tp] = mu * ev.hess_xt
                J[tp, X] = ev.hess_xt
                J[tp, tp] = ev.hess_tt
                J[mi, tp] = -db * ev.grad_t

    F[lay.lam] = x.sum() - 1.0
    if jacobian:
        J[lay.lam, X] = 1.0

    fb, da, db = comp(st.nu, x, tau)
    F[NU] = fb
    if jacobian:
        J[NU.start + ix, NU.start + ix] = da
        J[NU.start + ix, ix] = db
    return F, J


def kkt_residual(state: KktState, spec: ProblemSpec) -> np.ndarray:
    """Unsmoothed first-order residual of ``state``.

    Rows: stationarity in ``x`` (and in the risk auxiliary), the threshold
    rows of root-pinned cuts, the budget, and the natural complementarity
    residuals ``min(mu_k, -c_k)``, ``min(nu_i, x_i)`` (plus those of the
    lifted slacks).
    """
    if state.x.shape != (spec.d,) or state.nu.shape != (spec.d,):
        raise DimensionError("state dimensions do not match the problem")
    lay = _Layout(spec, state.cuts)
    F, _ = _system(spec, lay, state, 0.0, natural=True)
    return F


# --------------------------------------------------------------------------
# Newton with smoothing homotopy


@dataclass
class _NewtonResult:
    state: KktState
    iterations: int
    converged: bool
    residual: float
    flags: list[str]


def _newton_step(F: np.ndarray, J: np.ndarray, flags: list[str]) -> np.ndarray:
    try:
        step = np.linalg.solve(J, -F)
        if np.all(np.isfinite(step)):
            return step
    except np.linalg.LinAlgError:
        pass
    if "ridge" not in flags:
        flags.append("ridge")
    scale = max(1.0, float(np.abs(J).max()) ** 2)
    return np.linalg.solve(J.T @ J + RIDGE * scale * np.eye(J.shape[0]), -(J.T @ F))


def _residual_scale(spec: ProblemSpec, state: KktState) -> float:
    _, g, _ = _objective(spec, state.x, state.aux, 0.0)
    return max(1.0, float(np.abs(g).max()))


def _newton(spec: ProblemSpec, state: KktState, budget: int) -> _NewtonResult:
    """Damped Newton along a decreasing smoothing sequence.

    Each stage aims at ``max(tau / 1000, tol / 10)`` and counts as done
    below ``max(10 tau, tol)``. A stage that stalls short of that is
    abandoned and the last completed stage is kept: on kinked problems the Jacobian conditioning grows like
    ``1/tau`` and at some point further stages only add noise. Convergence
    means a max-norm residual below ``tolerance`` times the objective
    gradient scale at a smoothing level below ``1e-7`` of the data spread.
    """
    lay = _Layout(spec, state.cuts)
    flags: list[str] = []
    iters = 0
    tol = spec.tolerance * _residual_scale(spec, state)
    res = float(np.abs(kkt_residual(state, spec)).max())
    if res <= tol:
        return _NewtonResult(state, 0, True, res, flags)
    scale = spec.scale
    taus = [scale * 10.0**-k for k in range(2, 14)] + [0.0]
    done: tuple[float, KktState, float] | None = None
    for tau in taus:
        target = max(1e-3 * tau, 0.1 * tol)
        accept = max(10.0 * tau, tol)
        norm = math.inf
        for _ in range(60):
            F, J = _system(spec, lay, state, tau)
            norm = float(np.abs(F).max())
            if norm <= target:
                break
            if iters >= budget:
                if "max-iter" not in flags:
                    flags.append("max-iter")
                break
            iters += 1
            z = lay.pack(state)
            dz = _newton_step(F, J, flags)
            merit = 0.5 * float(F @ F)
            alpha = spec.damping
            accepted = None
            for _ in range(31):
                trial = lay.unpack(z + alpha * dz, state)
                Ft, _ = _system(spec, lay, trial, tau, jacobian=False)
                if np.all(np.isfinite(Ft)) and 0.5 * float(Ft @ Ft) <= (1.0 - 1e-4 * alpha) * merit:
                    accepted = trial
                    break
                alpha *= 0.5
            if accepted is None:
                break
            state = accepted
        else:
            F, _ = _system(spec, lay, state, tau, jacobian=False)
            norm = float(np.abs(F).max())
        passed = norm <= accept
        if not passed:
            if done is not None:
                state = done[1]
            break
        done = (tau, state, norm)
        if norm <= 0.1 * tol and tau <= 1e-10 * scale:
            break
    if done is None:
        return _NewtonResult(state, iters, False, res, flags)
    tau, state, norm = done
    return _NewtonResult(state, iters, norm <= tol and tau <= 1e-7 * scale, norm, flags)


def _piecewise_linear(spec: ProblemSpec) -> bool:
    kinked_cuts = spec.order.is_infinite or spec.order.p == 2
    return kinked_cuts and (not spec.has_aux or spec.risk_norm == 1)


def _polish(spec: ProblemSpec, state: KktState) -> KktState:
    """Snap a smoothed solution onto the exact vertex of a piecewise-linear problem.

    Collects the equations that hold at the limit point (zero weights, budget,
    active cuts and the scenarios sitting on their kinks, kinks of the AVaR
    objective) and solves them for a minimal correction. The snapped point
    is kept only if it stays feasible, nonnegative and no worse.
    """
    if not _piecewise_linear(spec):
        return state
    xi = spec.scenarios.returns
    p = spec.scenarios.probabilities
    d, na = spec.d, (1 if spec.has_aux else 0)
    x = state.x
    tight = 1e-6 * spec.scale
    rows: list[np.ndarray] = []
    rhs: list[float] = []

    def eq(cx, cs, b):
        r = np.zeros(d + na)
        r[:d] = cx
        if na:
            r[d] = cs
        rows.append(r)
        rhs.append(b)

    for i in np.flatnonzero(x <= 1e-7):
        e = np.zeros(d)
        e[i] = 1.0
        eq(e, 0.0, 0.0)
    eq(np.ones(d), 0.0, 1.0)
    for k in _active(state, spec):
        cut = state.cuts[k]
        if cut.kind == "floor":
            eq(xi[cut.index], 0.0, essinf(spec.benchmark))
        elif cut.kind == "mean":
            eq(spec.scenarios.mean_returns(), 0.0, spec.benchmark.mean())
        else:
            u = cut.t - xi @ x
            pos = u > tight
            ref = float(upm_values(spec.benchmark.outcomes, spec.benchmark.probabilities, np.float64(cut.t), 1.0))
            eq(-(p[pos] @ xi[pos]), 0.0, ref - cut.t * p[pos].sum())
            for j in np.flatnonzero(np.abs(u) <= tight):
                eq(xi[j], 0.0, cut.t)
    if na:
        w = -(xi @ x) - state.aux
        for j in np.flatnonzero(np.abs(w) <= tight):
            eq(xi[j], 1.0, 0.0)
    A = np.array(rows)
    b = np.array(rhs)
    z = np.concatenate([x, [state.aux] if na else []])
    dz, *_ = np.linalg.lstsq(A, b - A @ z, rcond=None)
    zn = z + dz
    if np.abs(A @ zn - b).max() > 1e-11 * max(1.0, spec.scale) or np.abs(dz).max() > 1e-4:
        return state
    xn = zn[:d]
    if xn.min() < -1e-14:
        return state
    xn = np.maximum(xn, 0.0)
    xn /= xn.sum()
    y = portfolio_returns(spec.scenarios, xn)
    if verify_dominance(y, spec.benchmark, spec.order).worst_violation > 1e-12 * max(1.0, spec.scale):
        return state
    if _objective_value(spec, xn) * (-1 if not spec.has_aux else 1) > _objective_value(spec, x) * (
        -1 if not spec.has_aux else 1
    ) + 1e-9 * max(1.0, spec.scale):
        return state
    out = state.copy()
    out.x = xn
    if na:
        out.aux = float(zn[d])
    return out


# --------------------------------------------------------------------------
# cut management


def _lift_rows(spec: ProblemSpec, cuts: Sequence[Cut], x: np.ndarray) -> np.ndarray:
    y = spec.scenarios.returns @ x
    return np.array([np.maximum(c.t - y, 0.0) if c.kind == "fixed" else np.zeros_like(y) for c in cuts]).reshape(
        len(cuts), y.size
    )


def _initial_state(spec: ProblemSpec, x0: np.ndarray | None, cuts: Sequence[Cut]) -> KktState:
    """Start at ``x0`` (uniform by default) with zero inequality multipliers.

    The budget multiplier starts at the mean return and the risk auxiliary
    at the ``beta``-quantile of the losses.
    """
    d, n = spec.d, spec.scenarios.n
    x = np.full(d, 1.0 / d) if x0 is None else np.asarray(x0, dtype=float).copy()
    if x.shape != (d,):
        raise DimensionError(f"{x.size} starting weights for {d} assets")
    y = spec.scenarios.returns @ x
    aux = float(np.quantile(-y, spec.beta)) if spec.has_aux else 0.0
    t = np.array([c.t for c in cuts], dtype=float)
    lam = float(spec.scenarios.mean_returns() @ x)
    cuts = tuple(cuts)
    w = theta = None
    if _lifted_avar(spec):
        w = np.maximum(-y - aux, 0.0)
        theta = spec.scenarios.probabilities.copy()
    return KktState(
        x, aux, t, lam, np.zeros(len(cuts)), np.zeros(d), cuts, _lift_rows(spec, cuts, x), np.zeros((len(cuts), n)), w, theta
    )


def _with_cuts(state: KktState, new: Sequence[Cut], spec: ProblemSpec) -> KktState:
    out = state.copy()
    out.cuts = tuple(state.cuts) + tuple(new)
    out.t = np.concatenate([state.t, [c.t for c in new]])
    out.mu = np.concatenate([state.mu, np.zeros(len(new))])
    out.slack = np.vstack([state.slack, _lift_rows(spec, new, state.x)])
    out.pi = np.vstack([state.pi, np.zeros((len(new), spec.scenarios.n))])
    return out


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    out, i, n = [], 0, mask.size
    while i < n:
        if mask[i]:
            j = i
            while j + 1 < n and mask[j + 1]:
                j += 1
            out.append((i, j))
            i = j + 1
        else:
            i += 1
    return out


def _new_cuts(spec: ProblemSpec, state: KktState, x: np.ndarray) -> tuple[list[Cut], dict[int, float]]:
    """Cuts for every region where the constraint still fails.

    Returns new cuts and, for higher orders, moves ``{cut index: threshold}``:
    when a failing region's peak lies close to an existing fixed-threshold
    cut, that cut is moved onto the peak instead of adding a neighbour (an
    exchange step).
    """
    tol = spec.feasibility_tolerance()
    y = portfolio_returns(spec.scenarios, x)
    bench = spec.benchmark
    order = spec.order
    have = set(state.cuts)
    if order.is_infinite:
        low = essinf(bench) - spec.scenarios.returns @ x
        return [Cut("floor", 0.0, int(j)) for j in np.flatnonzero(low > tol) if Cut("floor", 0.0, int(j)) not in have], {}
    q = order.norm_exponent()
    cuts: list[Cut] = []
    moves: dict[int, float] = {}
    if order.p == 2:
        ts = np.unique(bench.support())
        gaps = upm_values(y.outcomes, y.probabilities, ts, 1.0) - upm_values(bench.outcomes, bench.probabilities, ts, 1.0)
        for a, b in _runs(gaps > tol):
            k = a + int(np.argmax(gaps[a : b + 1]))
            c = Cut("fixed", float(ts[k]))
            if c not in have:
                cuts.append(c)
        return cuts, moves
    _, _, width = scan_region(y, bench)
    floor = essinf(bench)
    # between consecutive derivative crossings the gap is monotone, so runs of
    # positive candidates are exactly the failing intervals
    crit, _ = _critical_points(y, bench, order, SCAN_POINTS)
    ts = np.unique(np.concatenate([crit, [floor], y.support(), bench.support()]))
    ts = ts[ts >= floor]
    gaps = _norm_gap(ts, y, bench, q)
    movable = {i: float(state.t[i]) for i, c in enumerate(state.cuts) if c.kind == "pinned" and state.t[i] != floor}
    for a, b in _runs(gaps > tol):
        t_hat = float(ts[a + int(np.argmax(gaps[a : b + 1]))])
        if abs(t_hat - floor) <= 1e-7 * width:
            t_hat = floor
            if Cut("pinned", floor) in have:
                continue
        # only local drift is an exchange; a distant peak gets its own cut
        near = 0.02 * width
        inside = [i for i, t in movable.items() if abs(t - t_hat) <= near and i not in moves]
        if inside and t_hat != floor:
            i = min(inside, key=lambda j: abs(movable[j] - t_hat))
            moves[i] = t_hat
        else:
            cuts.append(Cut("pinned", float(t_hat)))
    if limit_gap(y, bench) > tol and Cut("mean") not in have:
        cuts.append(Cut("mean"))
    return cuts, moves


def _apply_moves(state: KktState, moves: dict[int, float]) -> KktState:
    out = state.copy()
    cuts = list(out.cuts)
    for i, t in moves.items():
        cuts[i] = Cut(cuts[i].kind, t)
        out.t[i] = t
    out.cuts = tuple(cuts)
    return out


def _active(state: KktState, spec: ProblemSpec) -> list[int]:
    thresh = 1e-9 * max(1.0, abs(state.lam))
    return [i for i, m in enumerate(state.mu) if m > thresh]


def _prune(state: KktState, keep: Iterable[int]) -> KktState:
    keep = list(keep)
    out = state.copy()
    out.t = state.t[keep].copy()
    out.mu = state.mu[keep].copy()
    out.cuts = tuple(state.cuts[i] for i in keep)
    out.slack = state.slack[keep].copy()
    out.pi = state.pi[keep].copy()
    return out


def _objective_value(spec: ProblemSpec, x: np.ndarray) -> float:
    y = portfolio_returns(spec.scenarios, x)
    if spec.has_aux:
        return risk_measure(-y, spec.beta, spec.risk_norm).value
    return y.mean()


def _finish(spec: ProblemSpec, state: KktState, iters: int, rounds: int, ok: bool, res: float, flags: list[str]) -> SolveReport:
    x = PortfolioWeights.project(state.x).weights.copy()
    if np.max(np.abs(x - state.x)) > 1e-8:
        flags = flags + ["projected"]
    state = state.copy()
    state.x = x
    active = _active(state, spec)
    state = _prune(state, active)
    rep = verify_dominance(portfolio_returns(spec.scenarios, x), spec.benchmark, spec.order)
    verified = rep.worst_violation <= spec.feasibility_tolerance()
    points = [float(state.t[i]) for i, c in enumerate(state.cuts) if c.kind in THRESHOLD_KINDS]
    return SolveReport(
        state=state,
        objective_value=_objective_value(spec, x),
        iterations=iters,
        active_test_points=sorted(points),
        refinement_rounds=rounds,
        converged=bool(ok and verified),
        order=str(spec.order),
        asset_names=spec.scenarios.asset_names,
        residual=res,
        verified=verified,
        worst_violation=rep.worst_violation,
        active_constraints=len(state.cuts),
        flags=flags,
    )


def _higher(spec: ProblemSpec) -> bool:
    return not spec.order.is_infinite and spec.order.p > 2


def _solve_cuts(spec: ProblemSpec, state: KktState, iters: int = 0, rounds: int = 0, flags=None) -> SolveReport:
    """Newton solves interleaved with cut management until the point verifies."""
    flags = list(flags or [])
    ok, res = False, math.nan
    if _higher(spec):
        state = _as_pinned(state)
    while True:
        out = _newton(spec, state, spec.max_iter - iters)
        state, ok, res = out.state, out.converged, out.residual
        iters += out.iterations
        flags += [f for f in out.flags if f not in flags]
        if not ok:
            break
        state = _polish(spec, state)
        new, moves = _new_cuts(spec, state, PortfolioWeights.project(state.x).weights)
        if not new and not moves:
            break
        if rounds >= spec.max_rounds:
            ok = False
            flags.append("max-rounds")
            break
        state = _with_cuts(_apply_moves(state, moves), new, spec)
        rounds += 1
    if ok and _higher(spec):
        state, iters, res = _threshold_newton(spec, state, iters, res, flags)
    return _finish(spec, state, iters, rounds, ok, res, flags)


def _as_pinned(state: KktState) -> KktState:
    out = state.copy()
    out.cuts = tuple(Cut("pinned", float(t)) if c.kind == "root" else c for c, t in zip(state.cuts, state.t))
    return out


def _threshold_newton(spec: ProblemSpec, state: KktState, iters: int, res: float, flags: list[str]):
    """Release the active thresholds into the Newton system and re-solve.

    Each released threshold is pinned by ``d/dt [gap] = 0`` (the reduced
    constraint's implicit root). The result replaces the exchange solution
    only if it converges, verifies and is no worse.
    """
    floor = essinf(spec.benchmark)
    active = set(_active(state, spec))
    trial = state.copy()
    trial.cuts = tuple(
        Cut("root", float(t)) if c.kind == "pinned" and i in active and t != floor else c
        for i, (c, t) in enumerate(zip(state.cuts, state.t))
    )
    if all(c.kind != "root" for c in trial.cuts):
        return state, iters, res
    out = _newton(spec, trial, max(spec.max_iter - iters, 1))
    iters += out.iterations
    if not out.converged:
        return state, iters, res
    x = PortfolioWeights.project(out.state.x).weights
    rep = verify_dominance(portfolio_returns(spec.scenarios, x), spec.benchmark, spec.order)
    better = _objective_value(spec, x) >= _objective_value(spec, PortfolioWeights.project(state.x).weights) - 1e-9 * max(1.0, spec.scale)
    if spec.has_aux:
        better = _objective_value(spec, x) <= _objective_value(spec, PortfolioWeights.project(state.x).weights) + 1e-9 * max(1.0, spec.scale)
    if rep.worst_violation <= spec.feasibility_tolerance() and better:
        flags.append("threshold-newton")
        return out.state, iters, out.residual
    return state, iters, res


def _stuck_at_floor(spec: ProblemSpec, state: KktState) -> list[int]:
    floor = essinf(spec.benchmark)
    tol = 1e-9 * max(1.0, spec.scale)
    return [i for i, c in enumerate(state.cuts) if c.kind == "root" and state.t[i] <= floor + tol]


def _repin(state: KktState, idx: Sequence[int], floor: float) -> KktState:
    out = state.copy()
    cuts = list(out.cuts)
    for i in idx:
        cuts[i] = Cut("pinned", floor)
        out.t[i] = floor
    out.cuts = tuple(cuts)
    return out


def _check_order(spec: ProblemSpec) -> None:
    if not spec.order.is_infinite and spec.order.p < 2:
        raise UnsupportedOrderError("optimization needs an order p >= 2 (second-order dominance or higher)")


def solve(spec: ProblemSpec, x0: PortfolioWeights | np.ndarray | None = None, cuts: Sequence[Cut] = ()) -> SolveReport:
    """Solve the dominance-constrained problem from ``x0`` (default: uniform).

    Cuts are grown from ``cuts`` (empty by default) until the final point
    verifies; cuts with zero multiplier are dropped from the report, which
    leaves a minimal set that certifies optimality.
    """
    _check_order(spec)
    if spec.order.p == 2:
        return solve_ssd(spec, x0, cuts)
    w = x0.weights if isinstance(x0, PortfolioWeights) else x0
    return _solve_cuts(spec, _initial_state(spec, w, cuts))


def solve_ssd(spec: ProblemSpec, x0: PortfolioWeights | np.ndarray | None = None, cuts: Sequence[Cut] = ()) -> SolveReport:
    """Second-order case: cuts live on the benchmark outcomes only."""
    if spec.order.is_infinite or spec.order.p != 2:
        raise UnsupportedOrderError("solve_ssd handles order 2 only")
    w = x0.weights if isinstance(x0, PortfolioWeights) else x0
    cuts = [Cut("fixed", c.t) for c in cuts if c.kind in THRESHOLD_KINDS]
    cuts = [c for c in cuts if np.any(np.isclose(spec.benchmark.support(), c.t, rtol=0, atol=1e-12))]
    return _solve_cuts(spec, _initial_state(spec, w, list(dict.fromkeys(cuts))))


def refine_positivity(report: SolveReport, spec: ProblemSpec) -> SolveReport:
    """Add cuts where the gap of ``report``'s portfolio is still positive and re-solve.

    Identity when the portfolio already verifies. At most ``spec.max_rounds``
    rounds are run on top of the report's own.
    """
    _check_order(spec)
    new, moves = _new_cuts(spec, report.state, report.state.x)
    if not new and not moves:
        return report
    state = _with_cuts(_apply_moves(report.state, moves), new, spec)
    spec_r = replace(spec, max_rounds=report.refinement_rounds + spec.max_rounds)
    return _solve_cuts(spec_r, state, report.iterations, report.refinement_rounds + 1, report.flags)


def _seed_kind(order: Order, t: float, spec: ProblemSpec) -> str:
    if order.p == 2:
        return "fixed"
    return "pinned" if t == essinf(spec.benchmark) else "root"


def order_sweep(spec: ProblemSpec, orders: Sequence[Order | float | str]) -> list[SolveReport]:
    """Solve for each order in ascending sequence, warm-starting from the previous optimum."""
    parsed = [o if isinstance(o, Order) else Order.parse(o) for o in orders]
    if not parsed:
        raise InvalidInputError("need at least one order")
    if any(b.p < a.p for a, b in zip(parsed, parsed[1:])):
        raise InvalidInputError("orders must be sorted ascending")
    reports: list[SolveReport] = []
    prev: SolveReport | None = None
    for o in parsed:
        if prev is not None and o == Order.parse(prev.order):
            # a repeated order is the same problem: reuse its report
            reports.append(prev)
            continue
        sub = replace(spec, order=o)
        x0, seeds = None, ()
        if prev is not None and prev.converged:
            x0 = prev.state.x
            if not o.is_infinite:
                seeds = tuple(
                    Cut(_seed_kind(o, float(t), sub), float(t))
                    for c, t in zip(prev.state.cuts, prev.state.t)
                    if c.kind in THRESHOLD_KINDS
                )
        try:
            rep = solve(sub, x0, seeds)
        except (InvalidInputError, np.linalg.LinAlgError) as exc:
            rep = SolveReport(
                _initial_state(sub, None, ()), math.nan, 0, [], 0, False, str(o), sub.scenarios.asset_names, flags=[str(exc)]
            )
        reports.append(rep)
        prev = rep
    return reports


# --------------------------------------------------------------------------
# reduced constraint in moment form


@dataclass(frozen=True)
class GbarValue:
    value: float
    t_star: float
    roots: tuple[float, ...]
    no_root: bool = False


def _gap_exponent(spec: ProblemSpec) -> float:
    if spec.order.is_infinite or spec.order.p <= 2:
        raise UnsupportedOrderError("gbar needs a finite order above 2; second order is solved on jump points")
    return spec.order.norm_exponent()


def _moment_gap(y: ScenarioVector, bench: ScenarioVector, t, e: float) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=float))
    return upm_values(y.outcomes, y.probabilities, t, e) - upm_values(bench.outcomes, bench.probabilities, t, e)


def gbar(x: PortfolioWeights | np.ndarray, spec: ProblemSpec) -> GbarValue:
    """``max g_p(t, x)`` over the roots ``t`` of ``g_{p-1}(., x)`` in the benchmark range.

    ``g_p(t, x) = E(t - x'xi)_+^p - E(t - xi_0)_+^p`` with ``p`` the gap
    exponent (order minus one). Roots are found by scanning a grid that
    includes every outcome (the kinks) and bisecting each sign change;
    sub-intervals on which ``g_{p-1}`` vanishes contribute their endpoints.
    """
    e = _gap_exponent(spec)
    w = x.weights if isinstance(x, PortfolioWeights) else np.asarray(x, dtype=float)
    y = ScenarioVector(spec.scenarios.returns @ w, spec.scenarios.probabilities)
    bench = spec.benchmark
    lo, hi = essinf(bench), esssup(bench)
    if hi == lo:
        g = float(_moment_gap(y, bench, lo, e)[0])
        return GbarValue(g, lo, (), True)
    inner = np.concatenate([y.support(), bench.support()])
    grid = np.unique(np.concatenate([np.linspace(lo, hi, SCAN_POINTS), inner[(inner > lo) & (inner < hi)]]))
    f = lambda s: _moment_gap(y, bench, s, e - 1.0)  # noqa: E731
    vals = f(grid)
    roots: list[float] = [float(t) for t, v in zip(grid, vals) if v == 0.0]
    sgn = np.sign(vals)
    for i in np.flatnonzero(sgn[:-1] * sgn[1:] < 0):
        a, b = grid[i], grid[i + 1]
        fa = vals[i]
        for _ in range(200):
            m = 0.5 * (a + b)
            fm = f(m)[0]
            if fm == 0 or b - a <= 1e-13 * (hi - lo):
                a = b = m
                break
            if np.sign(fm) == np.sign(fa):
                a, fa = m, fm
            else:
                b = m
        roots.append(0.5 * (a + b))
    if not roots:
        ends = _moment_gap(y, bench, [lo, hi], e)
        k = int(np.argmax(ends))
        return GbarValue(float(ends[k]), (lo, hi)[k], (), True)
    roots = sorted(set(roots))
    g = _moment_gap(y, bench, roots, e)
    k = int(np.argmax(g))
    return GbarValue(float(g[k]), roots[k], tuple(roots))


def _weighted_upm(xi: np.ndarray, p: np.ndarray, y: np.ndarray, t: float, e: float) -> np.ndarray:
    # E((t - y)_+^e xi), with 0^0 = 0
    u = t - y
    if e == 0:
        w = (u > 0).astype(float)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(u > 0, np.where(u > 0, u, 1.0) ** e, 0.0)
    return xi.T @ (p * w)


def gbar_gradient(
    x: PortfolioWeights | np.ndarray, t_star: float, spec: ProblemSpec, info: dict | None = None
) -> np.ndarray:
    """Implicit-function gradient of ``gbar`` at ``x`` with its root ``t_star``.

    ``grad = grad_x g_p - (dg_p/dt) grad_x g_{p-1} / (dg_{p-1}/dt)``. At an
    exact root ``dg_p/dt = p g_{p-1}`` vanishes, so the correction is tiny;
    it is kept anyway. A near-singular denominator falls back to central
    finite differences of :func:`gbar`, recorded as ``info["fallback"]``.
    """
    e = _gap_exponent(spec)
    w = x.weights if isinstance(x, PortfolioWeights) else np.asarray(x, dtype=float)
    xi = spec.scenarios.returns
    p = spec.scenarios.probabilities
    y = xi @ w
    yv = ScenarioVector(y, p)
    bench = spec.benchmark
    t = float(t_star)
    grad_p = -e * _weighted_upm(xi, p, y, t, e - 1.0)
    grad_p1 = -(e - 1.0) * _weighted_upm(xi, p, y, t, e - 2.0) if e > 1 else np.zeros_like(w)
    dgp_dt = e * float(_moment_gap(yv, bench, t, e - 1.0)[0])
    dgp1_dt = (e - 1.0) * _neg_moment_gap(y, p, bench, t, e - 2.0)
    if info is not None:
        info["fallback"] = False
    if abs(dgp1_dt) < 1e-10 * max(1.0, spec.scale ** (e - 2.0)):
        if info is not None:
            info["fallback"] = True
        return _fd_gbar_gradient(w, spec)
    return grad_p - dgp_dt * grad_p1 / dgp1_dt


def _neg_moment_gap(y: np.ndarray, p: np.ndarray, bench: ScenarioVector, t: float, e: float) -> float:
    # E(t - Y)^e 1{Y < t} - same for the benchmark, valid for negative e too
    def part(v, w):
        u = t - v
        if e == 0:
            return float(w @ (u > 0))
        with np.errstate(divide="ignore", invalid="ignore"):
            return float(w @ np.where(u > 0, np.where(u > 0, u, 1.0) ** e, 0.0))

    return part(y, p) - part(bench.outcomes, bench.probabilities)


def _fd_gbar_gradient(w: np.ndarray, spec: ProblemSpec, h: float = 1e-6) -> np.ndarray:
    g = np.empty_like(w)
    for j in range(w.size):
        e = np.zeros_like(w)
        e[j] = h
        g[j] = (gbar(w + e, spec).value - gbar(w - e, spec).value) / (2 * h)
    return g
