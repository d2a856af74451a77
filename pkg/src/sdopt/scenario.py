"""Discrete random variables, portfolios and partial-moment primitives.

Every random variable in the package is a finite scenario set: outcomes with
probabilities. Returns are kept in whatever unit the data came in (the
embedded appendix tables are in percent); nothing here rescales.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from sdopt.errors import DimensionError, InvalidInputError, InvalidOrderError

PROB_TOL = 1e-12
SIMPLEX_TOL = 1e-9


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def _check_probabilities(probs: np.ndarray, n: int) -> None:
    if probs.shape != (n,):
        raise DimensionError(f"expected {n} probabilities, got shape {probs.shape}")
    if not np.all(np.isfinite(probs)):
        raise InvalidInputError("probabilities must be finite")
    if np.any(probs < 0):
        raise InvalidInputError("probabilities must be nonnegative")
    if abs(probs.sum() - 1.0) > PROB_TOL * max(1, n):
        raise InvalidInputError(f"probabilities sum to {probs.sum()!r}, not 1")


@dataclass(frozen=True)
class ScenarioVector:
    """A discrete random variable given by its outcomes and probabilities.

    ``probabilities`` defaults to the uniform (empirical) measure.
    """

    outcomes: np.ndarray
    probabilities: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        x = np.atleast_1d(np.asarray(self.outcomes, dtype=float))
        if x.ndim != 1 or x.size == 0:
            raise InvalidInputError("outcomes must be a non-empty 1-d sequence")
        if not np.all(np.isfinite(x)):
            raise InvalidInputError("outcomes must be finite")
        if self.probabilities is None:
            p = np.full(x.size, 1.0 / x.size)
        else:
            p = np.atleast_1d(np.asarray(self.probabilities, dtype=float))
        _check_probabilities(p, x.size)
        object.__setattr__(self, "outcomes", _frozen(x))
        object.__setattr__(self, "probabilities", _frozen(p))

    def __len__(self) -> int:
        return self.outcomes.size

    @property
    def n(self) -> int:
        return self.outcomes.size

    def mean(self) -> float:
        return float(self.probabilities @ self.outcomes)

    def shift(self, c: float) -> "ScenarioVector":
        return ScenarioVector(self.outcomes + c, self.probabilities)

    def scale(self, lam: float) -> "ScenarioVector":
        return ScenarioVector(self.outcomes * lam, self.probabilities)

    def __neg__(self) -> "ScenarioVector":
        return ScenarioVector(-self.outcomes, self.probabilities)

    def support(self) -> np.ndarray:
        """Outcomes carrying positive probability."""
        return self.outcomes[self.probabilities > 0]


@dataclass(frozen=True)
class ScenarioMatrix:
    """An ``n x d`` scenario table: rows are scenarios, columns assets."""

    returns: np.ndarray
    asset_names: tuple[str, ...] = None  # type: ignore[assignment]
    probabilities: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self) -> None:
        r = np.asarray(self.returns, dtype=float)
        if r.ndim == 1:
            r = r[:, None]
        if r.ndim != 2 or r.shape[0] == 0 or r.shape[1] == 0:
            raise InvalidInputError("returns must be a non-empty n x d matrix")
        if not np.all(np.isfinite(r)):
            raise InvalidInputError("returns must be finite")
        n, d = r.shape
        names = self.asset_names
        if names is None:
            names = tuple(f"asset {j + 1}" for j in range(d))
        names = tuple(str(s) for s in names)
        if len(names) != d:
            raise DimensionError(f"{len(names)} asset names for {d} columns")
        p = np.full(n, 1.0 / n) if self.probabilities is None else np.asarray(self.probabilities, dtype=float)
        _check_probabilities(p, n)
        object.__setattr__(self, "returns", _frozen(r))
        object.__setattr__(self, "asset_names", names)
        object.__setattr__(self, "probabilities", _frozen(p))

    @property
    def n(self) -> int:
        return self.returns.shape[0]

    @property
    def d(self) -> int:
        return self.returns.shape[1]

    def column(self, j: int | str) -> ScenarioVector:
        if isinstance(j, str):
            j = self.asset_names.index(j)
        return ScenarioVector(self.returns[:, j], self.probabilities)

    def mean_returns(self) -> np.ndarray:
        return self.probabilities @ self.returns


@dataclass(frozen=True)
class PortfolioWeights:
    """Long-only, fully invested weights (a point of the simplex)."""

    weights: np.ndarray

    def __post_init__(self) -> None:
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if w.ndim != 1 or w.size == 0 or not np.all(np.isfinite(w)):
            raise InvalidInputError("weights must be a non-empty finite vector")
        if abs(w.sum() - 1.0) > SIMPLEX_TOL:
            raise InvalidInputError(f"weights sum to {w.sum()!r}, not 1")
        if np.any(w < -SIMPLEX_TOL):
            raise InvalidInputError("weights must be nonnegative")
        object.__setattr__(self, "weights", _frozen(w))

    @classmethod
    def uniform(cls, d: int) -> "PortfolioWeights":
        return cls(np.full(d, 1.0 / d))

    @classmethod
    def project(cls, w: Sequence[float]) -> "PortfolioWeights":
        """Clip negatives and renormalize; for nearly-feasible solver output."""
        w = np.clip(np.asarray(w, dtype=float), 0.0, None)
        s = w.sum()
        if s <= 0:
            raise InvalidInputError("cannot project a nonpositive weight vector")
        return cls(w / s)

    def __len__(self) -> int:
        return self.weights.size


@dataclass(frozen=True)
class Order:
    """Stochastic dominance order ``p`` in ``[1, inf]``.

    Dominance of order ``p`` compares partial moments of exponent ``p - 1``
    (equivalently Lebesgue norms of that index), so order 2 is second-order
    dominance and order 3 third-order dominance.
    """

    p: float

    def __post_init__(self) -> None:
        p = float(self.p)
        if math.isnan(p) or p < 1:
            raise InvalidOrderError(f"order must be >= 1, got {self.p!r}")
        object.__setattr__(self, "p", p)

    @classmethod
    def parse(cls, text: str | float) -> "Order":
        if isinstance(text, str) and text.strip().lower() in {"inf", "infinity", "oo"}:
            return cls(math.inf)
        return cls(float(text))

    @property
    def is_infinite(self) -> bool:
        return math.isinf(self.p)

    def norm_exponent(self) -> float:
        """Exponent of the partial moments (norm index) compared at this order."""
        return self.p - 1.0

    def __str__(self) -> str:
        if self.is_infinite:
            return "inf"
        return f"{self.p:g}"


def _as_t(t: float | np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(t)):
        raise InvalidInputError("threshold t must be finite")
    return t


def positive_part_power(u: np.ndarray, q: float) -> np.ndarray:
    """``max(0, u)**q`` elementwise with the convention ``0**0 = 0``."""
    up = np.maximum(u, 0.0)
    if q == 0:
        return (up > 0).astype(float)
    if q == 1:
        return up
    if q == 0.5:
        return np.sqrt(up)
    if q == int(q) and q <= 8:
        out = up.copy()
        for _ in range(int(q) - 1):
            out *= up
        return out
    return up**q


def upm_values(outcomes: np.ndarray, probs: np.ndarray, t: np.ndarray, q: float) -> np.ndarray:
    """Vectorized ``E(t - X)_+^q`` for an array of thresholds."""
    t = np.asarray(t, dtype=float)
    diff = t[..., None] - outcomes
    return positive_part_power(diff, q) @ probs


def upper_partial_moment(v: ScenarioVector, t: float, q: float) -> float:
    """Return ``E(t - X)_+^q``; with ``q = 0`` this is ``P(X < t)``."""
    if not (q >= 0) or math.isinf(q):
        raise InvalidOrderError(f"moment exponent must be finite and >= 0, got {q!r}")
    t = _as_t(t)
    out = upm_values(v.outcomes, v.probabilities, t, q)
    return out.item() if t.ndim == 0 else out


def norm_values(outcomes: np.ndarray, probs: np.ndarray, t: np.ndarray, q: float) -> np.ndarray:
    """``||(t - X)_+||_q`` for any ``q > 0`` (a quasi-norm below 1) or ``q = inf``."""
    t = np.asarray(t, dtype=float)
    if math.isinf(q):
        lo = outcomes[probs > 0].min()
        return np.maximum(t - lo, 0.0)
    m = upm_values(outcomes, probs, t, q)
    return m if q == 1 else m ** (1.0 / q)


def partial_moment_norm(v: ScenarioVector, t: float, q: float) -> float:
    """Return ``(E(t - X)_+^q)^(1/q)``, or ``max(0, t - essinf X)`` for ``q = inf``."""
    if not (q >= 1):
        raise InvalidOrderError(f"norm index must be >= 1 or inf, got {q!r}")
    t = _as_t(t)
    out = norm_values(v.outcomes, v.probabilities, t, q)
    return out.item() if t.ndim == 0 else out


def norm_derivative_values(outcomes: np.ndarray, probs: np.ndarray, t: np.ndarray, q: float) -> np.ndarray:
    """Left-continuous selection of ``d/dt ||(t - X)_+||_q`` for finite ``q > 0``.

    For ``q = 1`` this is the strict distribution function ``P(X < t)``.
    """
    t = np.asarray(t, dtype=float)
    if q == 1:
        return upm_values(outcomes, probs, t, 0.0)
    m_q = upm_values(outcomes, probs, t, q)
    m_q1 = upm_values(outcomes, probs, t, q - 1.0) if q > 1 else _upm_negative(outcomes, probs, t, q - 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = m_q1 * np.where(m_q > 0, m_q, 1.0) ** (1.0 / q - 1.0)
    return np.where(m_q > 0, d, 0.0)


def _upm_negative(outcomes: np.ndarray, probs: np.ndarray, t: np.ndarray, e: float) -> np.ndarray:
    # E (t-X)^e over t > X only, for e < 0
    diff = np.asarray(t, dtype=float)[..., None] - outcomes
    with np.errstate(divide="ignore"):
        vals = np.where(diff > 0, np.where(diff > 0, diff, 1.0) ** e, 0.0)
    return vals @ probs


def portfolio_returns(m: ScenarioMatrix, x: PortfolioWeights | np.ndarray) -> ScenarioVector:
    """Scenario returns ``x^T xi`` of a portfolio."""
    w = x.weights if isinstance(x, PortfolioWeights) else np.asarray(x, dtype=float)
    if w.shape != (m.d,):
        raise DimensionError(f"{w.size} weights for {m.d} assets")
    return ScenarioVector(m.returns @ w, m.probabilities)


def equal_weight_benchmark(m: ScenarioMatrix) -> ScenarioVector:
    """The ``1/d`` portfolio, used as benchmark throughout the experiments."""
    return portfolio_returns(m, PortfolioWeights.uniform(m.d))


def essinf(v: ScenarioVector) -> float:
    return float(v.support().min())


def esssup(v: ScenarioVector) -> float:
    return float(v.support().max())
