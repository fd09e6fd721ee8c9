"""Demand curves, surplus integrals and the feasible allocation polytope.

Prices and quantities are dimensionless: the pre-shortage baseline has
price 1 and aggregate quantity 1.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import integrate, special

ROOT_TOL = 1e-10
SUM_TOL = 1e-9
QUAD_TOL = 1e-10


class MisallocError(Exception):
    """Base class; ``code`` is the CLI exit status."""

    code = 2


class DomainError(MisallocError, ValueError):
    pass


class InfeasibleError(MisallocError, ValueError):
    pass


class TieError(MisallocError, ValueError):
    pass


class DegenerateError(MisallocError, ValueError):
    pass


class ConvergenceError(MisallocError, RuntimeError):
    code = 3


def _check_domain(q, q_max, name="q"):
    if not (-SUM_TOL <= q <= q_max + SUM_TOL) or math.isnan(q):
        raise DomainError(f"{name}={q!r} outside [0, {q_max!r}]")
    return min(max(q, 0.0), q_max)


class DemandCurve:
    """Inverse demand P(q) on [0, q_max], continuous and nonincreasing."""

    q_max: float

    def price(self, q: float) -> float:
        return float(self.price_array(np.asarray(_check_domain(q, self.q_max))))

    def price_array(self, q: np.ndarray) -> np.ndarray:  # no domain check
        raise NotImplementedError

    def quantity(self, p: float) -> float:
        """Left-continuous generalized inverse inf{x : P(x) <= p}, else q_max."""
        raise NotImplementedError

    def antiderivative(self, q: np.ndarray) -> np.ndarray:
        """Vectorized ∫_0^q P, used where many evaluations are needed."""
        raise NotImplementedError

    def integral(self, a: float, b: float) -> float:
        a = _check_domain(a, self.q_max, "a")
        b = _check_domain(b, self.q_max, "b")
        if a == b:
            return 0.0
        v = self.antiderivative(np.array([a, b]))
        return float(v[1] - v[0])

    @property
    def choke(self) -> float:
        return self.price(0.0)


@dataclass(frozen=True)
class LinearAnchored(DemandCurve):
    """Line through (anchor_q, anchor_p) with slope g < 0.

    ``q_max`` defaults to the quantity where the line reaches zero price.
    """

    anchor_q: float
    anchor_p: float
    slope: float
    q_max: float = None  # type: ignore[assignment]

    def __post_init__(self):
        if not self.slope < 0:
            raise DomainError("linear demand needs slope < 0")
        zero = self.anchor_q - self.anchor_p / self.slope
        if zero <= 0:
            raise DomainError("linear demand has no positive-price region")
        qm = zero if self.q_max is None else float(self.q_max)
        if not 0 < qm <= zero * (1 + 1e-12):
            raise DomainError(f"q_max={qm} must lie in (0, {zero}]")
        object.__setattr__(self, "q_max", min(qm, zero))

    @property
    def intercept(self) -> float:
        return self.anchor_p - self.slope * self.anchor_q

    def price_array(self, q):
        return np.maximum(self.intercept + self.slope * np.asarray(q, float), 0.0)

    def quantity(self, p):
        if p >= self.intercept:
            return 0.0
        return float(min((p - self.intercept) / self.slope, self.q_max))

    def antiderivative(self, q):
        q = np.asarray(q, float)
        return self.intercept * q + 0.5 * self.slope * q * q


@dataclass(frozen=True)
class TruncatedHill(DemandCurve):
    """Sigmoidal demand P(q) = M s^h / (s^h + q^h) with finite choke M."""

    choke_price: float
    scale: float
    exponent: float = 2.0
    q_max: float = math.inf

    def __post_init__(self):
        if not (self.choke_price > 0 and self.scale > 0 and self.exponent >= 1):
            raise DomainError("Hill demand needs M > 0, s > 0, h >= 1")
        if not self.q_max > 0:
            raise DomainError("q_max must be positive")

    def price_array(self, q):
        z = (np.asarray(q, float) / self.scale) ** self.exponent
        return self.choke_price / (1.0 + z)

    def quantity(self, p):
        if p >= self.choke_price:
            return 0.0
        if p <= 0:
            return self.q_max
        q = self.scale * (self.choke_price / p - 1.0) ** (1.0 / self.exponent)
        return float(min(q, self.q_max))

    def quantity_array(self, p):
        p = np.asarray(p, float)
        with np.errstate(divide="ignore", invalid="ignore"):
            q = self.scale * np.maximum(self.choke_price / p - 1.0, 0.0) ** (1.0 / self.exponent)
        q = np.where(p <= 0, self.q_max, q)
        return np.minimum(q, self.q_max)

    def antiderivative(self, q):
        # M q 2F1(1, 1/h; 1 + 1/h; -(q/s)^h), exact for any h
        q = np.asarray(q, float)
        h = self.exponent
        z = -((q / self.scale) ** h)
        return self.choke_price * q * special.hyp2f1(1.0, 1.0 / h, 1.0 + 1.0 / h, z)

    def integral(self, a, b):
        a = _check_domain(a, self.q_max, "a")
        b = _check_domain(b, self.q_max, "b")
        if a == b:
            return 0.0
        lo, hi = min(a, b), max(a, b)
        val, _ = integrate.quad(
            lambda x: float(self.price_array(x)), lo, hi, epsabs=QUAD_TOL * 1e-2, epsrel=1e-13, limit=200
        )
        return val if b > a else -val


@dataclass(frozen=True)
class PiecewiseAffine(DemandCurve):
    """Continuous piecewise-linear inverse demand through ordered knots.

    The domain is [0, last knot]; a first knot at q > 0 is rejected.
    """

    knots: tuple

    q_max: float = field(init=False)
    _q: np.ndarray = field(init=False, repr=False, compare=False)
    _p: np.ndarray = field(init=False, repr=False, compare=False)
    _cum: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        pts = tuple((float(q), float(p)) for q, p in self.knots)
        if len(pts) < 2:
            raise DomainError("need at least two knots")
        q = np.array([k[0] for k in pts])
        p = np.array([k[1] for k in pts])
        if q[0] != 0.0:
            raise DomainError("first knot must be at q = 0")
        if np.any(np.diff(q) <= 0):
            raise DomainError("knot quantities must be strictly increasing")
        if np.any(np.diff(p) > 0):
            raise DomainError("knot prices must be nonincreasing")
        if p[-1] < -SUM_TOL:
            raise DomainError("negative price at the last knot")
        cum = np.concatenate([[0.0], np.cumsum(0.5 * (p[1:] + p[:-1]) * np.diff(q))])
        object.__setattr__(self, "knots", pts)
        object.__setattr__(self, "q_max", float(q[-1]))
        object.__setattr__(self, "_q", q)
        object.__setattr__(self, "_p", p)
        object.__setattr__(self, "_cum", cum)

    @property
    def slopes(self) -> np.ndarray:
        return np.diff(self._p) / np.diff(self._q)

    def price_array(self, q):
        return np.interp(np.asarray(q, float), self._q, self._p)

    def quantity(self, p):
        qs, ps = self._q, self._p
        if p >= ps[0]:
            return 0.0
        if p < ps[-1]:
            return self.q_max
        k = int(np.argmax(ps <= p))  # first knot at or below p
        p0, p1 = ps[k - 1], ps[k]
        return float(qs[k - 1] + (p - p0) * (qs[k] - qs[k - 1]) / (p1 - p0))

    def antiderivative(self, q):
        q = np.asarray(q, float)
        k = np.clip(np.searchsorted(self._q, q, side="right") - 1, 0, len(self._q) - 2)
        pk = self._p[k]
        return self._cum[k] + 0.5 * (pk + self.price_array(q)) * (q - self._q[k])


def eval_inverse_demand(curve: DemandCurve, q: float) -> float:
    return curve.price(q)


def generalized_inverse(curve: DemandCurve, p: float) -> float:
    if p < 0:
        raise DomainError("price must be nonnegative")
    return curve.quantity(p)


def gross_surplus(curve: DemandCurve, a: float, b: float) -> float:
    return curve.integral(a, b)


def consumer_surplus(curve: DemandCurve, q: float, price_paid: float) -> float:
    return curve.integral(0.0, q) - price_paid * q


class Tag(enum.Enum):
    AT_ZERO = "AtZero"
    INTERIOR = "Interior"
    AT_CAP = "AtCap"


@dataclass(frozen=True)
class FeasibleSet:
    """Box [0, caps] intersected with the hyperplane sum(q) = total."""

    caps: np.ndarray
    total: float

    def __post_init__(self):
        caps = np.array(self.caps, dtype=float).reshape(-1)
        caps.setflags(write=False)
        if caps.size == 0:
            raise InfeasibleError("no markets")
        if np.any(caps < 0) or np.any(np.isnan(caps)):
            raise InfeasibleError("caps must be nonnegative")
        total = float(self.total)
        if not 0 < total < caps.sum():
            raise InfeasibleError(f"need 0 < total < sum(caps); got total={total}, sum(caps)={caps.sum()}")
        object.__setattr__(self, "caps", caps)
        object.__setattr__(self, "total", total)

    @property
    def n(self) -> int:
        return self.caps.size


@dataclass(frozen=True)
class Allocation:
    quantities: np.ndarray
    classification: tuple

    @classmethod
    def build(cls, q, fs: FeasibleSet, tol: float = SUM_TOL) -> "Allocation":
        q = np.array(q, dtype=float).reshape(-1)
        if q.size != fs.n:
            raise InfeasibleError("allocation length mismatch")
        if abs(math.fsum(q) - fs.total) > tol:
            raise InfeasibleError(f"allocation sums to {math.fsum(q)}, expected {fs.total}")
        if np.any(q < -tol) or np.any(q > fs.caps + tol):
            raise InfeasibleError("allocation violates box constraints")
        q = np.clip(q, 0.0, fs.caps)
        q.setflags(write=False)
        tags = []
        for qi, cap in zip(q, fs.caps):
            if qi <= tol:
                tags.append(Tag.AT_ZERO)
            elif qi >= cap - tol:
                tags.append(Tag.AT_CAP)
            else:
                tags.append(Tag.INTERIOR)
        return cls(q, tuple(tags))

    @property
    def n_interior(self) -> int:
        return sum(t is Tag.INTERIOR for t in self.classification)

    @property
    def is_vertex(self) -> bool:
        return self.n_interior <= 1


@dataclass(frozen=True)
class MarketSpec:
    demand: DemandCurve
    unit_cost: float = 0.0
    q_max: float | None = None

    def __post_init__(self):
        if self.unit_cost < 0:
            raise DomainError("unit_cost must be nonnegative")
        qm = self.demand.q_max if self.q_max is None else float(self.q_max)
        if not qm > 0:
            raise DomainError("q_max must be positive")
        object.__setattr__(self, "q_max", min(qm, self.demand.q_max))


def caps_at_ceiling(markets: Sequence[MarketSpec], ceiling: float) -> np.ndarray:
    """Quantities demanded at the controlled price, q̄ᵢ = Dᵢ(p̄)."""
    return np.array([min(m.demand.quantity(ceiling), m.q_max) for m in markets])
