import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from misalloc.core import (
    Allocation,
    DomainError,
    FeasibleSet,
    InfeasibleError,
    LinearAnchored,
    MarketSpec,
    PiecewiseAffine,
    Tag,
    TruncatedHill,
    caps_at_ceiling,
    consumer_surplus,
    eval_inverse_demand,
    generalized_inverse,
    gross_surplus,
)

slopes = st.floats(-6.0, -0.2)
unit = st.floats(0.05, 3.0)


@st.composite
def curves(draw):
    kind = draw(st.sampled_from(["linear", "hill", "pwa"]))
    if kind == "linear":
        return LinearAnchored(draw(unit), draw(unit), draw(slopes))
    if kind == "hill":
        return TruncatedHill(draw(st.floats(1.0, 6.0)), draw(st.floats(0.3, 3.0)), draw(st.floats(1.0, 4.0)), 10.0)
    k = draw(st.integers(1, 5))
    dq = draw(st.lists(st.floats(0.05, 1.0), min_size=k, max_size=k))
    drops = draw(st.lists(st.floats(0.05, 1.0), min_size=k, max_size=k))
    q = np.concatenate([[0.0], np.cumsum(dq)])
    p = np.concatenate([[0.0], np.cumsum(drops)])[::-1]
    return PiecewiseAffine(tuple(zip(q, p)))


# ---------------------------------------------------------------- examples


def test_linear_anchor_and_intercept():
    c = LinearAnchored(1.0, 1.0, -5.0)
    assert eval_inverse_demand(c, 1.0) == 1.0
    assert c.intercept == pytest.approx(6.0)
    assert c.q_max == pytest.approx(1.2)


def test_hill_choke_at_zero():
    assert eval_inverse_demand(TruncatedHill(4.0, 1.0, 2.0), 0.0) == 4.0


def test_piecewise_midpoint():
    assert eval_inverse_demand(PiecewiseAffine(((0, 3), (1, 1))), 0.5) == pytest.approx(2.0)


def test_inverse_examples():
    assert generalized_inverse(LinearAnchored(1, 1, -5), 1.0) == pytest.approx(1.0)
    pwa = PiecewiseAffine(((0, 3), (1, 1)))
    assert generalized_inverse(pwa, 2.0) == pytest.approx(0.5)
    for c in (pwa, LinearAnchored(1, 1, -5), TruncatedHill(4.0, 1.0, 2.0)):
        assert generalized_inverse(c, c.choke) == 0.0
        assert generalized_inverse(c, c.choke + 1.0) == 0.0


def test_inverse_flat_segment_is_left_continuous():
    c = PiecewiseAffine(((0, 2), (1, 1), (2, 1), (3, 0)))
    assert generalized_inverse(c, 1.0) == pytest.approx(1.0)
    assert generalized_inverse(c, 1.0 - 1e-9) == pytest.approx(2.0, abs=1e-6)


def test_inverse_above_range_returns_q_max():
    c = PiecewiseAffine(((0, 3), (1, 1)))
    assert generalized_inverse(c, 0.5) == 1.0


def test_gross_surplus_examples():
    c = LinearAnchored(1, 1, -1)
    assert gross_surplus(c, 0, 1) == pytest.approx(1.5)
    assert gross_surplus(c, 0.4, 0.4) == 0.0
    assert gross_surplus(c, 1, 0) == pytest.approx(-1.5)
    assert gross_surplus(TruncatedHill(4.0, 1.0, 2.0), 0, 1) == pytest.approx(math.pi, abs=1e-10)


def test_consumer_surplus_examples():
    c = LinearAnchored(1, 1, -1)
    assert consumer_surplus(c, 0.0, 0.8) == 0.0
    assert consumer_surplus(c, 1.0, 1.0) == pytest.approx(0.5)
    assert consumer_surplus(c, 1.0, 0.8) == pytest.approx(0.7)


def test_out_of_range_limits_raise():
    c = LinearAnchored(1, 1, -1)
    with pytest.raises(DomainError):
        gross_surplus(c, 0.0, c.q_max + 1.0)
    with pytest.raises(DomainError):
        eval_inverse_demand(c, -0.5)


@pytest.mark.parametrize(
    "knots",
    [((0.5, 1.0), (1.0, 0.5)), ((0, 1), (1, 2)), ((0, 1), (0, 0.5)), ((0, 1), (1, -0.5))],
)
def test_piecewise_validation(knots):
    with pytest.raises(DomainError):
        PiecewiseAffine(knots)


def test_feasible_set_rejects_nonbinding():
    with pytest.raises(InfeasibleError):
        FeasibleSet([1.0, 1.0], 2.0)
    with pytest.raises(InfeasibleError):
        FeasibleSet([1.0, 1.0], 0.0)


def test_allocation_tags():
    fs = FeasibleSet([1.0, 2.0, 3.0], 2.5)
    a = Allocation.build([1.0, 1.5, 0.0], fs)
    assert a.classification == (Tag.AT_CAP, Tag.INTERIOR, Tag.AT_ZERO)
    assert a.is_vertex
    with pytest.raises(InfeasibleError):
        Allocation.build([1.0, 1.0, 0.0], fs)


def test_caps_at_ceiling_linear():
    ms = [MarketSpec(LinearAnchored(1, 1, -5)), MarketSpec(LinearAnchored(0, 3, -2))]
    assert caps_at_ceiling(ms, 0.8) == pytest.approx([1.04, 1.1])


# -------------------------------------------------------------- properties


@settings(max_examples=300, deadline=None)
@given(curves(), st.floats(0, 1), st.floats(0, 1))
def test_inverse_demand_monotone(c, u, v):
    q1, q2 = sorted((u * c.q_max, v * c.q_max))
    assert eval_inverse_demand(c, q1) >= eval_inverse_demand(c, q2) - 1e-12


@settings(max_examples=300, deadline=None)
@given(curves(), st.floats(0.01, 0.99))
def test_inverse_consistency(c, u):
    p = c.price(u * c.q_max)
    q = generalized_inverse(c, p)
    if 0 < q < c.q_max:
        assert abs(c.price(q) - p) <= 1e-8


@settings(max_examples=200, deadline=None)
@given(curves(), st.floats(0.01, 3.0), st.floats(0.01, 3.0))
def test_generalized_inverse_nonincreasing(c, p1, p2):
    lo, hi = sorted((p1, p2))
    assert generalized_inverse(c, lo) >= generalized_inverse(c, hi) - 1e-12


@settings(max_examples=300, deadline=None)
@given(curves(), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_surplus_additivity(c, x, y, z):
    a, b, d = x * c.q_max, y * c.q_max, z * c.q_max
    assert gross_surplus(c, a, d) == pytest.approx(gross_surplus(c, a, b) + gross_surplus(c, b, d), abs=1e-9)


def test_hill_quadrature_matches_arctan():
    rng = np.random.default_rng(0)
    for _ in range(100):
        M, s = rng.uniform(1, 6), rng.uniform(0.3, 3)
        c = TruncatedHill(M, s, 2.0)
        a, b = rng.uniform(0, 10, 2)
        exact = M * s * (math.atan(b / s) - math.atan(a / s))
        assert gross_surplus(c, a, b) == pytest.approx(exact, abs=1e-8)


def test_surplus_matches_numerical_integration():
    rng = np.random.default_rng(1)
    for c in (TruncatedHill(3.0, 1.3, 3.5, 8.0), PiecewiseAffine(((0, 3), (0.4, 2), (1.5, 1.9), (3, 0)))):
        for _ in range(20):
            a, b = rng.uniform(0, c.q_max, 2)
            ref, _ = integrate.quad(lambda x: c.price(x), a, b, epsabs=1e-12, points=[0.4, 1.5])
            assert gross_surplus(c, a, b) == pytest.approx(ref, abs=1e-9)
