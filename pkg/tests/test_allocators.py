import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

import _gen
from misalloc import allocators as al
from misalloc.core import (
    DegenerateError,
    FeasibleSet,
    LinearAnchored,
    MarketSpec,
    PiecewiseAffine,
    Tag,
    TieError,
    gross_surplus,
)


def lin(a, b, c=0.0):
    """P(x) = a - b x."""
    return MarketSpec(LinearAnchored(0.0, a, -b), c)


TWO = [lin(3, 2), lin(2, 1)]
FS_TWO = FeasibleSet([1.0, 1.0], 1.0)


# ---------------------------------------------------------------- efficient


def test_efficient_symmetric_split():
    ms = [lin(2, 1), lin(2, 1)]
    alloc, p = al.efficient_allocation(ms, FeasibleSet([2, 2], 1.6))
    assert alloc.quantities == pytest.approx([0.8, 0.8])
    assert p == pytest.approx(1.2)


def test_efficient_two_linear_markets():
    alloc, p = al.efficient_allocation(TWO, FS_TWO)
    assert alloc.quantities == pytest.approx([2 / 3, 1 / 3], abs=1e-12)
    assert p == pytest.approx(5 / 3, abs=1e-12)
    # grid search cross-check of the surplus maximizer
    q1 = np.linspace(0, 1, 100001)
    W = 3 * q1 - q1**2 + 2 * (1 - q1) - (1 - q1) ** 2 / 2
    assert q1[np.argmax(W)] == pytest.approx(2 / 3, abs=1e-5)


def test_identical_markets_triangles_sum_to_aggregate():
    # two copies of P = 2 - q, baseline price 1 and quantity 1 each
    ms = [lin(2, 1), lin(2, 1)]
    fs = FeasibleSet([2, 2], 1.6)
    q, _ = al.efficient_allocation(ms, fs, 1.0)
    tri = [gross_surplus(m.demand, qi, 1.0) - 1.0 * (1.0 - qi) for m, qi in zip(ms, q.quantities)]
    assert tri[0] == pytest.approx(tri[1])
    agg = al.harberger_loss(LinearAnchored(2.0, 1.0, -0.5), 1.0, 2.0, 1.6)
    assert sum(tri) == pytest.approx(agg, abs=1e-12)
    assert al.misallocation_loss(ms, fs, q) == pytest.approx(0.0, abs=1e-12)


def test_misallocation_adds_to_aggregate_triangle():
    ms = [lin(2, 1), lin(2, 1)]
    fs = FeasibleSet([2, 2], 1.6)
    q = np.array([1.0, 0.6])
    tri = sum(gross_surplus(m.demand, qi, 1.0) - (1.0 - qi) for m, qi in zip(ms, q))
    agg = al.harberger_loss(LinearAnchored(2.0, 1.0, -0.5), 1.0, 2.0, 1.6)
    loss = al.misallocation_loss(ms, fs, q)
    assert loss > 0
    assert tri == pytest.approx(agg + loss, abs=1e-12)


def test_efficient_with_flat_segment_places_residual_mass():
    flat = MarketSpec(PiecewiseAffine(((0, 2), (1, 1), (2, 1), (3, 0))))
    other = lin(1.5, 1.0)
    fs = FeasibleSet([3.0, 1.5], 2.0)
    alloc, p = al.efficient_allocation([flat, other], fs)
    assert p == pytest.approx(1.0, abs=1e-9)
    assert math.fsum(alloc.quantities) == pytest.approx(2.0, abs=1e-12)
    assert alloc.quantities[1] == pytest.approx(0.5, abs=1e-9)


def test_efficient_hill_bisection_path():
    from misalloc.core import TruncatedHill

    ms = [MarketSpec(TruncatedHill(4.0, s, 2.0, 10.0)) for s in (1.0, 2.0, 3.0)]
    fs = FeasibleSet([3.0, 3.0, 3.0], 4.0)
    alloc, p = al.efficient_allocation(ms, fs)
    assert al.efficient_kkt_residual(ms, alloc, p, fs.caps) <= 1e-8
    for m, q in zip(ms, alloc.quantities):
        if 0 < q < 3:
            assert m.demand.price(q) == pytest.approx(p, abs=1e-8)


# ------------------------------------------------------------------- greedy


def test_greedy_examples():
    fs = FeasibleSet([5, 5, 5], 8)
    q = al.greedy_controlled_allocation([0.1, 0.2, 0.3], fs)
    assert q.quantities.tolist() == [5, 3, 0]
    assert q.classification == (Tag.AT_CAP, Tag.INTERIOR, Tag.AT_ZERO)
    q = al.greedy_controlled_allocation([0.3, 0.1], FeasibleSet([4, 4], 5))
    assert q.quantities.tolist() == [1, 4]


def test_greedy_tie_and_degenerate_errors():
    with pytest.raises(TieError):
        al.greedy_controlled_allocation([0.1, 0.1, 0.3], FeasibleSet([5, 5, 5], 8))
    q = al.greedy_controlled_allocation([0.1, 0.1, 0.3], FeasibleSet([5, 5, 5], 8), tie_break="index")
    assert q.quantities.tolist() == [5, 3, 0]
    with pytest.raises(DegenerateError):
        al.greedy_controlled_allocation([0.1, 0.2, 0.3], FeasibleSet([5, 5, 5], 10))


def test_oracle_examples():
    assert al.lp_vertex_oracle([0.1, 0.2, 0.3], FeasibleSet([5, 5, 5], 8)).quantities.tolist() == [5, 3, 0]
    assert al.lp_vertex_oracle([0.4], FeasibleSet([2.0], 1.0)).quantities.tolist() == [1.0]


def test_oracle_random_n6():
    rng = np.random.default_rng(6)
    for _ in range(20):
        c = rng.permutation(6) * 0.1 + rng.uniform(0, 0.05, 6)
        fs = _gen.random_feasible_set(rng, 6)
        assert np.array_equal(
            al.greedy_controlled_allocation(c, fs).quantities, al.lp_vertex_oracle(c, fs).quantities
        )


@settings(max_examples=200, deadline=None)
@given(
    st.integers(1, 8).flatmap(
        lambda n: st.tuples(
            st.lists(st.floats(0, 1), min_size=n, max_size=n, unique=True),
            st.lists(st.floats(0.1, 3), min_size=n, max_size=n),
            st.floats(0.05, 0.95),
        )
    )
)
def test_greedy_matches_oracle(data):
    costs, caps, frac = data
    costs = np.array(costs)
    assume(np.min(np.diff(np.sort(costs)), initial=1.0) > 1e-9)
    fs = FeasibleSet(caps, frac * sum(caps))
    prefix = np.cumsum(np.asarray(caps)[np.argsort(costs)])
    assume(np.min(np.abs(prefix - fs.total)) > 1e-9)
    g = al.greedy_controlled_allocation(costs, fs)
    assert g.n_interior <= 1
    assert np.array_equal(g.quantities, al.lp_vertex_oracle(costs, fs).quantities)


# --------------------------------------------------------------- worst case


def test_worst_two_market_example():
    w, lam = al.worst_case_allocation(TWO, FS_TWO)
    assert w.quantities.tolist() == [0.0, 1.0]
    assert al.gross_surplus_total(TWO, [0, 1]) == pytest.approx(1.5)
    assert al.gross_surplus_total(TWO, [1, 0]) == pytest.approx(2.0)
    assert al.worst_kkt_residual(TWO, w, lam, FS_TWO.caps) <= 1e-8


def test_worst_single_market():
    ms = [lin(2, 1)]
    fs = FeasibleSet([1.5], 1.0)
    w, _ = al.worst_case_allocation(ms, fs)
    assert w.quantities.tolist() == [1.0]
    assert al.misallocation_loss(ms, fs, w) == 0.0


def test_worst_uses_average_value_not_marginal_value():
    # steep-then-low demand: high average value, low marginal value at Q
    steep = MarketSpec(PiecewiseAffine(((0, 10), (0.9, 0.6), (2, 0.5))))
    flat = MarketSpec(PiecewiseAffine(((0, 1.01), (2, 0.99))))
    ms, fs = [steep, flat], FeasibleSet([2.0, 2.0], 1.0)
    assert steep.demand.price(1.0) < flat.demand.price(1.0)
    assert al.smallest_average_value(ms, 1.0) == 1
    w, _ = al.worst_case_allocation(ms, fs)
    vertices = _gen.all_vertices(fs.caps, fs.total)
    best = min(vertices, key=lambda q: al.gross_surplus_total(ms, q))
    assert w.quantities == pytest.approx(best)
    assert w.quantities.tolist() == [0.0, 1.0]


def test_worst_dominates_vertices_and_interior_points():
    rng = np.random.default_rng(11)
    for _ in range(30):
        n = int(rng.integers(2, 7))
        ms, fs = _gen.linear_instance(rng, n)
        w, lam = al.worst_case_allocation(ms, fs)
        eff, _ = al.efficient_allocation(ms, fs)
        lw = al.misallocation_loss(ms, fs, w, eff)
        for v in _gen.all_vertices(fs.caps, fs.total):
            assert lw >= al.misallocation_loss(ms, fs, v, eff) - 1e-9
        pts = _gen.random_feasible_points(rng, fs.caps, fs.total, 1000)
        assert al.gross_surplus_total(ms, w) <= _gen.surplus_matrix(ms, pts).min() + 1e-9
        assert al.worst_kkt_residual(ms, w, lam, fs.caps) <= 1e-8


def test_worst_heuristic_beyond_exact_limit_is_a_feasible_vertex():
    rng = np.random.default_rng(2)
    ms, fs = _gen.linear_instance(rng, al.EXACT_WORST_MAX_N + 5)
    w, _ = al.worst_case_allocation(ms, fs)
    assert w.is_vertex
    g = al.greedy_controlled_allocation(ms, fs, check_degenerate=False)
    assert al.gross_surplus_total(ms, w) <= al.gross_surplus_total(ms, g) + 1e-9


# ------------------------------------------------------------------ welfare


def test_misallocation_loss_closed_form():
    # W(q*) = (2 - 4/9) + (2/3 - 1/18) = 13/6, W(0, 1) = 3/2
    loss = al.misallocation_loss(TWO, FS_TWO, [0.0, 1.0])
    assert loss == pytest.approx(13 / 6 - 1.5, abs=1e-12)
    q_star, _ = al.efficient_allocation(TWO, FS_TWO)
    assert al.misallocation_loss(TWO, FS_TWO, q_star) == pytest.approx(0.0, abs=1e-15)


def test_harberger_examples():
    assert al.harberger_loss(LinearAnchored(1, 1, -5), 1.0, 1.0, 0.91) == pytest.approx(0.02025, abs=1e-14)
    assert al.harberger_loss(LinearAnchored(1, 1, -1 / 0.3), 1.0, 1.0, 0.91) == pytest.approx(0.0135, abs=1e-14)
    assert al.harberger_loss(LinearAnchored(1, 1, -5), 1.0, 1.0, 1.0) == 0.0


def test_welfare_report_ratio():
    rep = al.welfare_report(TWO, FS_TWO, [0.0, 1.0], 0.5, harberger=0.25)
    assert rep.ratio == pytest.approx(rep.misallocation_loss / 0.25)
    assert rep.net_surplus == pytest.approx(rep.gross_surplus - 0.5)


def test_efficient_optimality_certificate():
    rng = np.random.default_rng(12)
    for _ in range(500):
        n = int(rng.integers(1, 7))
        ms, fs = _gen.linear_instance(rng, n)
        eff, p = al.efficient_allocation(ms, fs)
        assert al.efficient_kkt_residual(ms, eff, p, fs.caps) <= 1e-8
        pts = _gen.random_feasible_points(rng, fs.caps, fs.total, 1000)
        assert al.gross_surplus_total(ms, eff) >= _gen.surplus_matrix(ms, pts).max() - 1e-8


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 10.0))
def test_scale_covariance(seed, s):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 6))
    ms, fs = _gen.linear_instance(rng, n)
    scaled = [MarketSpec(LinearAnchored(0.0, s * m.demand.anchor_p, s * m.demand.slope), m.unit_cost) for m in ms]
    e1, p1 = al.efficient_allocation(ms, fs)
    e2, p2 = al.efficient_allocation(scaled, fs)
    assert e2.quantities == pytest.approx(e1.quantities, abs=1e-9)
    assert p2 == pytest.approx(s * p1, rel=1e-9)
    w1, _ = al.worst_case_allocation(ms, fs)
    w2, _ = al.worst_case_allocation(scaled, fs)
    assert np.array_equal(w1.quantities, w2.quantities)
    assert al.misallocation_loss(scaled, fs, w2) == pytest.approx(s * al.misallocation_loss(ms, fs, w1), rel=1e-9, abs=1e-12)
