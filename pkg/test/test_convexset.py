import math
import time

import numpy as np
import pytest
from scipy.optimize import linprog

from dvrate.chain import FiniteChain, LazyChain, SubsetSpec, exit_set, make_rng, stationary_distribution
from dvrate.config import RateOptions
from dvrate.const import FW_STEP_OPEN_LOOP, MODE_COMPACT, MODE_CONSTRAINED
from dvrate.convexset import (
    Polytope,
    ball_linf,
    infimum_rate_over_C,
    linear_minimize,
    member,
    minimax_gap,
)
from dvrate.errors import EmptyConvexSetError, SizeGuardError
from dvrate.exact import exact_prob_compact
from dvrate.rate import RateStatus, rate_compact
from dvrate.verify import random_chain, random_polytope

KL_THREE_QUARTERS = 0.75 * math.log(1.5) + 0.25 * math.log(0.5)


def test_simplex_vertices():
    np.testing.assert_allclose(Polytope.simplex(3).vertices, [[0, 0, 1], [0, 1, 0], [1, 0, 0]], atol=1e-15)
    np.testing.assert_allclose(Polytope.simplex(1).vertices, [[1.0]])


def test_halfspace_vertices(heads_heavy):
    np.testing.assert_allclose(heads_heavy.vertices, [[0.75, 0.25], [1.0, 0.0]])
    assert not heads_heavy.is_empty


def test_empty_polytope():
    C = Polytope.from_halfspaces(2, [([-1.0, 0.0], -1.5)])
    assert C.is_empty
    assert linear_minimize(C, [1.0, 0.0]) is None


def test_member(heads_heavy):
    assert member(heads_heavy, [0.8, 0.2])
    assert heads_heavy.member([0.75, 0.25])
    assert not member(heads_heavy, [0.5, 0.5])
    assert not member(heads_heavy, [0.9, 0.2])
    with pytest.raises(ValueError):
        member(heads_heavy, [1.0])


def test_ball_linf():
    C = ball_linf([0.5, 0.5], 0.1)
    np.testing.assert_allclose(C.vertices, [[0.4, 0.6], [0.6, 0.4]])
    with pytest.raises(ValueError):
        ball_linf([0.5, 0.5], -1.0)


def test_contains(heads_heavy):
    assert Polytope.simplex(2).contains(heads_heavy)
    assert not heads_heavy.contains(Polytope.simplex(2))


def test_linear_minimize_ties_to_smallest_vertex():
    vertex, value = linear_minimize(Polytope.simplex(2), [1.0, 1.0])
    np.testing.assert_array_equal(vertex, [0.0, 1.0])
    assert value == 1.0
    vertex, value = linear_minimize(Polytope.simplex(3), [3.0, -1.0, 2.0])
    np.testing.assert_array_equal(vertex, [0.0, 1.0, 0.0])
    assert value == -1.0


def test_vertex_guard():
    with pytest.raises(SizeGuardError):
        Polytope.simplex(9).vertices


def test_from_spec():
    C = Polytope.from_spec({"halfspaces": [{"a": [-1, 0], "b": -0.75}]}, 2)
    np.testing.assert_allclose(C.vertices, [[0.75, 0.25], [1.0, 0.0]])
    assert Polytope.from_spec(C.to_spec(), 2).to_spec() == C.to_spec()
    ball = Polytope.from_spec({"ball_linf": {"center": [0.5, 0.5], "radius": 0.1}}, 2)
    assert ball.member([0.55, 0.45])
    with pytest.raises(ValueError):
        Polytope.from_spec({"halfspaces": [{"a": [1, 0, 0], "b": 1}]}, 2)
    with pytest.raises(ValueError):
        Polytope.from_spec({"sphere": {}}, 2)
    with pytest.raises(ValueError):
        Polytope.from_spec({"halfspaces": [{"a": [1, 0], "b": 1, "c": 2}]}, 2)


def test_zero_normal_rejected():
    with pytest.raises(ValueError):
        Polytope.from_halfspaces(2, [([0.0, 0.0], 1.0)])


@pytest.mark.parametrize("step", ["away", FW_STEP_OPEN_LOOP])
def test_infimum_over_heads_heavy(iid2, heads_heavy, step):
    inf = infimum_rate_over_C(iid2, None, heads_heavy, mode=MODE_COMPACT, opts=RateOptions(fw_step=step))
    assert inf.value == pytest.approx(KL_THREE_QUARTERS, abs=1e-5)
    assert inf.lower_bound <= inf.value
    assert inf.lower_bound == pytest.approx(KL_THREE_QUARTERS, abs=1e-5)
    np.testing.assert_allclose(inf.argmin, [0.75, 0.25], atol=1e-3)


def test_infimum_is_zero_when_c_holds_the_stationary_law(two_state):
    inf = infimum_rate_over_C(two_state, None, Polytope.simplex(2), mode=MODE_COMPACT)
    assert inf.value == pytest.approx(0.0, abs=1e-6)
    assert inf.status is RateStatus.CONVERGED


def test_infimum_constrained(excursion_chain, heads_heavy):
    Y = exit_set(excursion_chain, [0, 1])
    inf = infimum_rate_over_C(excursion_chain, Y, heads_heavy, mode=MODE_CONSTRAINED)
    assert inf.value == pytest.approx(KL_THREE_QUARTERS, abs=1e-5)
    assert inf.lower_bound <= inf.value + 1e-12


def test_infimum_empty_set(iid2):
    C = Polytope.from_halfspaces(2, [([-1.0, 0.0], -1.5)])
    with pytest.raises(EmptyConvexSetError):
        infimum_rate_over_C(iid2, None, C, mode=MODE_COMPACT)


def test_infimum_dimension_checks(iid2, excursion_chain):
    with pytest.raises(ValueError):
        infimum_rate_over_C(iid2, None, Polytope.simplex(3), mode=MODE_COMPACT)
    with pytest.raises(ValueError):
        infimum_rate_over_C(excursion_chain, exit_set(excursion_chain, [0]), Polytope.simplex(2), mode=MODE_COMPACT)
    with pytest.raises(ValueError):
        infimum_rate_over_C(iid2, None, Polytope.simplex(2), mode="sideways")


def test_infimum_infinite_everywhere():
    chain = FiniteChain.from_matrix([[0.0, 1.0], [0.0, 1.0]])
    C = ball_linf([1.0, 0.0], 0.0)
    inf = infimum_rate_over_C(chain, None, C, mode=MODE_COMPACT)
    assert inf.is_infinite
    assert inf.value == math.inf
    assert inf.argmin is None


@pytest.mark.parametrize("seed", range(4))
def test_infimum_is_below_every_vertex(seed):
    rng = make_rng(seed)
    chain = random_chain(rng, 3)
    C = random_polytope(rng, 3)
    opts = RateOptions()
    inf = infimum_rate_over_C(chain, None, C, mode=MODE_COMPACT, opts=opts)
    for v in C.vertices:
        assert inf.value <= rate_compact(chain, v).value + 2 * opts.fw_tol
    assert inf.lower_bound <= inf.value


def test_minimax_gap_closes(iid2, heads_heavy):
    report = minimax_gap(iid2, None, heads_heavy, mode=MODE_COMPACT)
    assert report.gap >= -1e-9
    assert report.gap <= 1e-5
    assert report.sup_inf == pytest.approx(KL_THREE_QUARTERS, abs=1e-5)


def test_minimax_gap_constrained(excursion_chain, heads_heavy):
    Y = exit_set(excursion_chain, [0, 1])
    report = minimax_gap(excursion_chain, Y, heads_heavy, mode=MODE_CONSTRAINED)
    assert report.gap >= -1e-9
    assert report.gap <= 1e-5
    assert report.to_dict()["inf_sup"] == report.inf_sup


def test_full_subset_is_compact(two_state):
    Y = SubsetSpec.full(2)
    a = infimum_rate_over_C(two_state, Y, Polytope.simplex(2), mode=MODE_CONSTRAINED)
    b = infimum_rate_over_C(two_state, Y, Polytope.simplex(2), mode=MODE_COMPACT)
    assert a.value == pytest.approx(b.value, abs=1e-8)


def test_minimax_when_rate_is_infinite_on_c():
    # the flip chain only ever sees the uniform law
    flip = FiniteChain.from_matrix([[0.0, 1.0], [1.0, 0.0]])
    C = Polytope.from_halfspaces(2, [([-1.0, 0.0], -0.75)])
    report = minimax_gap(flip, None, C, mode=MODE_COMPACT)
    assert report.inf_sup == math.inf
    assert report.sup_inf == math.inf
    assert report.gap == 0.0


def _minimax_instance(seed):
    rng = make_rng(1000 + seed)
    chain = random_chain(rng, 3)
    C = random_polytope(rng, 3, exclude=stationary_distribution(chain))
    return chain, C


@pytest.mark.parametrize("seed", range(5))
def test_minimax_gap_on_random_instances(seed):
    chain, C = _minimax_instance(seed)
    if C.is_empty:
        pytest.skip("empty convex set")
    report = minimax_gap(chain, None, C, mode=MODE_COMPACT)
    assert abs(report.gap) <= 1e-5


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(100))
def test_minimax_gap_battery(seed):
    chain, C = _minimax_instance(seed)
    if C.is_empty:
        pytest.skip("empty convex set")
    assert abs(minimax_gap(chain, None, C, mode=MODE_COMPACT).gap) <= 1e-5


@pytest.mark.parametrize("seed", range(10))
def test_linear_minimize_matches_linprog(seed):
    rng = make_rng(1200 + seed)
    dim = int(rng.integers(2, 6))
    C = random_polytope(rng, dim, halfspaces=3)
    c = rng.normal(size=dim)
    lp = linprog(c, A_ub=C.A, b_ub=C.b, A_eq=np.ones((1, dim)), b_eq=[1.0], bounds=[(0, None)] * dim)
    result = linear_minimize(C, c)
    if not lp.success:
        assert result is None
        return
    vertex, value = result
    assert value == pytest.approx(lp.fun, abs=1e-9)
    assert member(C, vertex, tol=1e-9)


@pytest.mark.parametrize("seed", range(4))
def test_infimum_is_monotone_in_c(seed):
    rng = make_rng(1300 + seed)
    chain = random_chain(rng, 3)
    outer = random_polytope(rng, 3, halfspaces=1)
    a = rng.normal(size=3)
    centre = outer.vertices.mean(axis=0)
    inner = Polytope(dim=3, A=np.vstack([outer.A, a]), b=np.concatenate([outer.b, [a @ centre]]))
    assert outer.contains(inner)
    opts = RateOptions()
    big = infimum_rate_over_C(chain, None, outer, mode=MODE_COMPACT, opts=opts)
    small = infimum_rate_over_C(chain, None, inner, mode=MODE_COMPACT, opts=opts)
    assert big.value <= small.value + 2 * opts.fw_tol
    for n in (2, 5):
        p_big = exact_prob_compact(chain, n, outer).per_start
        p_small = exact_prob_compact(chain, n, inner).per_start
        assert all(p_small[x] <= p_big[x] + 1e-15 for x in range(3))


def test_constrained_infimum_on_capped_walk():
    chain = LazyChain.reflected_walk(p_up=0.3).truncate(12)
    Y = exit_set(chain, range(5))
    C = ball_linf(np.full(5, 0.2), 0.2)
    start = time.perf_counter()
    inf = infimum_rate_over_C(chain, Y, C, mode=MODE_CONSTRAINED)
    assert time.perf_counter() - start < 120.0
    assert 0.0 < inf.lower_bound <= inf.value
    assert inf.gap <= 1e-3
