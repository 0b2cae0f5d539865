import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import entropy

from dvrate.chain import FiniteChain, LazyChain, SubsetSpec, exit_set, make_rng, stationary_distribution
from dvrate.config import RateOptions
from dvrate.rate import (
    C1C2Bounds,
    LogPotential,
    RateStatus,
    holder_closure_check,
    kernel_form_rate,
    phi_objective,
    rate_compact,
    rate_constrained,
    repair_superharmonic,
    row_lse,
    subgradient,
    superharmonic_check,
    superharmonic_extension,
)
from dvrate.verify import random_chain, random_subset

KL_THREE_QUARTERS = 0.75 * math.log(1.5) + 0.25 * math.log(0.5)


def test_log_potential_gauge():
    pot = LogPotential.gauged([1.0, 3.0, -2.0], anchor=0)
    np.testing.assert_allclose(pot.phi, [0.0, 2.0, -3.0])
    np.testing.assert_allclose(pot.u, np.exp([0.0, 2.0, -3.0]))
    with pytest.raises(ValueError):
        LogPotential(phi=np.array([1.0, 0.0]), anchor=0)
    with pytest.raises(ValueError):
        LogPotential(phi=np.array([0.0, np.inf]), anchor=0)


def test_c1c2_bounds():
    bounds = C1C2Bounds.of([2.0, 0.5, 1.0])
    assert (bounds.c1, bounds.c2) == (0.5, 2.0)
    with pytest.raises(ValueError):
        C1C2Bounds.of([0.0, 1.0])


def test_row_lse_skips_zero_entries():
    P = np.array([[1.0, 0.0], [0.5, 0.5]])
    lse = row_lse(P, np.array([0.0, 1e6]))
    assert lse[0] == 0.0
    assert lse[1] == pytest.approx(1e6 + math.log(0.5))


def test_objective_is_linear_in_mu(excursion_chain):
    Y = exit_set(excursion_chain, [0, 1])
    phi = np.array([0.0, 0.3, -0.2])
    mu = np.array([0.4, 0.6])
    val, grad = phi_objective(excursion_chain, Y, mu, phi)
    assert val == pytest.approx(subgradient(excursion_chain, Y, phi) @ mu)
    assert grad.shape == (3,)
    # the gradient is orthogonal to constant shifts of phi
    assert grad.sum() == pytest.approx(0.0, abs=1e-12)


def test_objective_gradient_matches_differences(two_state):
    Y = SubsetSpec.full(2)
    phi = np.array([0.1, -0.4])
    mu = np.array([0.3, 0.7])
    _, grad = phi_objective(two_state, Y, mu, phi)
    h = 1e-6
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        up, _ = phi_objective(two_state, Y, mu, phi + e)
        down, _ = phi_objective(two_state, Y, mu, phi - e)
        assert grad[i] == pytest.approx((up - down) / (2 * h), abs=1e-7)


def test_rate_of_point_mass_on_fair_coin(iid2):
    res = rate_compact(iid2, [1.0, 0.0])
    assert res.status is RateStatus.CONVERGED
    assert res.value == pytest.approx(math.log(2), abs=1e-8)


def test_rate_of_iid_chain_is_relative_entropy(iid2):
    res = rate_compact(iid2, [0.75, 0.25])
    assert res.value == pytest.approx(KL_THREE_QUARTERS, abs=1e-10)
    assert res.maximizer.anchor == 0
    assert res.maximizer.phi[0] == 0.0


def test_rate_vanishes_at_stationary(two_state):
    res = rate_compact(two_state, stationary_distribution(two_state))
    assert res.value == pytest.approx(0.0, abs=1e-12)


def test_rate_of_point_mass_is_minus_log_holding(two_state):
    res = rate_compact(two_state, [1.0, 0.0])
    assert res.value == pytest.approx(-math.log(0.7), abs=1e-8)


def test_rate_is_infinite_without_a_closed_support():
    chain = FiniteChain.from_matrix([[0.0, 1.0], [0.0, 1.0]])
    res = rate_compact(chain, [1.0, 0.0])
    assert res.is_infinite
    assert res.value == math.inf
    assert res.maximizer is None
    assert res.last_iterate is not None
    assert kernel_form_rate(chain, [1.0, 0.0]) == math.inf


def test_rate_rejects_bad_measures(two_state):
    with pytest.raises(ValueError):
        rate_compact(two_state, [0.5, 0.6])
    with pytest.raises(ValueError):
        rate_compact(two_state, [1.0])


@pytest.mark.parametrize("seed", range(5))
def test_compact_rate_agrees_with_kernel_form(seed):
    rng = make_rng(seed)
    chain = random_chain(rng, 3)
    mu = rng.dirichlet(np.ones(3))
    res = rate_compact(chain, mu)
    assert res.status is RateStatus.CONVERGED
    assert res.value == pytest.approx(kernel_form_rate(chain, mu), abs=1e-7)


def test_kernel_form_rate_simple_cases(identity3, two_state):
    assert kernel_form_rate(identity3, [1 / 3, 1 / 3, 1 / 3]) == pytest.approx(0.0, abs=1e-12)
    assert kernel_form_rate(two_state, [1.0, 0.0]) == pytest.approx(-math.log(0.7))


def test_constrained_on_whole_space_matches_compact(two_state):
    mu = [0.2, 0.8]
    full = rate_constrained(two_state, SubsetSpec.full(2), mu)
    assert full.value == pytest.approx(rate_compact(two_state, mu).value, abs=1e-10)


def test_constrained_rate_equals_rate_of_induced_chain(excursion_chain):
    # from 0 the chain returns to Y = {0, 1} as a fair coin between 0 and 1
    Y = exit_set(excursion_chain, [0, 1])
    res = rate_constrained(excursion_chain, Y, [0.75, 0.25])
    assert res.status is RateStatus.CONVERGED
    assert res.value == pytest.approx(KL_THREE_QUARTERS, abs=1e-6)
    assert res.max_violation <= 1e-12
    assert not superharmonic_check(excursion_chain, Y, res.maximizer.u)


def test_constrained_rate_is_zero_at_induced_stationary(excursion_chain):
    Y = exit_set(excursion_chain, [0, 1])
    res = rate_constrained(excursion_chain, Y, [0.5, 0.5])
    assert res.value == pytest.approx(0.0, abs=1e-9)


@pytest.mark.parametrize("seed", range(4))
def test_constrained_maximizer_is_admissible(seed):
    rng = make_rng(100 + seed)
    chain = random_chain(rng, 4)
    Y = exit_set(chain, [0, 2])
    res = rate_constrained(chain, Y, rng.dirichlet(np.ones(2)), RateOptions())
    assert res.value >= 0.0
    assert not superharmonic_check(chain, Y, res.maximizer.u, tol=1e-9)


def test_superharmonic_check_reports_deficit(excursion_chain):
    Y = exit_set(excursion_chain, [0, 1])
    assert superharmonic_check(excursion_chain, Y, [4.0, 1.0, 2.0]) == [(2, 2.0)]
    assert superharmonic_check(excursion_chain, Y, [1.0, 1.0, 1.0]) == []
    with pytest.raises(ValueError):
        superharmonic_check(excursion_chain, Y, [1.0, 0.0, 1.0])


def test_repair_raises_only_outside_y(excursion_chain):
    Y = exit_set(excursion_chain, [0, 1])
    phi = np.log([4.0, 1.0, 2.0])
    fixed = repair_superharmonic(excursion_chain, Y, phi)
    np.testing.assert_allclose(fixed[:2], phi[:2])
    assert fixed[2] == pytest.approx(math.log(4.0))
    assert not superharmonic_check(excursion_chain, Y, np.exp(fixed))


def test_superharmonic_extension(excursion_chain):
    Y = exit_set(excursion_chain, [0, 1])
    np.testing.assert_allclose(superharmonic_extension(excursion_chain, Y, [2.0, 1.0]), [2.0, 1.0, 2.0])
    np.testing.assert_allclose(superharmonic_extension(excursion_chain, Y, [2.0, 1.0], slack=0.5), [2.0, 1.0, 2.5])
    with pytest.raises(ValueError):
        superharmonic_extension(excursion_chain, Y, [2.0, -1.0])


def test_superharmonic_extension_needs_reachability():
    chain = FiniteChain.from_matrix([[0.5, 0.5, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 1.0]])
    Y = SubsetSpec(Y={0}, Y_tilde={0, 1})
    with pytest.raises(ValueError):
        superharmonic_extension(chain, Y, [1.0])


def test_holder_closure(excursion_chain):
    Y = exit_set(excursion_chain, [0, 1])
    assert holder_closure_check(excursion_chain, Y, [1.0, 1.0, 1.0], [2.0, 1.0, 3.0], 0.5)
    assert holder_closure_check(excursion_chain, Y, [1.0, 5.0, 2.0], [2.0, 1.0, 3.0], 0.3)
    with pytest.raises(ValueError):
        holder_closure_check(excursion_chain, Y, [4.0, 1.0, 2.0], [1.0, 1.0, 1.0], 0.5)
    with pytest.raises(ValueError):
        holder_closure_check(excursion_chain, Y, [1.0, 1.0, 1.0], [1.0, 1.0, 1.0], 1.0)


@pytest.mark.parametrize("seed", [100, 101])
def test_penalized_ascent_converges_with_active_constraint(seed):
    rng = make_rng(seed)
    chain = random_chain(rng, 4)
    Y = exit_set(chain, [0, 2])
    res = rate_constrained(chain, Y, rng.dirichlet(np.ones(2)))
    assert res.status is RateStatus.CONVERGED
    assert res.iterations < 10_000
    assert res.max_violation <= 1e-12


def test_penalized_ascent_converges_on_capped_walk():
    chain = LazyChain.reflected_walk(p_up=0.3).truncate(12)
    Y = exit_set(chain, range(5))
    res = rate_constrained(chain, Y, np.full(5, 0.2))
    assert res.status is RateStatus.CONVERGED
    assert res.iterations < 10_000
    assert res.value == pytest.approx(0.0836, abs=1e-3)
    assert not superharmonic_check(chain, Y, res.maximizer.u, tol=1e-9)


def test_warm_start_reaches_the_same_value():
    rng = make_rng(100)
    chain = random_chain(rng, 4)
    Y = exit_set(chain, [0, 2])
    first = rate_constrained(chain, Y, [0.3, 0.7])
    cold = rate_constrained(chain, Y, [0.6, 0.4])
    warm = rate_constrained(chain, Y, [0.6, 0.4], phi0=first.maximizer.phi)
    assert warm.status is RateStatus.CONVERGED
    assert warm.value == pytest.approx(cold.value, abs=1e-7)


@pytest.mark.parametrize("seed", range(50))
def test_rate_vanishes_at_stationary_of_random_chains(seed):
    chain = random_chain(make_rng(400 + seed), int(2 + seed % 3), sparsity=0.3)
    res = rate_compact(chain, stationary_distribution(chain))
    assert res.status is RateStatus.CONVERGED
    assert res.value <= 1e-8


@pytest.mark.parametrize("seed", range(50))
def test_iid_rate_is_relative_entropy(seed):
    rng = make_rng(500 + seed)
    d = int(2 + seed % 3)
    q = rng.dirichlet(np.ones(d))
    chain = FiniteChain.from_matrix(np.tile(q, (d, 1)))
    mu = rng.dirichlet(np.ones(d))
    res = rate_compact(chain, mu)
    assert res.value == pytest.approx(entropy(mu, q), abs=1e-6)


@pytest.mark.parametrize("seed", range(20))
def test_kernel_form_agrees_on_small_chains(seed):
    rng = make_rng(600 + seed)
    d = 2 + seed % 2
    chain = random_chain(rng, d)
    mu = rng.dirichlet(np.ones(d))
    assert rate_compact(chain, mu).value == pytest.approx(kernel_form_rate(chain, mu), abs=1e-5)


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(50))
def test_kernel_form_agrees_on_four_states(seed):
    rng = make_rng(700 + seed)
    chain = random_chain(rng, 4)
    mu = rng.dirichlet(np.ones(4))
    assert rate_compact(chain, mu).value == pytest.approx(kernel_form_rate(chain, mu), abs=1e-5)


@pytest.mark.parametrize("seed", range(10))
def test_gradient_matches_differences_on_random_chains(seed):
    rng = make_rng(800 + seed)
    d = int(2 + seed % 3)
    chain = random_chain(rng, d)
    Y = exit_set(chain, random_subset(rng, d, max(1, d - 1)))
    mu = rng.dirichlet(np.ones(Y.size))
    phi = rng.normal(size=d)
    _, grad = phi_objective(chain, Y, mu, phi)
    h = 1e-6
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        up, _ = phi_objective(chain, Y, mu, phi + e)
        down, _ = phi_objective(chain, Y, mu, phi - e)
        assert grad[i] == pytest.approx((up - down) / (2 * h), rel=1e-6, abs=1e-8)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), t=st.floats(0.0, 1.0))
def test_objective_is_concave_in_phi(seed, t):
    rng = make_rng(seed)
    chain = random_chain(rng, 3)
    Y = SubsetSpec.full(3)
    mu = rng.dirichlet(np.ones(3))
    a, b = rng.normal(scale=3.0, size=(2, 3))
    mid, _ = phi_objective(chain, Y, mu, t * a + (1 - t) * b)
    va, _ = phi_objective(chain, Y, mu, a)
    vb, _ = phi_objective(chain, Y, mu, b)
    assert mid >= t * va + (1 - t) * vb - 1e-10


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), c=st.floats(-20.0, 20.0))
def test_objective_ignores_constant_shifts(seed, c):
    rng = make_rng(seed)
    chain = random_chain(rng, 4)
    Y = exit_set(chain, [0, 1])
    mu = rng.dirichlet(np.ones(2))
    phi = rng.normal(size=4)
    shifted, _ = phi_objective(chain, Y, mu, phi + c)
    base, _ = phi_objective(chain, Y, mu, phi)
    assert shifted == pytest.approx(base, abs=1e-9)
    np.testing.assert_allclose(subgradient(chain, Y, phi + c), subgradient(chain, Y, phi), atol=1e-9)


@pytest.mark.parametrize("seed", range(10))
def test_subgradient_supports_the_rate(seed):
    rng = make_rng(900 + seed)
    chain = random_chain(rng, 3)
    Y = SubsetSpec.full(3)
    mu, other = rng.dirichlet(np.ones(3), size=2)
    res = rate_compact(chain, mu)
    g = subgradient(chain, Y, res.maximizer.phi)
    assert g @ mu == pytest.approx(res.value, abs=1e-9)
    assert rate_compact(chain, other).value >= g @ other - 1e-9


def _random_superharmonic(rng, chain, Y):
    return superharmonic_extension(chain, Y, rng.uniform(0.2, 5.0, size=Y.size), slack=rng.uniform(0.0, 0.5))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 100_000), alpha=st.floats(0.01, 0.99))
def test_holder_closure_on_random_chains(seed, alpha):
    rng = make_rng(seed)
    d = int(rng.integers(2, 5))
    chain = random_chain(rng, d, sparsity=0.3)
    Y = exit_set(chain, random_subset(rng, d, int(rng.integers(1, d + 1))))
    u = _random_superharmonic(rng, chain, Y)
    v = _random_superharmonic(rng, chain, Y)
    assert holder_closure_check(chain, Y, u, v, alpha)


@pytest.mark.slow
@settings(max_examples=500, deadline=None)
@given(seed=st.integers(0, 1_000_000), alpha=st.floats(0.001, 0.999))
def test_holder_closure_on_many_triples(seed, alpha):
    rng = make_rng(seed)
    d = int(rng.integers(2, 5))
    chain = random_chain(rng, d, sparsity=0.3)
    Y = exit_set(chain, random_subset(rng, d, int(rng.integers(1, d + 1))))
    assert holder_closure_check(chain, Y, _random_superharmonic(rng, chain, Y), _random_superharmonic(rng, chain, Y), alpha)
