import json
import math

import numpy as np
import pytest
from scipy import integrate, stats

from agebranch import OffspringLaw, RateFunction, solve_malthus
from agebranch.particle import (
    coupling_tv,
    semigroup_mc,
    simulate_chain,
    verify_mto_boundary,
    verify_mto_interior,
    verify_mto_pairs,
)
from oracles import ks_critical



def one(a):
    return np.ones_like(np.asarray(a, dtype=float))


def zero(a):
    return np.zeros_like(np.asarray(a, dtype=float))


def test_constant_rate_jump_counts_are_poisson(rng):
    c, t = 1.3, 4.0
    chain = simulate_chain(RateFunction.constant(c), 0.0, t, rng, size=100_000)
    se = math.sqrt(c * t / chain.jumps.size)
    assert abs(chain.jumps.mean() - c * t) <= 3 * se
    assert chain.jumps.var() == pytest.approx(c * t, rel=0.03)


def test_zero_time(md_trial, rng):
    chain = simulate_chain(md_trial.biased, 2.5, 0.0, rng, size=10)
    np.testing.assert_array_equal(chain.age, 2.5)
    np.testing.assert_array_equal(chain.jumps, 0)


def test_ages_grow_between_jumps(md_trial, rng):
    chain = simulate_chain(md_trial.biased, 1.0, 3.0, rng, size=5000)
    no_jump = chain.jumps == 0
    np.testing.assert_allclose(chain.age[no_jump], 4.0)
    assert np.all(chain.age[~no_jump] <= 3.0)


def test_terminal_age_law_is_invariant_law(md_trial, rng):
    chain = simulate_chain(md_trial.biased, 0.0, 30 / md_trial.rho, rng, size=20_000)
    ks = stats.kstest(chain.age, md_trial.invariant.cdf).statistic
    assert ks < ks_critical(chain.age.size)


def test_semigroup_conservation(md_trial, rng):
    assert semigroup_mc(md_trial.biased, one, 0.0, 3.0, 1000, rng) == (1.0, 0.0)


def test_semigroup_stationarity(md_trial, rng):
    g = lambda a: (a <= 0.7).astype(float)  # noqa: E731
    starts = md_trial.invariant.sample(rng, 100_000)
    est, se = semigroup_mc(md_trial.biased, g, starts, 2.0, starts.size, rng)
    exact = integrate.quad(md_trial.invariant_density, 0, 0.7)[0]
    assert abs(est - exact) <= 3 * se


@pytest.mark.parametrize("x0", [0.0, 2.0])
def test_semigroup_constant_closed_form(x0, rng):
    # with H = c the age exceeds a at time t > a iff no jump in (t - a, t]
    c, a, t = 0.9, 0.8, 2.0
    g = lambda age: (age > a).astype(float)  # noqa: E731
    est, se = semigroup_mc(RateFunction.constant(c), g, x0, t, 100_000, rng)
    assert abs(est - math.exp(-c * a)) <= 3 * se


def test_invariant_law_preserved_over_time(md_trial):
    rng = np.random.default_rng(3)
    a = simulate_chain(md_trial.biased, md_trial.invariant.sample(rng, 20_000), 1.0, rng).age
    b = simulate_chain(md_trial.biased, md_trial.invariant.sample(rng, 20_000), 3.0, rng).age
    assert stats.ks_2samp(a, b).pvalue > 0.01


def test_coupling_constant_rate_is_exponential(rng):
    c = 0.8
    t = np.linspace(0, 4, 9)
    res = coupling_tv(RateFunction.constant(c), 0.0, t, 50_000, rng)
    assert res.rho == pytest.approx(c)
    assert res.frequency[0] == 1.0
    assert np.all(np.abs(res.frequency - np.exp(-c * t)) <= 3 * res.se + 1e-12)


def test_coupling_bound_and_monotonicity(md_trial, rng):
    t = np.linspace(0, 6, 13)
    res = coupling_tv(md_trial.biased, 0.0, t, 50_000, rng, start_sampler=md_trial.invariant.sample)
    assert res.ok.all()
    assert np.all(np.diff(res.frequency) <= 0)  # coupling is absorbing


@pytest.fixture(scope="module")
def const_model():
    rate = RateFunction.constant(0.4)
    law = OffspringLaw.binary()
    return rate, law, solve_malthus(rate, law)


def test_zero_test_function(const_model):
    rate, law, md = const_model
    rng = np.random.default_rng(0)
    for f in (verify_mto_boundary, verify_mto_interior):
        r = f(rate, law, zero, 5.0, 50, 1000, rng, md=md)
        assert r.lhs == r.rhs == 0.0 and r.z == 0.0
    for r in verify_mto_pairs(rate, law, zero, 5.0, 50, 1000, rng, md=md, n_nodes=33, batches=10):
        assert r.lhs == 0.0 and r.rhs == 0.0


def test_short_horizon(const_model):
    rate, law, md = const_model
    rng = np.random.default_rng(1)
    T = 0.01
    r = verify_mto_interior(rate, law, one, T, 2000, 2000, rng, md=md, n_nodes=33)
    assert r.rhs == pytest.approx(math.exp(0.4 * T) - 1, rel=1e-4)
    pairs = {p.identity: p for p in verify_mto_pairs(rate, law, one, T, 200, 2000, rng, md=md, n_nodes=33, batches=10)}
    # lineage and fork pairs need two splits, alive pairs only one
    assert pairs["lineage"].rhs < 1e-4 and pairs["forks"].rhs < 1e-6
    e = math.exp(0.4 * T)
    assert pairs["alive_pairs"].rhs == pytest.approx(2 * e * (e - 1), rel=1e-4)


def test_constant_rate_particle_sides_exact(const_model):
    rate, law, md = const_model
    b, T = 0.4, 6.0
    rng = np.random.default_rng(2)
    bd = verify_mto_boundary(rate, law, one, T, 10, 1000, rng, md=md)
    assert bd.rhs == pytest.approx(math.exp(b * T), rel=1e-9)
    inter = verify_mto_interior(rate, law, one, T, 10, 1000, rng, md=md)
    assert inter.rhs == pytest.approx(math.exp(b * T) - 1, rel=1e-4)
    pairs = {r.identity: r for r in verify_mto_pairs(rate, law, one, T, 10, 1000, rng, md=md)}
    e = math.exp(b * T)
    lineage = 2 * b * T * e - 2 * (e - 1)
    forks = integrate.quad(lambda s: 2 * b * math.exp(b * s) * (math.exp(b * (T - s)) - 1) ** 2, 0, T)[0]
    alive = 2 * e * e * (1 - 1 / e)  # E[N(N-1)] for a geometric population of mean e^{bT}
    assert pairs["lineage"].rhs == pytest.approx(lineage, rel=1e-4)
    assert pairs["forks"].rhs == pytest.approx(forks, rel=1e-4)
    assert pairs["alive_pairs"].rhs == pytest.approx(alive, rel=1e-4)


def test_many_to_one_constant_rate(const_model):
    rate, law, md = const_model
    rng = np.random.default_rng(4)
    T = 6 / md.lam
    reports = [
        verify_mto_boundary(rate, law, one, T, 2000, 20_000, rng, md=md),
        verify_mto_interior(rate, law, one, T, 2000, 20_000, rng, md=md, n_nodes=65),
        *verify_mto_pairs(rate, law, one, 4.0, 2000, 20_000, rng, md=md, n_nodes=65),
    ]
    for r in reports:
        assert abs(r.z) <= 3, r


def test_many_to_one_trial_mixed_offspring(trial):
    law = OffspringLaw.from_mapping({2: 0.5, 3: 0.5})
    md = solve_malthus(trial, law)
    rng = np.random.default_rng(5)
    g = lambda a: (a <= 1.0).astype(float)  # noqa: E731
    reports = [
        verify_mto_boundary(trial, law, g, 6.0, 2000, 50_000, rng, md=md),
        verify_mto_interior(trial, law, g, 6.0, 2000, 50_000, rng, md=md, n_nodes=65),
        *verify_mto_pairs(trial, law, g, 5.0, 2000, 50_000, rng, md=md, n_nodes=65),
    ]
    for r in reports:
        assert abs(r.z) <= 3, r


def test_report_json_shape(const_model):
    rate, law, md = const_model
    r = verify_mto_boundary(rate, law, one, 3.0, 20, 100, np.random.default_rng(0), md=md)
    data = json.loads(r.to_json())
    assert {"identity", "T", "sizes", "lhs", "lhs_se", "rhs", "rhs_se", "z"} <= set(data)
