import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from agebranch import (
    OffspringLaw,
    RateFunction,
    biased_rate,
    classify_regime,
    lifetime_density,
    limit_measure_boundary,
    limit_measure_interior,
    rate_from_spec,
    solve_malthus,
)
from agebranch.model import MalthusError
from agebranch.rates import Polynomial
from oracles import (
    TRIAL_BOUNDARY_MEAN,
    TRIAL_C,
    TRIAL_INTERIOR_MEAN,
    TRIAL_KAPPA_PRIME,
    TRIAL_LAMBDA,
)
from randomized import random_rate

RANDOM_RATES = [random_rate(np.random.default_rng(s)) for s in range(12)]
LAWS = [OffspringLaw.binary(), OffspringLaw.from_mapping({2: 0.5, 3: 0.5}), OffspringLaw((3,), (1.0,))]


# -- Malthus -------------------------------------------------------------


@pytest.mark.parametrize("b", [0.1, 0.4, 1.0, 2.5])
@pytest.mark.parametrize("m", [2, 3])
def test_malthus_constant(b, m):
    md = solve_malthus(RateFunction.constant(b), OffspringLaw((m,), (1.0,)))
    assert md.lam == pytest.approx((m - 1) * b, abs=1e-9)


def test_malthus_trial(md_trial):
    assert md_trial.lam == pytest.approx(TRIAL_LAMBDA, abs=1e-9)
    assert abs(md_trial.lam - 0.5173) <= 5e-4
    assert abs(md_trial.residual) <= 1e-10


@pytest.mark.parametrize("rate", RANDOM_RATES[:6], ids=lambda r: r.name)
@pytest.mark.parametrize("law", LAWS, ids=["binary", "mix23", "three"])
def test_malthus_residual_with_quadrature(rate, law):
    md = solve_malthus(rate, law)
    val = integrate.quad(
        lambda x: rate(x) * math.exp(-md.lam * x - rate.cumulative_hazard(x)),
        0, 80, points=rate.breakpoints, limit=400, epsabs=1e-14, epsrel=1e-12,
    )[0]
    assert val == pytest.approx(1 / law.mean, abs=1e-10)
    assert 0 < md.lam <= (law.mean - 1) * rate.upper


def test_malthus_bracket_failure_reported():
    wrong = RateFunction([0.0], [Polynomial((1.0,))], lower=0.1, upper=0.2)
    with pytest.raises(MalthusError, match="not bracketed.*residuals"):
        solve_malthus(wrong, OffspringLaw.binary())


def test_mean_below_two_rejected():
    with pytest.raises(ValueError):
        OffspringLaw.from_mapping({1: 1.0})


@settings(max_examples=25, deadline=None)
@given(b=st.floats(0.1, 2.0), bump=st.floats(0.0, 1.0), x1=st.floats(0.1, 3.0))
def test_malthus_monotone_in_rate(b, bump, x1):
    low = RateFunction.constant(b)
    high = rate_from_spec({"pieces": [
        {"start": 0.0, "kind": "poly", "coeffs": [b]},
        {"start": x1, "kind": "poly", "coeffs": [b + bump]},
    ]})
    law = OffspringLaw.binary()
    assert solve_malthus(low, law).lam <= solve_malthus(high, law).lam + 1e-12


# -- densities and normalizations ------------------------------------------


def test_lifetime_density_constant():
    r = RateFunction.constant(0.4)
    x = np.linspace(0, 20, 11)
    np.testing.assert_allclose(lifetime_density(r, x), 0.4 * np.exp(-0.4 * x), rtol=1e-12)


def test_lifetime_density_at_zero(trial):
    assert lifetime_density(trial, 0.0) == pytest.approx(0.4)


def test_lifetime_density_rejects_negative(trial):
    with pytest.raises(ValueError):
        lifetime_density(trial, -1.0)


@pytest.mark.parametrize("rate", RANDOM_RATES[:10], ids=lambda r: r.name)
def test_normalizations(rate):
    md = solve_malthus(rate, OffspringLaw.binary())
    x_max = md.x_max
    pts = rate.breakpoints
    f_b = integrate.quad(lambda x: lifetime_density(rate, x), 0, x_max, points=pts, limit=400,
                         epsabs=1e-14)[0]
    f_h = integrate.quad(lambda x: md.biased_density(x), 0, x_max, points=pts, limit=400, epsabs=1e-14)[0]
    mu = integrate.quad(lambda x: md.invariant_density(x), 0, 3 * x_max, points=pts, limit=400,
                        epsabs=1e-14)[0]
    one = lambda x: 1.0  # noqa: E731
    for val in (f_b, f_h, mu, limit_measure_boundary(md, one), limit_measure_interior(md, one)):
        assert val == pytest.approx(1.0, abs=1e-8)


@pytest.mark.parametrize("rate", RANDOM_RATES[:6], ids=lambda r: r.name)
def test_c_identity(rate):
    md = solve_malthus(rate, OffspringLaw.binary())
    # c_B as the inverse mean of f_H, by a quadrature that ignores the hazard tables
    mean = integrate.quad(lambda x: x * md.biased_density(x), 0, md.x_max, points=rate.breakpoints,
                          limit=400, epsabs=1e-14)[0]
    assert 1 / mean == pytest.approx(md.lam * md.kappa_interior * md.m, abs=1e-8)
    assert md.c == pytest.approx(1 / mean, abs=1e-8)


def test_trial_constants_against_oracle(md_trial):
    assert md_trial.c == pytest.approx(TRIAL_C, abs=1e-9)
    assert md_trial.kappa_interior == pytest.approx(TRIAL_KAPPA_PRIME, abs=1e-9)
    assert md_trial.kappa_boundary == pytest.approx(TRIAL_KAPPA_PRIME, abs=1e-9)  # equal when m = 2


# -- closed forms for constant rates --------------------------------------


@pytest.mark.parametrize("b,m", [(0.4, 2), (0.4, 3), (1.3, 2)])
def test_constant_closed_forms(b, m):
    rate = RateFunction.constant(b)
    md = solve_malthus(rate, OffspringLaw((m,), (1.0,)))
    x = np.array([0.0, 0.3, 1.0, 5.0, 30.0, 150.0])
    np.testing.assert_allclose(md.biased(x), m * b, atol=1e-9)
    assert md.rho == pytest.approx(m * b, abs=1e-9)
    np.testing.assert_allclose(md.biased_density(x), m * b * np.exp(-m * b * x), atol=1e-9)
    np.testing.assert_allclose(md.invariant_density(x), m * b * np.exp(-m * b * x), atol=1e-9)
    for xx in (0.0, 2.0, 40.0):
        assert biased_rate(md, xx) == pytest.approx(m * b, abs=1e-9)
    diag = classify_regime(rate, md.offspring, md)
    assert diag.regime == "B+"
    assert diag.smooth_class_member is True


def test_limit_measures_constant(md_const):
    ident = lambda x: x  # noqa: E731
    assert limit_measure_boundary(md_const, ident) == pytest.approx(1.25, abs=1e-10)
    assert limit_measure_interior(md_const, ident) == pytest.approx(1.25, abs=1e-10)
    lam = 1 / (limit_measure_interior(md_const, ident) / (md_const.m - 1) + limit_measure_boundary(md_const, ident))
    assert lam == pytest.approx(0.4, abs=1e-10)


def test_limit_measures_trial(md_trial):
    ident = lambda x: x  # noqa: E731
    assert limit_measure_interior(md_trial, ident) == pytest.approx(TRIAL_INTERIOR_MEAN, abs=1e-9)
    assert limit_measure_boundary(md_trial, ident) == pytest.approx(TRIAL_BOUNDARY_MEAN, abs=1e-9)


def test_limit_measure_null_set(md_trial):
    assert limit_measure_boundary(md_trial, lambda x: float(x == 0.0)) == 0.0


def test_limit_measure_rejects_growth(md_trial):
    with pytest.raises(ValueError):
        limit_measure_boundary(md_trial, lambda x: math.exp(2 * x))


# -- biased rate -----------------------------------------------------------


def test_biased_rate_forms_agree(md_trial):
    for x in (0.0, 0.5, 1.5, 3.0, 6.0):
        assert biased_rate(md_trial, x) == pytest.approx(md_trial.biased(x), rel=1e-8)
    # deep in the tail the quotient cancels; the guarded form must still be accurate
    tail = md_trial.biased(60.0)
    assert biased_rate(md_trial, 60.0) == pytest.approx(tail, rel=1e-8)
    assert tail == pytest.approx(119 / 160 + md_trial.lam, rel=1e-8)


def test_biased_rate_at_zero(md_trial):
    # H_B(0) = m B(0)
    assert md_trial.biased(0.0) == pytest.approx(0.8, abs=1e-12)


def test_trial_biased_rate_bounded(md_trial):
    x = np.linspace(0, md_trial.x_max, 20001)
    h = md_trial.biased(x)
    assert np.all(np.isfinite(h))
    assert h.min() >= 0.8 - 1e-9
    assert h.max() <= 2 * 119 / 160 + md_trial.lam


def test_rho_trial(md_trial):
    assert md_trial.rho == pytest.approx(0.8, abs=1e-9)


# -- regimes ---------------------------------------------------------------


def test_trial_regime(trial, binary, md_trial):
    diag = classify_regime(trial, binary, md_trial)
    assert diag.regime == "B+"
    assert diag.varpi == 1.0
    assert diag.b == pytest.approx(0.4)
    # B'(0) - B(0)^2 = 0.625 - 0.16 > 0: the smooth-class inequality fails near 0
    assert diag.smooth_class_member is False
    x = np.linspace(0, 1, 11)
    assert np.max(trial.derivative(x) - trial(x) ** 2) > 0.4


def test_membership_unknown_without_derivative(binary):
    r = RateFunction.from_callable(lambda x: 0.5 + 0.0 * x, lower=0.5, upper=0.5)
    assert classify_regime(r, binary, finite_differences=False).smooth_class_member is None
    assert classify_regime(r, binary).smooth_class_member is True


def test_rates_formulas(md_const, const, binary):
    diag = classify_regime(const, binary, md_const)
    T = 10.0
    assert diag.v_T(T) == pytest.approx(math.exp(-0.2 * T))  # min(rho, lam/2) = 0.2
    for beta in (0.5, 1.0, 3.0):
        assert diag.w_T(T, beta) == pytest.approx(math.exp(-0.4 * beta * T / (2 * beta + 1)))


def test_regime_boundary_cases():
    from agebranch.model import RateDiagnostics

    crit = RateDiagnostics(lam=1.0, rho=0.5, regime="B-", varpi=2.0, smooth_class_member=None, b=0.1)
    assert crit.v_T(4.0) == pytest.approx(2.0 * math.exp(-2.0))
    slow = RateDiagnostics(lam=1.0, rho=0.8, regime="B-", varpi=1.25, smooth_class_member=None, b=0.1)
    beta = 1.0
    expo = 1.0 * (beta - 0.125) / 3
    assert slow.w_T(5.0, beta) == pytest.approx(math.exp(-expo * 5.0))


@pytest.mark.parametrize("seed", range(5))
def test_members_have_biased_rate_above_lambda(seed):
    rng = np.random.default_rng(seed)
    b = rng.uniform(0.2, 1.0)
    amp = rng.uniform(0.0, 0.9)
    decay = rng.uniform(0.2, 2.0)
    # B = b (1 + amp e^{-decay x}) is nonincreasing and within [b, 2b]
    rate = rate_from_spec({"pieces": [
        {"start": 0.0, "kind": "exp", "level": b, "amplitude": amp * b, "decay": decay},
    ]})
    law = OffspringLaw.binary()
    md = solve_malthus(rate, law)
    diag = classify_regime(rate, law, md)
    assert diag.smooth_class_member is True
    x = np.linspace(0, md.x_max, 4001)
    assert np.all(md.biased(x) - md.lam >= -1e-10)
    assert diag.regime == "B+"
