"""Deterministic model layer: Malthus parameter, biased rate, limit measures.

Everything here is a pure function of a :class:`~agebranch.rates.RateFunction`
and an :class:`~agebranch.offspring.OffspringLaw`.  Objects are immutable
once built and may be shared read-only between workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Iterable

import numpy as np
from scipy import integrate

from .offspring import OffspringLaw
from .rates import GL_NODES, GL_WEIGHTS, HazardTable, RateFunction

MALTHUS_TOL = 1e-12
DENOMINATOR_GUARD = 1e-12


class MalthusError(RuntimeError):
    """The Malthus equation could not be bracketed or solved."""


# --------------------------------------------------------------------------
# elementary quantities


def cumulative_hazard(rate: RateFunction, x):
    """``int_0^x B(y) dy`` by adaptive quadrature (scalar or array input)."""
    if np.ndim(x) == 0:
        return rate.cumulative_hazard(float(x))
    x = np.asarray(x, dtype=float)
    return np.array([rate.cumulative_hazard(float(v)) for v in x.ravel()]).reshape(x.shape)


def lifetime_density(rate: RateFunction, x):
    """``f_B(x) = B(x) exp(-int_0^x B)``."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("ages must be nonnegative")
    out = rate(x) * rate.table.survival(x)
    return out if np.ndim(out) else float(out)


def _split_quad(fn: Callable[[float], float], a: float, b: float, points: Iterable[float] = ()) -> float:
    edges = sorted({a, b, *(p for p in points if a < p < b)})
    total = 0.0
    for lo, hi in zip(edges, edges[1:]):
        val, _ = integrate.quad(fn, lo, hi, epsabs=1e-15, epsrel=1e-12, limit=500)
        total += val
    return total


def _malthus_transform(rate: RateFunction):
    """Quadrature rule for ``lam -> int_0^inf B(x) exp(-lam x - int_0^x B) dx``."""
    xq, wq = rate.table.quadrature()
    base = wq * rate(xq) * rate.table.survival(xq)
    keep = base > 0
    xq, base = xq[keep], base[keep]

    def transform(lam: float) -> float:
        return float(np.dot(base, np.exp(-lam * xq)))

    return transform


# --------------------------------------------------------------------------
# biased rate and invariant law


class BiasedRate:
    """Biased division rate ``H_B`` with its tabulated cumulative hazard.

    ``H_B = f_H / (1 - F_H)`` where ``f_H(x) = m exp(-lam x) f_B(x)``.  The
    survival ``1 - F_H(x) = m int_x^inf exp(-lam y) f_B(y) dy`` is built by
    summing cell integrals from the right in log space, so it keeps full
    relative precision at large ages.
    """

    def __init__(self, rate: RateFunction, m: float, lam: float):
        self.rate = rate
        self.m = m
        self.lam = lam
        tab = rate.table
        nodes, cum = tab.nodes, tab.cum
        x0 = nodes[:-1]
        h = tab.widths
        mid = x0 + 0.5 * h
        y = mid[:, None] + 0.5 * h[:, None] * GL_NODES[None, :]
        # integrand scaled by its value-envelope at the left node
        scaled = rate(y) * np.exp(-lam * (y - x0[:, None]) - (tab.cumulative(y) - cum[:-1, None]))
        log_cell = -lam * x0 - cum[:-1] + np.log(0.5 * h * (scaled @ GL_WEIGHTS))
        b_tail = tab.tail_rate
        log_tail = -lam * nodes[-1] - cum[-1] + math.log(b_tail / (lam + b_tail))
        log_psi = np.logaddexp.accumulate(np.concatenate([log_cell, [log_tail]])[::-1])[::-1]
        self.log_psi0 = float(log_psi[0])
        self.normalization_residual = float(m * math.exp(self.log_psi0) - 1.0)
        cum_h = self.log_psi0 - log_psi
        cum_h[0] = 0.0
        rate_lo = tab.rate_lo * np.exp(-lam * x0 - cum[:-1] - log_psi[:-1])
        rate_hi = tab.rate_hi * np.exp(-lam * nodes[1:] - cum[1:] - log_psi[1:])
        self.table = HazardTable(nodes, np.maximum.accumulate(cum_h), rate_lo, rate_hi)
        self.lower = float(min(rate_lo.min(), rate_hi.min()))
        self.upper = float(max(rate_lo.max(), rate_hi.max()))

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        log_psi = self.log_psi0 - self.table.cumulative(x)
        out = self.rate(x) * np.exp(-self.lam * x - self.rate.table.cumulative(x) - log_psi)
        return out if np.ndim(out) else float(out)

    def survival(self, x):
        return self.table.survival(x)

    def sample(self, rng, size=None):
        return self.table.sample(rng, size)


class StationaryAgeLaw:
    """Law with density proportional to ``exp(-int_0^x H)``.

    This is the invariant probability of the age process that grows at unit
    speed and resets to 0 at rate ``H``.  Sampling goes through the hazard of
    the law, tabulated like every other hazard in the package.
    """

    def __init__(self, hazard):
        tab = hazard.table
        nodes, cum = tab.nodes, tab.cum
        x0 = nodes[:-1]
        h = tab.widths
        mid = x0 + 0.5 * h
        y = mid[:, None] + 0.5 * h[:, None] * GL_NODES[None, :]
        scaled = np.exp(-(tab.cumulative(y) - cum[:-1, None]))
        log_cell = -cum[:-1] + np.log(0.5 * h * (scaled @ GL_WEIGHTS))
        log_tail = -cum[-1] - math.log(tab.tail_rate)
        log_s = np.logaddexp.accumulate(np.concatenate([log_cell, [log_tail]])[::-1])[::-1]
        #: normalizing constant ``c = 1 / int_0^inf exp(-int_0^x H)``
        self.normalizer = float(math.exp(-log_s[0]))
        cum_mu = log_s[0] - log_s
        cum_mu[0] = 0.0
        rate_lo = np.exp(-cum[:-1] - log_s[:-1])
        rate_hi = np.exp(-cum[1:] - log_s[1:])
        self.hazard = hazard
        self.table = HazardTable(nodes, np.maximum.accumulate(cum_mu), rate_lo, rate_hi)

    def pdf(self, x):
        return self.normalizer * self.hazard.table.survival(x)

    def cdf(self, x):
        return 1.0 - self.table.survival(x)

    def sample(self, rng, size=None):
        return self.table.sample(rng, size)


def rate_infimum(hazard) -> float:
    """Infimum of a tabulated rate over the table nodes, cell midpoints and tail."""
    tab = hazard.table
    mids = tab.nodes[:-1] + 0.5 * tab.widths
    return float(min(tab.rate_lo.min(), tab.rate_hi.min(), np.min(hazard(mids)), tab.tail_rate))


def rate_supremum(hazard) -> float:
    tab = hazard.table
    mids = tab.nodes[:-1] + 0.5 * tab.widths
    return float(max(tab.rate_lo.max(), tab.rate_hi.max(), np.max(hazard(mids)), tab.tail_rate))


# --------------------------------------------------------------------------
# Malthus data


@dataclass(frozen=True, eq=False)
class MalthusData:
    """Growth-rate objects attached to a pair ``(B, p)``.

    Attributes
    ----------
    lam : float
        Malthus parameter, root of ``m int B exp(-lam x - int_0^x B) = 1``.
    residual : float
        ``m * int B exp(-lam x - int B) - 1`` at ``lam``.
    biased : BiasedRate
        ``H_B`` and its hazard table.
    invariant : StationaryAgeLaw
        ``mu_B``, invariant law of the age process driven by ``H_B``.
    """

    rate: RateFunction
    offspring: OffspringLaw
    lam: float
    residual: float
    iterations: int

    @property
    def m(self) -> float:
        return self.offspring.mean

    @cached_property
    def biased(self) -> BiasedRate:
        return BiasedRate(self.rate, self.m, self.lam)

    @cached_property
    def invariant(self) -> StationaryAgeLaw:
        return StationaryAgeLaw(self.biased)

    def biased_rate(self, x):
        return self.biased(x)

    def biased_density(self, x):
        """``f_{H_B}(x) = m exp(-lam x) f_B(x)``."""
        return self.m * np.exp(-self.lam * np.asarray(x, dtype=float)) * lifetime_density(self.rate, x)

    def invariant_density(self, x):
        return self.invariant.pdf(x)

    @property
    def c(self) -> float:
        """Normalizer of ``mu_B``."""
        return self.invariant.normalizer

    @cached_property
    def rho(self) -> float:
        """``inf_x H_B(x)``: dense-grid infimum combined with the tail rate."""
        return rate_infimum(self.biased)

    @cached_property
    def _survival_integral(self) -> float:
        """``int_0^inf exp(-int_0^x H_B)`` on the hazard table."""
        tab = self.biased.table
        xq, wq = tab.quadrature()
        return float(np.dot(wq, tab.survival(xq)) + tab.survival(tab.x_end) / tab.tail_rate)

    @property
    def kappa_boundary(self) -> float:
        """``kappa_B``, with ``E|alive at T| ~ kappa_B exp(lam T)``."""
        return 1.0 / (self.lam * self.m / (self.m - 1.0) * self._survival_integral)

    @property
    def kappa_interior(self) -> float:
        """``kappa'_B``, with ``E|dead before T| ~ kappa'_B exp(lam T)``."""
        return 1.0 / (self.lam * self.m * self._survival_integral)

    @property
    def x_max(self) -> float:
        """Age beyond which ``upper * exp(-(lam + b) x)`` drops below 1e-16."""
        b, up = self.rate.lower, self.rate.upper
        return max(self.rate.starts[-1], 0.0) + math.log(max(up, 1.0) / 1e-16) / (self.lam + b)

    def summary(self) -> dict:
        return {
            "lambda": self.lam,
            "malthus_residual": self.residual,
            "m": self.m,
            "rho": self.rho,
            "c_B": self.c,
            "kappa_B": self.kappa_boundary,
            "kappa_prime_B": self.kappa_interior,
        }


def solve_malthus(rate: RateFunction, offspring: OffspringLaw, tol: float = MALTHUS_TOL) -> MalthusData:
    """Malthus parameter by bisection on ``(0, (m-1) sup B]`` and secant polish.

    ``lam -> m int B exp(-lam x - int B)`` decreases strictly from ``m`` to 0,
    and equals 1 at ``(m-1) b`` for constant ``B = b``; comparison with
    constant rates brackets the root.
    """
    m = offspring.mean
    if m < 2:
        raise ValueError(f"mean offspring must be >= 2, got {m}")
    transform = _malthus_transform(rate)

    def resid(lam):
        return m * transform(lam) - 1.0

    lo, hi = 0.0, (m - 1.0) * rate.upper
    f_lo, f_hi = resid(lo), resid(hi)
    if abs(f_hi) <= tol:
        return MalthusData(rate, offspring, hi, f_hi, 0)
    if not (f_lo > 0 > f_hi):
        raise MalthusError(
            f"Malthus equation not bracketed on [{lo}, {hi}]: residuals {f_lo:.3e}, {f_hi:.3e}"
        )
    it = 0
    while hi - lo > 1e-6 * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        f_mid = resid(mid)
        it += 1
        if f_mid > 0:
            lo, f_lo = mid, f_mid
        else:
            hi, f_hi = mid, f_mid
    # secant on the bracket, falling back to bisection if a step escapes it
    a, fa, b, fb = lo, f_lo, hi, f_hi
    lam, f = (a, fa) if abs(fa) < abs(fb) else (b, fb)
    for _ in range(100):
        if abs(f) <= tol:
            break
        it += 1
        new = b - fb * (b - a) / (fb - fa) if fb != fa else 0.5 * (lo + hi)
        if not lo < new < hi:
            new = 0.5 * (lo + hi)
        f_new = resid(new)
        if f_new > 0:
            lo = new
        else:
            hi = new
        a, fa, b, fb = b, fb, new, f_new
        lam, f = new, f_new
        if hi - lo < 4e-16 * hi:
            break
    if abs(f) > 1e-10:
        raise MalthusError(f"Malthus solver stalled at lam={lam!r} with residual {f:.3e}")
    return MalthusData(rate, offspring, float(lam), float(f), it)


def biased_rate(md: MalthusData, x: float) -> float:
    """``H_B(x)`` from the defining quotient, switching to the tail form near 0/0.

    ``H_B(x) = m e^{-lam x} f_B(x) / (1 - m int_0^x e^{-lam y} f_B(y) dy)``; when
    the denominator falls below :data:`DENOMINATOR_GUARD` the equivalent
    ``B(x) / int_x^inf B(y) e^{-lam (y-x)} e^{-int_x^y B} dy`` is used.
    """
    if x < 0:
        raise ValueError("age must be nonnegative")
    rate, lam, m = md.rate, md.lam, md.m
    tab = rate.table

    def weighted_density(y):
        return float(rate(y)) * math.exp(-lam * y - float(tab.cumulative(y)))

    den = 1.0 - m * _split_quad(weighted_density, 0.0, x, rate.breakpoints)
    if den >= DENOMINATOR_GUARD:
        return m * weighted_density(x) / den
    lx = float(tab.cumulative(x))

    def shifted(y):
        return float(rate(y)) * math.exp(-lam * (y - x) - (float(tab.cumulative(y)) - lx))

    upper = x + math.log(1e17) / (lam + rate.lower)
    return float(rate(x)) / _split_quad(shifted, x, upper, rate.breakpoints)


# --------------------------------------------------------------------------
# limit measures


def _check_tail(md: MalthusData, g: Callable, x_max: float):
    for x in (x_max, 2 * x_max):
        gx = float(g(x))
        if not math.isfinite(gx):
            raise ValueError(f"test function is not finite at x={x:g}")
        if abs(gx) * math.exp(-(md.lam + md.rate.lower) * x) > 1e-10:
            raise ValueError("test function grows too fast to be integrable against the limit measure")


def limit_measure_boundary(md: MalthusData, g: Callable, points: Iterable[float] = ()) -> float:
    """``(lam m/(m-1)) int g(x) exp(-lam x - int_0^x B) dx``: limit of averages over the living."""
    x_max = md.x_max
    _check_tail(md, g, x_max)
    tab = md.rate.table
    val = _split_quad(
        lambda x: float(g(x)) * math.exp(-md.lam * x - float(tab.cumulative(x))),
        0.0,
        x_max,
        list(md.rate.breakpoints) + list(points),
    )
    return md.lam * md.m / (md.m - 1.0) * val


def limit_measure_interior(md: MalthusData, g: Callable, points: Iterable[float] = ()) -> float:
    """``m int g(x) exp(-lam x) f_B(x) dx = int g f_H``: limit of averages over the dead."""
    x_max = md.x_max
    _check_tail(md, g, x_max)
    rate, tab = md.rate, md.rate.table
    val = _split_quad(
        lambda x: float(g(x)) * float(rate(x)) * math.exp(-md.lam * x - float(tab.cumulative(x))),
        0.0,
        x_max,
        list(rate.breakpoints) + list(points),
    )
    return md.m * val


# --------------------------------------------------------------------------
# regimes and rates


@dataclass(frozen=True)
class RateDiagnostics:
    """Ordering of growth and mixing rates and the resulting convergence rates."""

    lam: float
    rho: float
    regime: str
    varpi: float
    #: membership in the smooth class ``b <= B <= mb/(m-1), B' - B^2 <= 0``;
    #: ``None`` when no derivative is available
    smooth_class_member: bool | None
    b: float

    @property
    def is_fast_mixing(self) -> bool:
        return self.lam <= self.rho

    def _critical(self, tol=1e-12) -> bool:
        return abs(self.lam - 2 * self.rho) <= tol * max(1.0, self.lam)

    def v_T(self, T):
        """Rate of the empirical measures over the living / dead particles."""
        T = np.asarray(T, dtype=float)
        if self._critical():
            return np.sqrt(T) * np.exp(-self.lam * T / 2)
        return np.exp(-min(self.rho, self.lam / 2) * T)

    def w_T(self, T, beta: float):
        """Pointwise rate of the division-rate estimator at smoothness ``beta``."""
        T = np.asarray(T, dtype=float)
        excess = max(self.lam / self.rho - 1.0, 0.0) / 2
        expo = min(self.lam, 2 * self.rho) * (beta - excess) / (2 * beta + 1)
        prefactor = T if self._critical() else 1.0
        return prefactor * np.exp(-expo * T)

    def as_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "rho": self.rho,
            "regime": self.regime,
            "varpi": self.varpi,
            "smooth_class_member": self.smooth_class_member,
            "b": self.b,
        }


def _regime_grid(rate: RateFunction) -> np.ndarray:
    stop = rate.starts[-1] + 30.0 / rate.lower
    grid = np.arange(0.0, stop, 1e-3)
    # stay off the breakpoints, where derivatives are one-sided
    for bp in rate.breakpoints:
        grid = grid[np.abs(grid - bp) > 2e-5]
    return grid


def classify_regime(
    rate: RateFunction,
    offspring: OffspringLaw,
    md: MalthusData | None = None,
    finite_differences: bool = True,
    tol: float = 1e-9,
) -> RateDiagnostics:
    md = md if md is not None else solve_malthus(rate, offspring)
    lam, rho, m = md.lam, md.rho, offspring.mean
    if abs(lam - rho) <= tol * max(1.0, lam):
        regime = "both-boundary"
    elif lam < rho:
        regime = "B+"
    else:
        regime = "B-"
    varpi = min(max(1.0, lam / rho), 2.0)

    grid = _regime_grid(rate)
    values = rate(grid)
    b = float(values.min())
    member: bool | None
    if not rate.has_derivative and not finite_differences:
        member = None
    else:
        slope = rate.derivative(grid)
        in_envelope = bool(values.max() <= m * b / (m - 1.0) * (1 + 1e-12))
        member = in_envelope and bool(np.all(slope - values**2 <= 1e-10))
    return RateDiagnostics(lam=lam, rho=rho, regime=regime, varpi=varpi, smooth_class_member=member, b=b)
