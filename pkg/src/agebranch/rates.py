"""Division-rate functions and tabulated cumulative hazards.

A division rate ``B`` is stored as a list of analytic pieces on consecutive
age intervals.  Every rate carries a :class:`HazardTable`, a piecewise cubic
Hermite interpolant of the cumulative hazard built with one-sided rate values
at the nodes, so that evaluation and inversion of ``x -> int_0^x B`` are
vectorized and accurate to roughly 1e-12.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
from scipy import integrate

GL_NODES, GL_WEIGHTS = np.polynomial.legendre.leggauss(8)

#: Cumulative hazard reached at the end of every table; survival e^-60 ~ 1e-26.
TABLE_HAZARD_TARGET = 60.0
TABLE_STEP = 0.005

TRIAL_PRESETS = ("trial", "paper-trial")


# --------------------------------------------------------------------------
# analytic pieces


@dataclass(frozen=True)
class Polynomial:
    """``sum_k coeffs[k] * x**k`` in the absolute age ``x``."""

    coeffs: tuple[float, ...]

    def __call__(self, x):
        return np.polynomial.polynomial.polyval(x, self.coeffs)

    def derivative(self, x):
        d = np.polynomial.polynomial.polyder(self.coeffs)
        return np.polynomial.polynomial.polyval(x, d) + 0.0 * np.asarray(x)

    def spec(self) -> dict:
        return {"kind": "poly", "coeffs": list(self.coeffs)}


@dataclass(frozen=True)
class ExpRelaxation:
    """``level + amplitude * exp(-decay * (x - origin))``."""

    level: float
    amplitude: float
    decay: float
    origin: float = 0.0

    def __call__(self, x):
        return self.level + self.amplitude * np.exp(-self.decay * (np.asarray(x) - self.origin))

    def derivative(self, x):
        return -self.decay * self.amplitude * np.exp(-self.decay * (np.asarray(x) - self.origin))

    def spec(self) -> dict:
        return {
            "kind": "exp",
            "level": self.level,
            "amplitude": self.amplitude,
            "decay": self.decay,
            "origin": self.origin,
        }


@dataclass(frozen=True)
class Sinusoid:
    """``level + amplitude * sin(omega * x + phase)``."""

    level: float
    amplitude: float
    omega: float
    phase: float = 0.0

    def __call__(self, x):
        return self.level + self.amplitude * np.sin(self.omega * np.asarray(x) + self.phase)

    def derivative(self, x):
        return self.amplitude * self.omega * np.cos(self.omega * np.asarray(x) + self.phase)

    def spec(self) -> dict:
        return {
            "kind": "sin",
            "level": self.level,
            "amplitude": self.amplitude,
            "omega": self.omega,
            "phase": self.phase,
        }


PIECE_KINDS = {"poly": Polynomial, "exp": ExpRelaxation, "sin": Sinusoid}


def piece_from_spec(spec: dict):
    kind = spec.get("kind")
    if kind not in PIECE_KINDS:
        raise ValueError(f"unknown piece kind {kind!r}; expected one of {sorted(PIECE_KINDS)}")
    args = {k: v for k, v in spec.items() if k not in ("kind", "start")}
    if kind == "poly":
        return Polynomial(tuple(float(c) for c in args["coeffs"]))
    return PIECE_KINDS[kind](**{k: float(v) for k, v in args.items()})


# --------------------------------------------------------------------------
# cubic Hermite table


class HazardTable:
    """Cubic Hermite interpolant of a cumulative hazard ``L(x) = int_0^x r``.

    Cell ``k`` spans ``[nodes[k], nodes[k+1]]``; ``rate_lo[k]`` and
    ``rate_hi[k]`` are the one-sided rates at its two ends, so jumps of the
    rate at nodes are represented exactly.  Beyond the last node the rate is
    held at ``rate_hi[-1]``.
    """

    def __init__(self, nodes, cum, rate_lo, rate_hi):
        self.nodes = np.ascontiguousarray(nodes, dtype=float)
        self.cum = np.ascontiguousarray(cum, dtype=float)
        self.rate_lo = np.ascontiguousarray(rate_lo, dtype=float)
        self.rate_hi = np.ascontiguousarray(rate_hi, dtype=float)
        if self.nodes.ndim != 1 or len(self.nodes) < 2:
            raise ValueError("a hazard table needs at least two nodes")
        if not (len(self.cum) == len(self.nodes) and len(self.rate_lo) == len(self.nodes) - 1):
            raise ValueError("inconsistent hazard table shapes")
        if np.any(np.diff(self.cum) < 0):
            raise ValueError("cumulative hazard must be nondecreasing")
        self.widths = np.diff(self.nodes)

    @property
    def x_end(self) -> float:
        return float(self.nodes[-1])

    @property
    def tail_rate(self) -> float:
        return float(self.rate_hi[-1])

    def _cell(self, x):
        k = np.searchsorted(self.nodes, x, side="right") - 1
        return np.clip(k, 0, len(self.widths) - 1)

    def _hermite(self, k, t):
        h = self.widths[k]
        y0, y1 = self.cum[k], self.cum[k + 1]
        d0, d1 = h * self.rate_lo[k], h * self.rate_hi[k]
        t2 = t * t
        t3 = t2 * t
        return (
            (2 * t3 - 3 * t2 + 1) * y0
            + (t3 - 2 * t2 + t) * d0
            + (-2 * t3 + 3 * t2) * y1
            + (t3 - t2) * d1
        )

    def _hermite_slope(self, k, t):
        """Derivative with respect to x (not t)."""
        h = self.widths[k]
        y0, y1 = self.cum[k], self.cum[k + 1]
        d0, d1 = h * self.rate_lo[k], h * self.rate_hi[k]
        t2 = t * t
        return (
            (6 * t2 - 6 * t) * (y0 - y1) + (3 * t2 - 4 * t + 1) * d0 + (3 * t2 - 2 * t) * d1
        ) / h

    def cumulative(self, x):
        x = np.asarray(x, dtype=float)
        k = self._cell(x)
        t = (x - self.nodes[k]) / self.widths[k]
        inside = self._hermite(k, np.clip(t, 0.0, 1.0))
        beyond = self.cum[-1] + self.tail_rate * (x - self.x_end)
        return np.where(x > self.x_end, beyond, inside)

    def rate(self, x):
        x = np.asarray(x, dtype=float)
        k = self._cell(x)
        t = np.clip((x - self.nodes[k]) / self.widths[k], 0.0, 1.0)
        return np.where(x > self.x_end, self.tail_rate, self._hermite_slope(k, t))

    def survival(self, x):
        return np.exp(-self.cumulative(x))

    def inverse(self, y, iterations: int = 6):
        """Solve ``L(x) = y`` for ``y >= 0``."""
        y = np.asarray(y, dtype=float)
        k = np.searchsorted(self.cum, y, side="right") - 1
        k = np.clip(k, 0, len(self.widths) - 1)
        y0, y1 = self.cum[k], self.cum[k + 1]
        span = np.where(y1 > y0, y1 - y0, 1.0)
        t = np.clip((y - y0) / span, 0.0, 1.0)
        h = self.widths[k]
        for _ in range(iterations):
            slope = np.maximum(self._hermite_slope(k, t) * h, 1e-300)
            t = np.clip(t - (self._hermite(k, t) - y) / slope, 0.0, 1.0)
        x = self.nodes[k] + t * h
        beyond = self.x_end + (y - self.cum[-1]) / self.tail_rate
        return np.where(y > self.cum[-1], beyond, x)

    def sample(self, rng: np.random.Generator, size=None, start_age=0.0):
        """Draw residual holding times from ``start_age`` by hazard inversion.

        ``P(tau > s) = exp(-(L(start_age + s) - L(start_age)))``.
        """
        e = rng.standard_exponential(size)
        start_age = np.asarray(start_age, dtype=float)
        return self.inverse(self.cumulative(start_age) + e) - start_age

    def quadrature(self, points_per_cell: int = 8):
        """Composite Gauss-Legendre nodes and weights over ``[0, x_end]``."""
        if points_per_cell == 8:
            gx, gw = GL_NODES, GL_WEIGHTS
        else:
            gx, gw = np.polynomial.legendre.leggauss(points_per_cell)
        mid = 0.5 * (self.nodes[:-1] + self.nodes[1:])
        half = 0.5 * self.widths
        x = (mid[:, None] + half[:, None] * gx[None, :]).ravel()
        w = (half[:, None] * gw[None, :]).ravel()
        return x, w


def cell_integrals(nodes, fn, *args):
    """Gauss-Legendre integrals of a vectorized ``fn`` over every cell."""
    nodes = np.asarray(nodes, dtype=float)
    mid = 0.5 * (nodes[:-1] + nodes[1:])
    half = 0.5 * np.diff(nodes)
    x = mid[:, None] + half[:, None] * GL_NODES[None, :]
    vals = fn(x, *args)
    return half * (vals @ GL_WEIGHTS)


# --------------------------------------------------------------------------
# rate functions


class RateFunction:
    """Division rate ``B`` as consecutive analytic pieces.

    Parameters
    ----------
    starts : sequence of float
        Left ends of the pieces, strictly increasing, ``starts[0] == 0``.
        Piece ``i`` covers ``(starts[i], starts[i+1]]`` (piece 0 also owns
        age 0) and the last piece extends to infinity.
    pieces : sequence of callables
        Vectorized functions of the absolute age.  Pieces exposing a
        ``derivative`` method make :meth:`derivative` analytic.
    lower, upper : float, optional
        Envelope ``lower <= B <= upper``.  Estimated on a dense grid when
        omitted.
    name : str
        Label used in reports.
    """

    def __init__(
        self,
        starts: Sequence[float],
        pieces: Sequence[Callable],
        lower: float | None = None,
        upper: float | None = None,
        name: str = "custom",
        step: float = TABLE_STEP,
    ):
        starts = [float(s) for s in starts]
        if len(starts) != len(pieces) or not starts:
            raise ValueError("starts and pieces must have the same nonzero length")
        if starts[0] != 0.0 or any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError("piece starts must begin at 0 and increase strictly")
        self.starts = np.array(starts)
        self.pieces = tuple(pieces)
        self.name = name
        self.step = float(step)
        if lower is None or upper is None:
            lo, hi = self._scan_bounds()
            lower = lo if lower is None else lower
            upper = hi if upper is None else upper
        self.lower = float(lower)
        self.upper = float(upper)
        if not self.lower > 0:
            raise ValueError(f"rate must be bounded below by a positive constant, got {self.lower}")
        if self.upper < self.lower:
            raise ValueError("upper bound below lower bound")

    # -- constructors ---------------------------------------------------

    @classmethod
    def constant(cls, b: float) -> "RateFunction":
        if b <= 0:
            raise ValueError("constant rate must be positive")
        return cls([0.0], [Polynomial((float(b),))], lower=b, upper=b, name=f"constant b={b:g}")

    @classmethod
    def trial(cls) -> "RateFunction":
        """Cubic on [0, 3/2] joined to an exponential relaxation towards 119/160."""
        cubic = Polynomial((4 / 10, 5 / 8, -7 / 8, 1 / 3))
        relax = ExpRelaxation(level=119 / 160, amplitude=-1 / 4, decay=1.0, origin=1.5)
        return cls([0.0, 1.5], [cubic, relax], lower=0.4, upper=119 / 160, name="trial")

    @classmethod
    def from_callable(cls, fn: Callable, lower: float, upper: float, name: str = "callable",
                      derivative: Callable | None = None) -> "RateFunction":
        piece = _CallablePiece(fn, derivative)
        return cls([0.0], [piece], lower=lower, upper=upper, name=name)

    # -- evaluation ------------------------------------------------------

    def _piece_index(self, x):
        return np.clip(np.searchsorted(self.starts, x, side="left") - 1, 0, len(self.pieces) - 1)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if len(self.pieces) == 1:
            out = np.broadcast_to(self.pieces[0](x), x.shape).astype(float)
            return out if out.ndim else float(out)
        idx = self._piece_index(x)
        out = np.empty(x.shape)
        for i, piece in enumerate(self.pieces):
            mask = idx == i
            if np.any(mask):
                out[mask] = piece(x[mask])
        return out if out.ndim else float(out)

    @property
    def has_derivative(self) -> bool:
        return all(hasattr(p, "derivative") and getattr(p, "derivative") is not None for p in self.pieces)

    def derivative(self, x, fd_step: float = 1e-5):
        """Analytic derivative when every piece provides one, else central differences."""
        x = np.asarray(x, dtype=float)
        if self.has_derivative:
            idx = self._piece_index(x)
            out = np.empty(x.shape)
            for i, piece in enumerate(self.pieces):
                mask = idx == i
                if np.any(mask):
                    out[mask] = piece.derivative(x[mask])
            return out if out.ndim else float(out)
        lo = np.maximum(x - fd_step, 0.0)
        return (self(x + fd_step) - self(lo)) / (x + fd_step - lo)

    @property
    def breakpoints(self) -> list[float]:
        return [float(s) for s in self.starts[1:]]

    def cumulative_hazard(self, x: float) -> float:
        """``int_0^x B`` by adaptive Gauss-Kronrod quadrature, piece by piece."""
        if x < 0:
            raise ValueError(f"age must be nonnegative, got {x}")
        total = 0.0
        edges = [s for s in self.starts if s < x] + [x]
        for a, b in zip(edges, edges[1:]):
            piece = self.pieces[int(self._piece_index(0.5 * (a + b)))]
            val, _ = integrate.quad(lambda y: float(piece(y)), a, b, epsabs=0.0, epsrel=1e-13, limit=200)
            total += val
        return total

    def survival(self, x):
        return self.table.survival(x)

    def density(self, x):
        """Lifetime density ``B(x) exp(-int_0^x B)``."""
        return self(x) * self.table.survival(x)

    def sample(self, rng: np.random.Generator, size=None):
        return self.table.sample(rng, size)

    # -- tabulation ------------------------------------------------------

    @cached_property
    def x_end(self) -> float:
        return float(self.starts[-1] + TABLE_HAZARD_TARGET / self.lower)

    @cached_property
    def table(self) -> HazardTable:
        nodes, lo, hi, incr = [], [], [], []
        ends = list(self.starts[1:]) + [self.x_end]
        for a, b, piece in zip(self.starts, ends, self.pieces):
            n = max(1, int(math.ceil((b - a) / self.step)))
            grid = np.linspace(a, b, n + 1)
            nodes.append(grid[:-1])
            lo.append(np.broadcast_to(piece(grid[:-1]), (n,)))
            hi.append(np.broadcast_to(piece(grid[1:]), (n,)))
            incr.append(cell_integrals(grid, lambda z, p=piece: np.broadcast_to(p(z), z.shape)))
        nodes = np.concatenate(nodes + [[self.x_end]])
        cum = np.concatenate([[0.0], np.cumsum(np.concatenate(incr))])
        return HazardTable(nodes, cum, np.concatenate(lo), np.concatenate(hi))

    def _scan_bounds(self):
        vals = []
        ends = list(self.starts[1:]) + [self.starts[-1] + 200.0]
        for a, b, piece in zip(self.starts, ends, self.pieces):
            grid = np.linspace(a, b, 20001)
            vals.append(np.broadcast_to(piece(grid), grid.shape))
        vals = np.concatenate(vals)
        return float(vals.min()), float(vals.max())

    def spec(self) -> dict:
        """Serializable description, inverse of :func:`rate_from_spec`."""
        if self.name.startswith("constant"):
            return {"preset": "constant", "b": float(self.pieces[0].coeffs[0])}
        if self.name == "trial":
            return {"preset": "trial"}
        pieces = []
        for start, piece in zip(self.starts, self.pieces):
            if not hasattr(piece, "spec"):
                raise ValueError("rate built from an arbitrary callable has no declarative form")
            pieces.append({"start": float(start), **piece.spec()})
        return {"pieces": pieces}

    def __repr__(self) -> str:
        return f"RateFunction({self.name!r}, bounds=[{self.lower:.6g}, {self.upper:.6g}])"


class _CallablePiece:
    def __init__(self, fn, derivative=None):
        self.fn = fn
        self.derivative = derivative

    def __call__(self, x):
        return np.asarray(self.fn(x), dtype=float)


def rate_from_spec(spec: dict | str) -> RateFunction:
    """Build a rate from a config mapping or preset string.

    Accepted forms::

        "trial"                       # alias "paper-trial"
        "constant b=0.4"
        {"preset": "trial"}
        {"preset": "constant", "b": 0.4}
        {"pieces": [{"start": 0, "kind": "poly", "coeffs": [0.4, 0.1]},
                    {"start": 2, "kind": "exp", "level": 0.6, "amplitude": -0.1,
                     "decay": 1.0, "origin": 2}],
         "lower": 0.4, "upper": 0.7}      # bounds optional
    """
    if isinstance(spec, str):
        words = spec.split()
        if not words:
            raise ValueError("empty rate preset")
        params = dict(w.split("=", 1) for w in words[1:] if "=" in w)
        spec = {"preset": words[0], **params}
    if "preset" in spec:
        preset = spec["preset"]
        if preset in TRIAL_PRESETS:
            return RateFunction.trial()
        if preset == "constant":
            if "b" not in spec:
                raise ValueError("constant preset requires b")
            return RateFunction.constant(float(spec["b"]))
        raise ValueError(f"unknown rate preset {preset!r}")
    if "pieces" in spec:
        pieces = sorted(spec["pieces"], key=lambda p: float(p.get("start", 0.0)))
        starts = [float(p.get("start", 0.0)) for p in pieces]
        return RateFunction(
            starts,
            [piece_from_spec(p) for p in pieces],
            lower=spec.get("lower"),
            upper=spec.get("upper"),
            name=spec.get("name", "piecewise"),
        )
    raise ValueError("rate spec needs either 'preset' or 'pieces'")
