"""Tagged-particle age processes and Monte-Carlo checks of tree identities.

The age process driven by a rate ``H`` grows at unit speed and jumps back to
0 at rate ``H(age)``.  Holding times are drawn by inverting the cumulative
hazard from the current age, using the same tables as the tree simulator.

The ``verify_*`` functions compare an average over simulated trees with the
corresponding expression in the tagged process driven by the biased rate
``H_B`` started from age 0, and report a z-score.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .model import MalthusData, rate_infimum, rate_supremum, solve_malthus
from .offspring import OffspringLaw
from .rates import RateFunction
from .tree import DEFAULT_POPULATION_CAP, simulate_forest

#: time nodes of the trapezoid rule used for the time integrals
DEFAULT_TIME_NODES = 257
#: batches for jackknife standard errors of nonlinear functionals
JACKKNIFE_BATCHES = 40


# --------------------------------------------------------------------------
# paths


@dataclass(frozen=True)
class AgeChain:
    """Terminal state of age processes after ``t_end``."""

    age: np.ndarray
    jumps: np.ndarray
    t_end: float


def simulate_chain(H, x0, t_end: float, rng: np.random.Generator, size: int | None = None) -> AgeChain:
    """Run age processes driven by ``H`` from ``x0`` for a time ``t_end``.

    ``x0`` may be a scalar (with ``size`` paths) or an array of start ages.
    """
    if t_end < 0:
        raise ValueError("t_end must be nonnegative")
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 0:
        x0 = np.full(1 if size is None else size, float(x0))
    table = H.table
    n = len(x0)
    age = x0.copy()
    jumps = np.zeros(n, dtype=np.int64)
    remaining = np.full(n, float(t_end))
    active = np.flatnonzero(remaining > 0)
    start = x0.copy()
    while len(active):
        hold = table.sample(rng, len(active), start_age=start[active])
        done = hold >= remaining[active]
        fin = active[done]
        age[fin] = start[fin] + remaining[fin]
        jumped = active[~done]
        remaining[jumped] -= hold[~done]
        jumps[jumped] += 1
        start[jumped] = 0.0
        age[jumped] = 0.0
        active = jumped
    return AgeChain(age=age, jumps=jumps, t_end=float(t_end))


def ages_on_grid(H, x0, grid: np.ndarray, n_paths: int, rng: np.random.Generator):
    """Yield ``(j, ages)`` with the ages of ``n_paths`` paths at ``grid[j]``.

    Paths are advanced jointly from grid point to grid point, so memory stays
    at O(n_paths) whatever the grid size.
    """
    grid = np.asarray(grid, dtype=float)
    if np.any(np.diff(grid) < 0) or grid[0] < 0:
        raise ValueError("grid must be nonnegative and increasing")
    table = H.table
    x0 = np.broadcast_to(np.asarray(x0, dtype=float), (n_paths,)).copy()
    last = -x0  # time of the last reset, so that age = t - last
    nxt = table.sample(rng, n_paths, start_age=x0)
    for j, t in enumerate(grid):
        due = np.flatnonzero(nxt <= t)
        while len(due):
            last[due] = nxt[due]
            nxt[due] = nxt[due] + table.sample(rng, len(due))
            due = due[nxt[due] <= t]
        yield j, t - last


def semigroup_mc(H, g: Callable, x0, t: float, n_paths: int, rng: np.random.Generator):
    """Monte-Carlo estimate of ``P^t g(x0) = E[g(age_t) | age_0 = x0]`` and its standard error.

    With an array ``x0`` of length ``n_paths`` the estimate is the average of
    ``P^t g`` over those starting points.
    """
    if np.ndim(x0) == 0:
        chain = simulate_chain(H, float(x0), t, rng, size=n_paths)
    else:
        chain = simulate_chain(H, x0, t, rng)
    vals = np.asarray(g(chain.age), dtype=float) * np.ones(len(chain.age))
    se = vals.std(ddof=1) / math.sqrt(len(vals)) if len(vals) > 1 else 0.0
    return float(vals.mean()), float(se)


def stationary_ages(md: MalthusData, rng: np.random.Generator, size: int):
    """Draws from ``mu_B``, the invariant law of the ``H_B``-driven age process."""
    return md.invariant.sample(rng, size)


# --------------------------------------------------------------------------
# coupling


@dataclass(frozen=True)
class CouplingResult:
    t: np.ndarray
    frequency: np.ndarray
    se: np.ndarray
    bound: np.ndarray
    rho: float

    @property
    def ok(self) -> np.ndarray:
        """Pointwise ``frequency <= exp(-rho t) + 3 SE``."""
        return self.frequency <= self.bound + 3 * self.se


def coupling_times(H, x0: float, z0: np.ndarray, t_max: float, rng: np.random.Generator) -> np.ndarray:
    """Coupling times of pairs of age processes sharing one Poisson random measure.

    The measure has intensity ``dt x du`` on ``[0, inf) x [0, level]``;
    each process jumps at an atom ``(t, u)`` when ``u <= H(age(t-))``.  The
    pair merges at the first atom where both jump.  Pairs still apart at
    ``t_max`` get ``inf``.
    """
    level = 1.01 * rate_supremum(H)
    n = len(z0)
    y = np.full(n, float(x0))
    z = np.asarray(z0, dtype=float).copy()
    now = np.zeros(n)
    tau = np.full(n, np.inf)
    active = np.arange(n)
    while len(active):
        step = rng.exponential(1.0 / level, len(active))
        u = rng.uniform(0.0, level, len(active))
        now[active] += step
        ya = y[active] + step
        za = z[active] + step
        jy = u <= H(ya)
        jz = u <= H(za)
        both = jy & jz
        tau[active[both]] = now[active[both]]
        y[active] = np.where(jy, 0.0, ya)
        z[active] = np.where(jz, 0.0, za)
        active = active[~both & (now[active] <= t_max)]
    return tau


def coupling_tv(H, x0: float, t_grid, n_pairs: int, rng: np.random.Generator,
                start_sampler: Callable | None = None) -> CouplingResult:
    """Empirical ``P(Y_t != Z_t)`` for ``Y_0 = x0`` and ``Z_0`` stationary.

    ``start_sampler(rng, n)`` draws the stationary starts; by default they
    come from the invariant law of the age process driven by ``H``.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if start_sampler is None:
        from .model import StationaryAgeLaw

        law = StationaryAgeLaw(H)
        start_sampler = law.sample
    z0 = start_sampler(rng, n_pairs)
    tau = coupling_times(H, x0, z0, float(t_grid.max()), rng)
    freq = np.array([np.mean(tau > t) for t in t_grid])
    se = np.sqrt(freq * (1 - freq) / n_pairs)
    rho = rate_infimum(H)
    return CouplingResult(t=t_grid, frequency=freq, se=se, bound=np.exp(-rho * t_grid), rho=rho)


# --------------------------------------------------------------------------
# many-to-one reports


@dataclass
class MtoReport:
    identity: str
    T: float
    sizes: dict
    lhs: float
    lhs_se: float
    rhs: float
    rhs_se: float
    z: float
    quadrature_error: float = 0.0

    @property
    def ok(self) -> bool:
        return abs(self.z) <= 3.0

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def _z(lhs, lhs_se, rhs, rhs_se, quad=0.0) -> float:
    scale = math.sqrt(lhs_se**2 + rhs_se**2 + quad**2)
    if scale == 0.0:
        return 0.0 if lhs == rhs else math.copysign(math.inf, lhs - rhs)
    return (lhs - rhs) / scale


def _mean_se(values: np.ndarray) -> tuple[float, float]:
    values = np.asarray(values, dtype=float)
    se = values.std(ddof=1) / math.sqrt(len(values)) if len(values) > 1 else 0.0
    return float(values.mean()), float(se)


def _trapezoid_weights(n: int, T: float) -> np.ndarray:
    w = np.full(n, T / (n - 1))
    w[[0, -1]] *= 0.5
    return w


def _trapezoid_cumulative(f: np.ndarray, dt: float) -> np.ndarray:
    """``F[j] = int_0^{t_j} f`` on a uniform grid."""
    out = np.zeros_like(f)
    out[..., 1:] = np.cumsum(0.5 * dt * (f[..., 1:] + f[..., :-1]), axis=-1)
    return out


class _TaggedSampler:
    """Batched tagged paths started at 0, summarized on a uniform time grid."""

    def __init__(self, md: MalthusData, T: float, n_nodes: int, n_paths: int, rng, batches: int):
        if (n_nodes - 1) % 2:
            raise ValueError("the time grid needs an odd number of nodes for the Richardson check")
        self.md = md
        self.grid = np.linspace(0.0, T, n_nodes)
        self.n_paths = n_paths
        self.batches = batches
        self.rng = rng

    def batch_means(self, functions: dict[str, Callable]) -> dict[str, np.ndarray]:
        """``out[name][b, j]`` = batch-``b`` mean of ``fn(age at grid[j])``."""
        n_b = self.batches
        sizes = np.full(n_b, self.n_paths // n_b)
        sizes[: self.n_paths % n_b] += 1
        batch = np.repeat(np.arange(n_b), sizes)
        out = {k: np.zeros((n_b, len(self.grid))) for k in functions}
        for j, ages in ages_on_grid(self.md.biased, 0.0, self.grid, self.n_paths, self.rng):
            for k, fn in functions.items():
                out[k][:, j] = np.bincount(batch, weights=fn(ages), minlength=n_b) / sizes
        return out, sizes


def _jackknife(stat: Callable[[np.ndarray], float], batch_values: dict, sizes: np.ndarray):
    """Delete-one-batch jackknife for ``stat`` of the pooled batch means."""
    w = sizes / sizes.sum()

    def pooled(mask):
        ww = w[mask] / w[mask].sum()
        return {k: (v[mask] * ww[:, None]).sum(axis=0) for k, v in batch_values.items()}

    full_mask = np.ones(len(sizes), dtype=bool)
    full = stat(pooled(full_mask))
    leave = []
    for b in range(len(sizes)):
        mask = full_mask.copy()
        mask[b] = False
        leave.append(stat(pooled(mask)))
    leave = np.asarray(leave)
    n = len(sizes)
    se = math.sqrt((n - 1) / n * np.sum((leave - leave.mean()) ** 2))
    return full, se


def _richardson(stat_fine: float, stat_coarse: float) -> float:
    """Trapezoid error estimate from a grid and its every-other-node subgrid."""
    return abs(stat_fine - stat_coarse) / 3.0


def _prepare(rate, law, md):
    md = md if md is not None else solve_malthus(rate, law)
    return md


def _tree_side(forest, values: np.ndarray) -> tuple[float, float]:
    return _mean_se(values)


def verify_mto_boundary(
    rate: RateFunction,
    law: OffspringLaw,
    g: Callable,
    T: float,
    n_trees: int,
    n_paths: int,
    rng: np.random.Generator,
    md: MalthusData | None = None,
    cap: int = DEFAULT_POPULATION_CAP,
) -> MtoReport:
    """``E sum_{u alive at T} g(age_u) = (e^{lam T}/m) E[g H_B/B (chi_T)]``."""
    md = _prepare(rate, law, md)
    forest = simulate_forest(rate, law, T, n_trees, rng, cap)
    cens = forest.censored
    ages = forest.observed_age()
    lhs, lhs_se = _tree_side(forest, forest.tree_sums(g(ages), cens))
    chain = simulate_chain(md.biased, 0.0, T, rng, size=n_paths)
    a = chain.age
    vals = math.exp(md.lam * T) / md.m * g(a) * md.biased(a) / rate(a)
    rhs, rhs_se = _mean_se(np.asarray(vals, dtype=float) * np.ones(n_paths))
    return MtoReport("boundary", T, {"n_trees": n_trees, "n_paths": n_paths}, lhs, lhs_se, rhs, rhs_se,
                     _z(lhs, lhs_se, rhs, rhs_se))


def verify_mto_interior(
    rate: RateFunction,
    law: OffspringLaw,
    g: Callable,
    T: float,
    n_trees: int,
    n_paths: int,
    rng: np.random.Generator,
    md: MalthusData | None = None,
    n_nodes: int = DEFAULT_TIME_NODES,
    cap: int = DEFAULT_POPULATION_CAP,
) -> MtoReport:
    """``E sum_{u dead before T} g(lifetime_u) = (1/m) int_0^T e^{lam s} E[g H_B(chi_s)] ds``.

    Each tagged path contributes its own trapezoid sum, so the standard error
    is exact; the Richardson estimate of the time discretization is added to
    the z-score denominator.
    """
    md = _prepare(rate, law, md)
    forest = simulate_forest(rate, law, T, n_trees, rng, cap)
    inter = forest.interior
    lhs, lhs_se = _tree_side(forest, forest.tree_sums(g(forest.lifetime), inter))
    grid = np.linspace(0.0, T, n_nodes)
    w_fine = _trapezoid_weights(n_nodes, T) * np.exp(md.lam * grid) / md.m
    w_coarse = np.zeros(n_nodes)
    w_coarse[::2] = _trapezoid_weights((n_nodes + 1) // 2, T) * np.exp(md.lam * grid[::2]) / md.m
    fine = np.zeros(n_paths)
    coarse = np.zeros(n_paths)
    for j, ages in ages_on_grid(md.biased, 0.0, grid, n_paths, rng):
        v = g(ages) * md.biased(ages)
        fine += w_fine[j] * v
        if w_coarse[j]:
            coarse += w_coarse[j] * v
    rhs, rhs_se = _mean_se(fine)
    quad = _richardson(rhs, float(coarse.mean()))
    return MtoReport("interior", T, {"n_trees": n_trees, "n_paths": n_paths, "time_nodes": n_nodes},
                     lhs, lhs_se, rhs, rhs_se, _z(lhs, lhs_se, rhs, rhs_se, quad), quad)


def _pair_functionals(md: MalthusData, T: float, grid: np.ndarray):
    """Particle-side pair functionals of the grid means ``phi = P^t(gH)(0)`` etc."""
    lam, m, m_bar = md.lam, md.m, md.offspring.pair_constant

    def trapz(vals, g_):
        n = len(g_)
        return float(np.dot(_trapezoid_weights(n, g_[-1]), vals))

    def forks(means, stride=1):
        t = grid[::stride]
        dt = t[1] - t[0]
        phi = means["gH"][::stride]
        psi = means["H"][::stride]
        inner = _trapezoid_cumulative(np.exp(lam * t) * phi, dt)  # inner[j] = int_0^{t_j}
        outer = np.exp(lam * t) * inner[::-1] ** 2 * psi
        return m_bar / m**3 * trapz(outer, t)

    def lineage(means, stride=1):
        t = grid[::stride]
        dt = t[1] - t[0]
        phi = means["gH"][::stride]
        inner = _trapezoid_cumulative(np.exp(lam * t) * phi, dt)
        outer = np.exp(lam * t) * inner[::-1] * phi
        return trapz(outer, t) / m

    def alive_pairs(means, stride=1):
        t = grid[::stride]
        rev = means["gH_over_B"][::stride][::-1]  # P^{T-s}(gH/B)(0)
        psi = means["H"][::stride]
        outer = np.exp(lam * t) * (np.exp(lam * (T - t)) * rev) ** 2 * psi
        return m_bar / m**3 * trapz(outer, t)

    return {"forks": forks, "lineage": lineage, "alive_pairs": alive_pairs}


def verify_mto_pairs(
    rate: RateFunction,
    law: OffspringLaw,
    g: Callable,
    T: float,
    n_trees: int,
    n_paths: int,
    rng: np.random.Generator,
    md: MalthusData | None = None,
    n_nodes: int = DEFAULT_TIME_NODES,
    batches: int = JACKKNIFE_BATCHES,
    cap: int = DEFAULT_POPULATION_CAP,
) -> list[MtoReport]:
    """Pair identities over forks, lineages and pairs alive at ``T``.

    * ``forks``: ordered pairs of distinct dead individuals, neither an
      ancestor of the other;
    * ``lineage``: dead pairs ``(u, v)`` with ``u`` a strict ancestor of ``v``;
    * ``alive_pairs``: ordered pairs of distinct individuals alive at ``T``.

    The particle side is a nonlinear functional of semigroup values on a time
    grid; its standard error comes from a delete-one-batch jackknife.
    """
    md = _prepare(rate, law, md)
    forest = simulate_forest(rate, law, T, n_trees, rng, cap)
    inter = forest.interior
    cens = forest.censored
    gv = np.asarray(g(forest.observed_age()), dtype=float) * np.ones(forest.n_nodes)
    g_int = np.where(inter, gv, 0.0)
    s_int = forest.tree_sums(g_int)
    s2_int = forest.tree_sums(g_int**2)
    # ancestors of any node are dead, so ancestor sums of g_int are sums over u < v in the interior
    lin = forest.tree_sums(g_int * forest.ancestor_sums(g_int))
    fork_vals = s_int**2 - s2_int - 2 * lin
    g_bd = np.where(cens, gv, 0.0)
    alive_vals = forest.tree_sums(g_bd) ** 2 - forest.tree_sums(g_bd**2)

    sampler = _TaggedSampler(md, T, n_nodes, n_paths, rng, batches)
    biased, rate_fn = md.biased, rate
    means, sizes = sampler.batch_means({
        "gH": lambda a: g(a) * biased(a),
        "H": lambda a: biased(a) * np.ones_like(a),
        "gH_over_B": lambda a: g(a) * biased(a) / rate_fn(a),
    })
    functionals = _pair_functionals(md, T, sampler.grid)
    tree_values = {"forks": fork_vals, "lineage": lin, "alive_pairs": alive_vals}
    reports = []
    for name, fn in functionals.items():
        lhs, lhs_se = _mean_se(tree_values[name])
        rhs, rhs_se = _jackknife(fn, means, sizes)
        full = {k: (v * (sizes / sizes.sum())[:, None]).sum(axis=0) for k, v in means.items()}
        quad = _richardson(rhs, fn(full, stride=2))
        reports.append(MtoReport(
            name, T,
            {"n_trees": n_trees, "n_paths": n_paths, "time_nodes": n_nodes, "batches": batches},
            lhs, lhs_se, rhs, rhs_se, _z(lhs, lhs_se, rhs, rhs_se, quad), quad,
        ))
    return reports
