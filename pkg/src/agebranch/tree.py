"""Bellman-Harris trees observed up to a horizon ``T``.

Trees are grown one generation at a time: every node of the current frontier
gets a lifetime by hazard inversion, nodes dying before ``T`` get an
offspring count, and their children (born at the parent's death) form the
next frontier.  Storage is a flat struct-of-arrays in which parents always
precede their children.

Several independent trees can be grown together (:func:`simulate_forest`);
the per-generation work is then vectorized across the whole batch.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .offspring import OffspringLaw
from .rates import RateFunction

DEFAULT_POPULATION_CAP = 10_000_000


class PopulationCapExceeded(RuntimeError):
    """Raised when a simulation would materialize more nodes than allowed."""


# --------------------------------------------------------------------------
# elementary draws


def sample_lifetime(rate: RateFunction, rng: np.random.Generator, size=None):
    """Lifetimes with density ``f_B`` by inversion of the cumulative hazard."""
    return rate.table.sample(rng, size)


def sample_offspring(law: OffspringLaw, rng: np.random.Generator, size=None):
    return law.sample(rng, size)


# --------------------------------------------------------------------------
# containers


@dataclass(frozen=True, eq=False)
class ObservedSample:
    """What the statistician sees at time ``T``.

    ``interior_ages`` are the complete lifetimes of individuals that divided
    before ``T``; ``boundary_ages`` are the ages at ``T`` of the individuals
    still alive.
    """

    interior_ages: np.ndarray
    boundary_ages: np.ndarray
    interior_offspring: np.ndarray
    T: float

    @property
    def n_interior(self) -> int:
        return len(self.interior_ages)

    @property
    def n_boundary(self) -> int:
        return len(self.boundary_ages)


@dataclass(frozen=True, eq=False)
class Forest:
    """Independent trees stored side by side.

    Node ``i`` belongs to tree ``tree_id[i]``; ``parent[i]`` is a global index
    (``-1`` for roots).  Nodes are ordered by generation, and
    ``generation_offsets[k]:generation_offsets[k+1]`` is generation ``k``.
    """

    parent: np.ndarray
    birth: np.ndarray
    lifetime: np.ndarray
    nu: np.ndarray
    tree_id: np.ndarray
    generation_offsets: np.ndarray
    n_trees: int
    T: float
    seed: int | None = None

    @property
    def death(self) -> np.ndarray:
        return self.birth + self.lifetime

    @property
    def censored(self) -> np.ndarray:
        """Alive at ``T``: ``b_u <= T < d_u``."""
        return self.death > self.T

    @property
    def interior(self) -> np.ndarray:
        return ~self.censored

    @property
    def n_nodes(self) -> int:
        return len(self.birth)

    def observed_age(self) -> np.ndarray:
        """Lifetime for interior nodes, age at ``T`` for boundary nodes."""
        return np.where(self.censored, self.T - self.birth, self.lifetime)

    def counts(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-tree sizes ``(|interior|, |boundary|)``."""
        cens = self.censored
        n = self.n_trees
        n_int = np.bincount(self.tree_id[~cens], minlength=n)
        n_bd = np.bincount(self.tree_id[cens], minlength=n)
        return n_int, n_bd

    def tree_sums(self, values: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        """``sum_u values[u]`` per tree, restricted to ``mask``."""
        if mask is None:
            return np.bincount(self.tree_id, weights=values, minlength=self.n_trees)
        return np.bincount(self.tree_id[mask], weights=values[mask], minlength=self.n_trees)

    def ancestor_sums(self, values: np.ndarray) -> np.ndarray:
        """``sum_{v strict ancestor of u} values[v]`` for every node ``u``."""
        acc = np.zeros(self.n_nodes)
        offs = self.generation_offsets
        for k in range(1, len(offs) - 1):
            sl = slice(offs[k], offs[k + 1])
            par = self.parent[sl]
            acc[sl] = acc[par] + values[par]
        return acc

    def tree(self, i: int) -> "PopulationTree":
        sel = np.flatnonzero(self.tree_id == i)
        remap = np.full(self.n_nodes, -1, dtype=np.int64)
        remap[sel] = np.arange(len(sel))
        par = self.parent[sel]
        gens = np.searchsorted(self.generation_offsets, sel, side="right") - 1
        offsets = np.concatenate([[0], np.cumsum(np.bincount(gens))])
        return PopulationTree(
            parent=np.where(par >= 0, remap[np.maximum(par, 0)], -1),
            birth=self.birth[sel],
            lifetime=self.lifetime[sel],
            nu=self.nu[sel],
            tree_id=np.zeros(len(sel), dtype=np.int64),
            generation_offsets=offsets,
            n_trees=1,
            T=self.T,
            seed=self.seed,
        )

    def samples(self) -> list[ObservedSample]:
        return [extract_sample(self.tree(i)) for i in range(self.n_trees)]


class PopulationTree(Forest):
    """A single tree: a :class:`Forest` with ``n_trees == 1``."""

    def labels(self) -> list[tuple[int, ...]]:
        """Ulam-Harris labels rebuilt from parent indices (root is ``()``)."""
        out: list[tuple[int, ...]] = [()] * self.n_nodes
        rank = np.zeros(self.n_nodes, dtype=np.int64)
        # siblings are stored contiguously, in birth order
        for i in range(1, self.n_nodes):
            if self.parent[i] == self.parent[i - 1]:
                rank[i] = rank[i - 1] + 1
        for i in range(1, self.n_nodes):
            out[i] = out[self.parent[i]] + (int(rank[i]),)
        return out

    def to_csv(self, path: str | Path) -> None:
        """Columns ``node_id, parent_id, birth, lifetime, death, nu, censored``."""
        death, cens = self.death, self.censored
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["node_id", "parent_id", "birth", "lifetime", "death", "nu", "censored"])
            for i in range(self.n_nodes):
                w.writerow([
                    i,
                    int(self.parent[i]),
                    repr(float(self.birth[i])),
                    repr(float(self.lifetime[i])),
                    repr(float(death[i])),
                    int(self.nu[i]),
                    int(cens[i]),
                ])


# --------------------------------------------------------------------------
# simulation


def _cap_message(n: int, cap: int, T: float, rate, law) -> str:
    try:
        from .model import solve_malthus

        lam = f"{solve_malthus(rate, law).lam:.6g}"
    except Exception:  # the message must not fail on top of the cap error
        lam = "unknown"
    return f"population cap exceeded: {n} > {cap} nodes at T={T:g} (lambda_B={lam})"


def _grow(rate, law, T, n_trees, rng, cap):
    if T <= 0:
        raise ValueError(f"horizon must be positive, got {T}")
    table = rate.table
    parents, births, lives, nus, trees = [], [], [], [], []
    offsets = [0]
    f_birth = np.zeros(n_trees)
    f_parent = np.full(n_trees, -1, dtype=np.int64)
    f_tree = np.arange(n_trees, dtype=np.int64)
    total = 0
    while len(f_birth):
        n = len(f_birth)
        if total + n > cap:
            raise PopulationCapExceeded(_cap_message(total + n, cap, T, rate, law))
        life = table.sample(rng, n)
        death = f_birth + life
        splits = death <= T
        nu = np.zeros(n, dtype=np.int64)
        nu[splits] = law.sample(rng, int(splits.sum()))
        parents.append(f_parent)
        births.append(f_birth)
        lives.append(life)
        nus.append(nu)
        trees.append(f_tree)
        idx = np.arange(total, total + n, dtype=np.int64)
        total += n
        offsets.append(total)
        c_birth = np.repeat(death, nu)
        keep = c_birth < T
        f_birth = c_birth[keep]
        f_parent = np.repeat(idx, nu)[keep]
        f_tree = np.repeat(f_tree, nu)[keep]
    return (
        np.concatenate(parents),
        np.concatenate(births),
        np.concatenate(lives),
        np.concatenate(nus),
        np.concatenate(trees),
        np.asarray(offsets, dtype=np.int64),
    )


def simulate_forest(
    rate: RateFunction,
    law: OffspringLaw,
    T: float,
    n_trees: int,
    rng: np.random.Generator,
    cap: int = DEFAULT_POPULATION_CAP,
    seed: int | None = None,
) -> Forest:
    """Grow ``n_trees`` independent trees up to ``T``; ``cap`` bounds the total node count."""
    parent, birth, life, nu, tree_id, offs = _grow(rate, law, T, n_trees, rng, cap)
    return Forest(parent, birth, life, nu, tree_id, offs, n_trees, float(T), seed)


def simulate_tree(
    rate: RateFunction,
    law: OffspringLaw,
    T: float,
    rng: np.random.Generator | int,
    cap: int = DEFAULT_POPULATION_CAP,
) -> PopulationTree:
    """One tree started from a single newborn at time 0.

    ``rng`` may be a generator or an integer seed; with an integer the seed
    is recorded on the tree.
    """
    seed = None
    if not isinstance(rng, np.random.Generator):
        seed = int(rng)
        rng = np.random.default_rng(seed)
    parent, birth, life, nu, tree_id, offs = _grow(rate, law, T, 1, rng, cap)
    return PopulationTree(parent, birth, life, nu, tree_id, offs, 1, float(T), seed)


def extract_sample(tree: Forest) -> ObservedSample:
    if tree.n_trees != 1:
        raise ValueError("extract_sample expects a single tree; use Forest.samples()")
    cens = tree.censored
    return ObservedSample(
        interior_ages=tree.lifetime[~cens].copy(),
        boundary_ages=tree.T - tree.birth[cens],
        interior_offspring=tree.nu[~cens].copy(),
        T=tree.T,
    )


def read_tree_csv(path: str | Path, T: float) -> PopulationTree:
    """Inverse of :meth:`PopulationTree.to_csv`; ``T`` is the observation horizon."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: empty tree file")
    parent = np.array([int(r["parent_id"]) for r in rows], dtype=np.int64)
    birth = np.array([float(r["birth"]) for r in rows])
    lifetime = np.array([float(r["lifetime"]) for r in rows])
    nu = np.array([int(r["nu"]) for r in rows], dtype=np.int64)
    depth = np.zeros(len(rows), dtype=np.int64)
    for i in range(1, len(rows)):
        if not 0 <= parent[i] < i:
            raise ValueError(f"{path}: node {i} does not follow its parent")
        depth[i] = depth[parent[i]] + 1
    if np.any(np.diff(depth) < 0):
        raise ValueError(f"{path}: nodes are not ordered by generation")
    offsets = np.concatenate([[0], np.cumsum(np.bincount(depth))])
    return PopulationTree(parent, birth, lifetime, nu, np.zeros(len(rows), dtype=np.int64),
                          offsets, 1, float(T))
