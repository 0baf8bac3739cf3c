"""Offspring distributions with finite support on {2, 3, ...}."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np


@dataclass(frozen=True)
class OffspringLaw:
    """Law ``p = (p_k)`` of the number of children at a division.

    ``p_0 = p_1 = 0`` is enforced, so the population never dies out.
    """

    support: tuple[int, ...]
    probs: tuple[float, ...]

    def __post_init__(self):
        if len(self.support) != len(self.probs) or not self.support:
            raise ValueError("support and probabilities must be nonempty and aligned")
        if any(k < 2 for k in self.support):
            raise ValueError("offspring counts must be >= 2 (p_0 = p_1 = 0)")
        if any(p < 0 for p in self.probs):
            raise ValueError("negative offspring probability")
        if abs(sum(self.probs) - 1.0) > 1e-12:
            raise ValueError(f"offspring probabilities sum to {sum(self.probs)}, not 1")
        if len(set(self.support)) != len(self.support):
            raise ValueError("repeated offspring count")

    @classmethod
    def from_mapping(cls, probs: Mapping) -> "OffspringLaw":
        items = sorted((int(k), float(v)) for k, v in probs.items() if float(v) > 0)
        return cls(tuple(k for k, _ in items), tuple(p for _, p in items))

    @classmethod
    def binary(cls) -> "OffspringLaw":
        return cls((2,), (1.0,))

    @property
    def mean(self) -> float:
        return float(np.dot(self.support, self.probs))

    @property
    def second_moment(self) -> float:
        return float(np.dot(np.square(self.support), self.probs))

    @property
    def pair_constant(self) -> float:
        """``sum_{i != j} sum_{k >= max(i, j)} p_k``, by direct enumeration."""
        kmax = max(self.support)
        tail = {i: sum(p for k, p in zip(self.support, self.probs) if k >= i) for i in range(1, kmax + 1)}
        return float(
            sum(tail[max(i, j)] for i in range(1, kmax + 1) for j in range(1, kmax + 1) if i != j)
        )

    def sample(self, rng: np.random.Generator, size=None):
        """Inverse-CDF draws over the finite support."""
        if len(self.support) == 1:
            return np.full(size if size is not None else (), self.support[0], dtype=np.int64)
        cdf = np.cumsum(self.probs)
        cdf[-1] = 1.0
        idx = np.searchsorted(cdf, rng.random(size), side="right")
        return np.asarray(self.support, dtype=np.int64)[idx]

    def to_mapping(self) -> dict[int, float]:
        return dict(zip(self.support, self.probs))


def offspring_from_spec(spec) -> OffspringLaw:
    """``"binary"``, ``{2: 1.0}``, ``{"probs": {2: 0.5, 3: 0.5}}`` or ``{"m": 3}`` (deterministic)."""
    if spec is None or spec == "binary":
        return OffspringLaw.binary()
    if isinstance(spec, (int, float)) and not isinstance(spec, bool):
        return OffspringLaw((int(spec),), (1.0,))
    if isinstance(spec, Mapping):
        if "probs" in spec:
            return OffspringLaw.from_mapping(spec["probs"])
        if "m" in spec:
            return OffspringLaw((int(spec["m"]),), (1.0,))
        return OffspringLaw.from_mapping(spec)
    raise ValueError(f"cannot read offspring law from {spec!r}")
