# sampling/alias.py

import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from sampling.core import DomainError, as_vector

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class AliasTable:
    """
    Vose alias table over K outcomes.

    Attributes:
        prob: Probability of keeping the primary outcome of each slot.
        alias: Fallback outcome of each slot.
        total_weight: Sum of the weights the table was built from.
    """

    prob: np.ndarray
    alias: np.ndarray
    total_weight: float

    @property
    def size(self) -> int:
        return self.prob.shape[0]

    def draw(
        self, rng: np.random.Generator, size: Optional[int] = None
    ) -> Union[int, np.ndarray]:
        return alias_draw(self, rng, size)


def alias_build(weights) -> AliasTable:
    """
    Builds an alias table whose draws follow ``weights / sum(weights)``.

    Args:
        weights: Non-negative finite weights with a positive sum.

    Returns:
        The alias table.

    Raises:
        DomainError: If a weight is negative or non-finite, or all are zero.
    """
    w = as_vector(weights, "weights")
    if w.size == 0:
        raise DomainError("Cannot build an alias table over zero outcomes")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise DomainError("Alias weights must be finite and non-negative")
    total = float(w.sum())
    if total <= 0:
        raise DomainError("Alias weights must have a positive sum")

    k = w.shape[0]
    scaled = (w * (k / total)).tolist()
    prob = [1.0] * k
    alias = list(range(k))
    small = [i for i, x in enumerate(scaled) if x < 1.0]
    large = [i for i, x in enumerate(scaled) if x >= 1.0]

    while small and large:
        s = small.pop()
        g = large.pop()
        prob[s] = scaled[s]
        alias[s] = g
        scaled[g] = (scaled[g] + scaled[s]) - 1.0
        if scaled[g] < 1.0:
            small.append(g)
        else:
            large.append(g)
    # Leftovers on either list keep prob 1 and alias themselves.

    prob_arr = np.array(prob, dtype=np.float64)
    alias_arr = np.array(alias, dtype=np.int64)
    prob_arr.setflags(write=False)
    alias_arr.setflags(write=False)
    return AliasTable(prob=prob_arr, alias=alias_arr, total_weight=total)


def alias_draw(
    table: AliasTable, rng: np.random.Generator, size: Optional[int] = None
) -> Union[int, np.ndarray]:
    """
    Draws outcome indices from an alias table.

    Each draw uses one uniform slot index and one Bernoulli comparison.

    Args:
        table: The alias table.
        rng: Seeded generator owned by the caller.
        size: Number of draws, or None for a single int.

    Returns:
        One index, or an array of ``size`` indices.
    """
    slots = rng.integers(table.size, size=size)
    coins = rng.random(size=size)
    picked = np.where(coins < table.prob[slots], slots, table.alias[slots])
    if size is None:
        return int(picked)
    return picked.astype(np.int64, copy=False)


def alias_probabilities(table: AliasTable) -> np.ndarray:
    """Reconstructs the per-outcome draw probabilities from the table arrays."""
    spill = np.bincount(table.alias, weights=1.0 - table.prob, minlength=table.size)
    return (table.prob + spill) / table.size
