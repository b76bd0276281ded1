# sampling/samplers.py

"""Uniform, unigram and inverted-multi-index proposal samplers."""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional

import numpy as np
from scipy import special

from sampling.alias import AliasTable, alias_build
from sampling.core import (
    DimensionError,
    DomainError,
    MidxError,
    as_query,
    as_vector,
)
from sampling.quantization import MultiIndex, residual_scores

logger = logging.getLogger(__name__)


class SamplerKind(str, Enum):
    UNIFORM = "uniform"
    UNIGRAM = "unigram"
    MIDX_EXACT = "midx_exact"
    MIDX_FAST = "midx_fast"

    @property
    def is_midx(self) -> bool:
        return self in (SamplerKind.MIDX_EXACT, SamplerKind.MIDX_FAST)


@dataclass(frozen=True, eq=False)
class SamplerSpec:
    """
    Sampler configuration over a catalog of ``n_classes``.

    Static kinds carry a catalog-level alias table and the normalized proposal;
    MIDX kinds carry the index.
    """

    kind: SamplerKind
    n_classes: int
    index: Optional[MultiIndex] = None
    frequencies: Optional[np.ndarray] = None
    static_table: Optional[AliasTable] = None
    static_probs: Optional[np.ndarray] = None


@dataclass(frozen=True, eq=False)
class SampleBatch:
    """M class indices drawn with replacement and their proposal probabilities."""

    indices: np.ndarray
    probs: np.ndarray

    @property
    def m(self) -> int:
        return int(self.indices.shape[0])

    @classmethod
    def empty(cls) -> "SampleBatch":
        return cls(indices=np.zeros(0, dtype=np.int64), probs=np.zeros(0))


@dataclass(eq=False)
class PreparedQuery:
    """
    Query-specific sampling state.

    For MIDX kinds, ``stage1`` is P¹ over K codewords, ``stage2[k1]`` is
    P²(·|k1), and ``stage3`` holds P³ per class (exact kind) or is None when
    stage 3 is uniform within a cell (fast kind). ``omega_log`` and
    ``psi_log`` are log ω and log ψ. For the exact kind they are shifted by
    ``shift``, the largest residual score; the fast kind leaves ``shift`` None.

    Stage-2 and stage-3 alias tables are built on first use and cached under a
    lock, so one prepared query may be drawn from by several threads as long
    as each thread owns its generator.
    """

    spec: SamplerSpec
    query: Optional[np.ndarray]
    p1: Optional[AliasTable] = None
    stage1: Optional[np.ndarray] = None
    stage2: Optional[np.ndarray] = None
    stage3: Optional[np.ndarray] = None
    psi_log: Optional[np.ndarray] = None
    omega_log: Optional[np.ndarray] = None
    shift: Optional[float] = None
    _p2_tables: Dict[int, AliasTable] = field(default_factory=dict, repr=False)
    _p3_tables: Dict[int, AliasTable] = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def _cached(self, cache: Dict[int, AliasTable], key: int, build: Callable[[], AliasTable]) -> AliasTable:
        table = cache.get(key)
        if table is None:
            with self._lock:
                table = cache.get(key)
                if table is None:
                    table = build()
                    cache[key] = table
        return table

    def p2(self, k1: int) -> AliasTable:
        """Stage-2 alias table for codeword ``k1``, built on first use."""
        return self._cached(self._p2_tables, k1, lambda: alias_build(self.stage2[k1]))

    def p3(self, cell: int) -> AliasTable:
        """Stage-3 alias table over the members of a non-empty cell, built on first use."""
        index = self.spec.index

        def build() -> AliasTable:
            members = index.cell_order[index.cell_offsets[cell] : index.cell_offsets[cell + 1]]
            return alias_build(self.stage3[members])

        return self._cached(self._p3_tables, cell, build)

    @property
    def cached_tables(self) -> int:
        """Number of stage-2 and stage-3 alias tables built so far."""
        return len(self._p2_tables) + len(self._p3_tables)


def make_static(kind: SamplerKind, n: int, frequencies=None) -> SamplerSpec:
    """
    Builds a uniform or unigram sampler.

    Args:
        kind: ``uniform`` or ``unigram``.
        n: Catalog size.
        frequencies: Class frequencies of length ``n`` (unigram only).

    Raises:
        DomainError: On a bad size or frequency vector.
    """
    kind = SamplerKind(kind)
    if n < 1:
        raise DomainError(f"Catalog size must be positive, got {n}")
    if kind == SamplerKind.UNIFORM:
        weights = np.ones(n)
        freqs = None
    elif kind == SamplerKind.UNIGRAM:
        if frequencies is None:
            raise DomainError("Unigram sampler needs class frequencies")
        freqs = as_vector(frequencies, "frequencies")
        if freqs.shape[0] != n:
            raise DomainError(f"Expected {n} frequencies, got {freqs.shape[0]}")
        if not np.all(np.isfinite(freqs)) or np.any(freqs < 0) or freqs.sum() <= 0:
            raise DomainError("Frequencies must be non-negative with a positive sum")
        weights = freqs
    else:
        raise DomainError(f"{kind.value} is not a static sampler kind")
    table = alias_build(weights)
    probs = weights / weights.sum()
    probs.setflags(write=False)
    return SamplerSpec(
        kind=kind, n_classes=n, frequencies=freqs, static_table=table, static_probs=probs
    )


def make_midx(kind: SamplerKind, index: MultiIndex) -> SamplerSpec:
    kind = SamplerKind(kind)
    if not kind.is_midx:
        raise DomainError(f"{kind.value} is not an inverted-multi-index kind")
    return SamplerSpec(kind=kind, n_classes=index.n_classes, index=index)


def make_sampler(
    kind: SamplerKind,
    n: int,
    index: Optional[MultiIndex] = None,
    frequencies=None,
) -> SamplerSpec:
    """
    Builds a sampler of any kind.

    Raises:
        MidxError: If the inputs the kind needs are missing or inconsistent.
    """
    kind = SamplerKind(kind)
    if kind.is_midx:
        if index is None:
            raise MidxError(f"{kind.value} sampler needs a multi-index")
        if index.n_classes != n:
            raise DimensionError(
                f"Index covers {index.n_classes} classes, catalog has {n}"
            )
        return make_midx(kind, index)
    return make_static(kind, n, frequencies)


def _stage_scores(index: MultiIndex, z: np.ndarray):
    z1, z2 = index.split_query(z)
    return index.codebooks[0] @ z1, index.codebooks[1] @ z2


def _stage_distributions(pq: PreparedQuery, s1: np.ndarray, s2: np.ndarray) -> None:
    """Fills P¹ and P² from log ω and the codeword scores."""
    k = s1.shape[0]
    omega_log = pq.omega_log.reshape(k, k)
    with np.errstate(divide="ignore", invalid="ignore"):
        pair = omega_log + s2[None, :]
        psi_log = special.logsumexp(pair, axis=1)
        top = psi_log + s1
        log_p1 = top - special.logsumexp(top)
        log_p2 = pair - psi_log[:, None]
    log_p2[~np.isfinite(psi_log)] = -np.inf
    pq.psi_log = psi_log
    pq.stage1 = np.exp(log_p1)
    pq.stage2 = np.exp(log_p2)
    pq.p1 = alias_build(pq.stage1)


def _prepare_exact(pq: PreparedQuery, index: MultiIndex, z: np.ndarray) -> None:
    scores = residual_scores(index, z)
    pq.shift = float(scores.max())

    sizes = index.cell_sizes.ravel()
    nonempty = np.flatnonzero(sizes)
    starts = index.cell_offsets[nonempty]
    sorted_scores = scores[index.cell_order]
    cell_max = np.maximum.reduceat(sorted_scores, starts)
    weights = np.exp(sorted_scores - np.repeat(cell_max, sizes[nonempty]))
    cell_sum = np.add.reduceat(weights, starts)

    omega_log = np.full(sizes.shape[0], -np.inf)
    omega_log[nonempty] = cell_max - pq.shift + np.log(cell_sum)
    pq.omega_log = omega_log

    stage3 = np.empty(index.n_classes)
    stage3[index.cell_order] = weights / np.repeat(cell_sum, sizes[nonempty])
    pq.stage3 = stage3

    s1, s2 = _stage_scores(index, z)
    _stage_distributions(pq, s1, s2)


def _prepare_fast(pq: PreparedQuery, index: MultiIndex, z: np.ndarray) -> None:
    s1, s2 = _stage_scores(index, z)
    sizes = index.cell_sizes.ravel()
    with np.errstate(divide="ignore"):
        pq.omega_log = np.log(sizes.astype(np.float64))
    _stage_distributions(pq, s1, s2)


def prepare(spec: SamplerSpec, z=None) -> PreparedQuery:
    """
    Builds the query-specific sampling state.

    The exact kind scores the query against every residual (O(ND)); the fast
    kind only touches codewords and cell sizes (O(KD + K²)). Static kinds reuse
    the catalog-level alias table and ignore the query.

    Args:
        spec: Sampler configuration.
        z: Query vector (required for MIDX kinds).

    Returns:
        The prepared query.

    Raises:
        DimensionError: If the query does not match the index dimension.
    """
    if not spec.kind.is_midx:
        query = None if z is None else as_vector(z, "query")
        return PreparedQuery(spec=spec, query=query)

    index = spec.index
    if index is None or index.n_classes != spec.n_classes:
        raise DimensionError("Sampler index does not match the catalog size")
    if z is None:
        raise DimensionError(f"{spec.kind.value} sampler needs a query vector")
    z = as_query(z, index.dim)
    pq = PreparedQuery(spec=spec, query=z)
    if spec.kind == SamplerKind.MIDX_EXACT:
        _prepare_exact(pq, index, z)
    else:
        _prepare_fast(pq, index, z)
    return pq


def prepare_batch(spec: SamplerSpec, queries) -> List[PreparedQuery]:
    """Prepares every row of a query matrix independently."""
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 2:
        raise DimensionError("Query batch must be a 2-D matrix")
    return [prepare(spec, z) for z in queries]


def proposal_probs(pq: PreparedQuery, indices) -> np.ndarray:
    """
    Vectorized proposal probabilities Q(i|z).

    Raises:
        DimensionError: If an index is outside the catalog.
    """
    spec = pq.spec
    idx = np.asarray(indices, dtype=np.int64)
    if np.any((idx < 0) | (idx >= spec.n_classes)):
        raise DimensionError(f"Class index out of range for N={spec.n_classes}")
    if not spec.kind.is_midx:
        return spec.static_probs[idx]
    index = spec.index
    a1 = index.assign1[idx]
    a2 = index.assign2[idx]
    if spec.kind == SamplerKind.MIDX_EXACT:
        third = pq.stage3[idx]
    else:
        third = 1.0 / index.cell_sizes[a1, a2]
    return pq.stage1[a1] * pq.stage2[a1, a2] * third


def proposal_prob(pq: PreparedQuery, i: int) -> float:
    """Proposal probability of a single class."""
    return float(proposal_probs(pq, np.array([i]))[0])


def proposal_distribution(pq: PreparedQuery) -> np.ndarray:
    """Full proposal over the catalog; O(N), meant for diagnostics."""
    return proposal_probs(pq, np.arange(pq.spec.n_classes))


def draw(pq: PreparedQuery, m: int, rng: np.random.Generator) -> SampleBatch:
    """
    Draws ``m`` classes i.i.d. with replacement.

    MIDX kinds sample a first codeword, then a second conditioned on it, then
    a class inside the cell.

    Args:
        pq: Prepared query.
        m: Number of draws.
        rng: Seeded generator owned by the caller.

    Returns:
        The batch; each recorded probability equals ``proposal_prob``.

    Raises:
        DomainError: If ``m`` is not positive.
    """
    if m < 1:
        raise DomainError(f"Number of draws must be positive, got {m}")
    spec = pq.spec
    if not spec.kind.is_midx:
        indices = spec.static_table.draw(rng, m)
        return SampleBatch(indices=indices, probs=spec.static_probs[indices])

    index = spec.index
    k1 = pq.p1.draw(rng, m)
    k2 = np.empty(m, dtype=np.int64)
    for a in np.unique(k1):
        mask = k1 == a
        k2[mask] = pq.p2(int(a)).draw(rng, int(mask.sum()))

    cells = k1 * index.k + k2
    starts = index.cell_offsets[cells]
    if spec.kind == SamplerKind.MIDX_EXACT:
        local = np.empty(m, dtype=np.int64)
        for c in np.unique(cells):
            mask = cells == c
            local[mask] = pq.p3(int(c)).draw(rng, int(mask.sum()))
    else:
        local = rng.integers(0, index.cell_sizes.ravel()[cells])
    indices = index.cell_order[starts + local]
    return SampleBatch(indices=indices, probs=proposal_probs(pq, indices))
