# sampling/quantization.py

"""K-means codebooks and the two-codebook inverted multi-index."""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Tuple, Union

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.cluster import kmeans_plusplus

import config
from sampling.core import (
    ConfigurationError,
    DimensionError,
    DomainError,
    EmbeddingMatrix,
    as_query,
    inf_norm,
)

logger = logging.getLogger(__name__)

Seed = Union[int, np.random.Generator, None]


class QuantizerKind(str, Enum):
    PRODUCT = "product"
    RESIDUAL = "residual"


@dataclass(frozen=True, eq=False)
class KMeansResult:
    """
    Output of :func:`kmeans`.

    Attributes:
        centroids: k×d centroid matrix.
        assignments: Nearest-centroid index per point.
        wcss: Within-cluster sum of squares after every assignment step.
        reduced: True when k was larger than the number of points.
    """

    centroids: np.ndarray
    assignments: np.ndarray
    wcss: List[float] = field(default_factory=list)
    reduced: bool = False


@dataclass(frozen=True, eq=False)
class MultiIndex:
    """
    Inverted multi-index over two codebooks.

    Classes are grouped into cells Ω(k1, k2); ``cell_order`` lists class ids
    sorted by cell and ``cell_offsets[c]:cell_offsets[c + 1]`` is the slice of
    cell ``c = k1 * K + k2``.
    """

    kind: QuantizerKind
    codebooks: Tuple[np.ndarray, np.ndarray]
    assign1: np.ndarray
    assign2: np.ndarray
    residuals: np.ndarray
    cell_order: np.ndarray
    cell_offsets: np.ndarray
    cell_sizes: np.ndarray

    @property
    def k(self) -> int:
        return self.codebooks[0].shape[0]

    @property
    def n_classes(self) -> int:
        return self.residuals.shape[0]

    @property
    def dim(self) -> int:
        return self.residuals.shape[1]

    @property
    def cell_ids(self) -> np.ndarray:
        return self.assign1 * self.k + self.assign2

    @property
    def nonempty_cells(self) -> int:
        return int(np.count_nonzero(self.cell_sizes))

    def cell_members(self, k1: int, k2: int) -> np.ndarray:
        c = k1 * self.k + k2
        return self.cell_order[self.cell_offsets[c] : self.cell_offsets[c + 1]]

    def split_query(self, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Returns the per-codebook parts of a query (halves for product kind)."""
        if self.kind == QuantizerKind.PRODUCT:
            half = self.dim // 2
            return z[:half], z[half:]
        return z, z

    def reconstruction(self) -> np.ndarray:
        """Quantized embeddings without residuals."""
        c1 = self.codebooks[0][self.assign1]
        c2 = self.codebooks[1][self.assign2]
        if self.kind == QuantizerKind.PRODUCT:
            return np.hstack([c1, c2])
        return c1 + c2


def _rng(seed: Seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def _reseed_empty(
    points: np.ndarray, centroids: np.ndarray, assignments: np.ndarray, counts: np.ndarray
) -> None:
    empty = np.flatnonzero(counts == 0)
    if empty.size == 0:
        return
    logger.debug("Reseeding %d empty clusters", empty.size)
    dist = np.sum((points - centroids[assignments]) ** 2, axis=1)
    farthest = np.argsort(-dist, kind="stable")
    for j, idx in zip(empty, farthest):
        centroids[j] = points[idx]
        assignments[idx] = j


def kmeans(points, k: int, iters: int = config.KMEANS_ITERS, seed: Seed = None) -> KMeansResult:
    """
    Lloyd's K-means under squared Euclidean distance with k-means++ seeding.

    Args:
        points: M×d matrix.
        k: Number of centroids; reduced to M (with a warning) when larger.
        iters: Maximum number of assignment steps.
        seed: Integer seed or generator.

    Returns:
        A :class:`KMeansResult`; assignments are nearest-centroid with ties
        broken toward the lowest index.

    Raises:
        DomainError: On empty input or non-positive ``k``/``iters``.
    """
    points = np.array(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 1:
        raise DomainError("K-means needs a non-empty 2-D point matrix")
    if k < 1 or iters < 1:
        raise DomainError(f"K-means needs k >= 1 and iters >= 1, got k={k}, iters={iters}")

    reduced = False
    if k > points.shape[0]:
        logger.warning("k=%d exceeds %d points; reducing k", k, points.shape[0])
        k = points.shape[0]
        reduced = True

    rng = _rng(seed)
    centroids, _ = kmeans_plusplus(
        points, n_clusters=k, random_state=int(rng.integers(2**31 - 1))
    )
    centroids = np.array(centroids, dtype=np.float64)

    history: List[float] = []
    previous = None
    assignments = np.zeros(points.shape[0], dtype=np.int64)
    for it in range(iters):
        d2 = cdist(points, centroids, "sqeuclidean")
        assignments = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(points.shape[0]), assignments].sum()))
        if previous is not None and np.array_equal(assignments, previous):
            break
        if it == iters - 1:
            break
        previous = assignments.copy()

        counts = np.bincount(assignments, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assignments, points)
        filled = counts > 0
        centroids[filled] = sums[filled] / counts[filled, None]
        _reseed_empty(points, centroids, assignments, counts)

    logger.debug("K-means finished after %d steps, WCSS %.6g", len(history), history[-1])
    return KMeansResult(
        centroids=centroids, assignments=assignments.astype(np.int64), wcss=history, reduced=reduced
    )


def _nearest(points: np.ndarray, codewords: np.ndarray) -> np.ndarray:
    return np.argmin(cdist(points, codewords, "sqeuclidean"), axis=1).astype(np.int64)


def index_from_assignments(
    emb: EmbeddingMatrix,
    kind: QuantizerKind,
    codebooks: Tuple[np.ndarray, np.ndarray],
    assign1: np.ndarray,
    assign2: np.ndarray,
) -> MultiIndex:
    """
    Assembles a MultiIndex from codebooks and per-class assignments.

    Residual vectors and the cell lists are recomputed from the embeddings.

    Raises:
        DimensionError: If codebook or assignment shapes disagree with ``emb``.
    """
    kind = QuantizerKind(kind)
    c1 = np.array(codebooks[0], dtype=np.float64)
    c2 = np.array(codebooks[1], dtype=np.float64)
    a1 = np.asarray(assign1, dtype=np.int64)
    a2 = np.asarray(assign2, dtype=np.int64)
    n, d = emb.n_classes, emb.dim
    if kind == QuantizerKind.PRODUCT:
        _require_even(d)
    cw_dim = d // 2 if kind == QuantizerKind.PRODUCT else d
    k = c1.shape[0]
    if c1.shape != (k, cw_dim) or c2.shape != (k, cw_dim):
        raise DimensionError(
            f"Codebooks must both be {k}x{cw_dim} for {kind.value} kind, got {c1.shape} and {c2.shape}"
        )
    if a1.shape != (n,) or a2.shape != (n,):
        raise DimensionError("Assignments must have one entry per class")
    if np.any((a1 < 0) | (a1 >= k) | (a2 < 0) | (a2 >= k)):
        raise DimensionError("Assignment index out of codebook range")

    if kind == QuantizerKind.PRODUCT:
        recon = np.hstack([c1[a1], c2[a2]])
    else:
        recon = c1[a1] + c2[a2]
    residuals = emb.data - recon

    cell_ids = a1 * k + a2
    cell_order = np.argsort(cell_ids, kind="stable").astype(np.int64)
    counts = np.bincount(cell_ids, minlength=k * k)
    cell_offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

    for arr in (c1, c2, a1, a2, residuals, cell_order, cell_offsets, counts):
        arr.setflags(write=False)
    return MultiIndex(
        kind=kind,
        codebooks=(c1, c2),
        assign1=a1,
        assign2=a2,
        residuals=residuals,
        cell_order=cell_order,
        cell_offsets=cell_offsets,
        cell_sizes=counts.reshape(k, k),
    )


def index_from_codebooks(
    emb: EmbeddingMatrix, codebooks: Tuple[np.ndarray, np.ndarray], kind: QuantizerKind
) -> MultiIndex:
    """Hard-assigns every class to its nearest codewords and builds the index."""
    kind = QuantizerKind(kind)
    c1, c2 = (np.asarray(c, dtype=np.float64) for c in codebooks)
    if kind == QuantizerKind.PRODUCT:
        _require_even(emb.dim)
        half = emb.dim // 2
        a1 = _nearest(emb.data[:, :half], c1)
        a2 = _nearest(emb.data[:, half:], c2)
    else:
        a1 = _nearest(emb.data, c1)
        a2 = _nearest(emb.data - c1[a1], c2)
    return index_from_assignments(emb, kind, (c1, c2), a1, a2)


def _require_even(dim: int) -> None:
    if dim % 2 != 0:
        raise ConfigurationError(
            f"Product quantization splits embeddings in halves and needs an even dimension, got D={dim}"
        )


def build_index(
    emb: EmbeddingMatrix,
    k: int = config.DEFAULT_CODEWORDS,
    kind: QuantizerKind = QuantizerKind.PRODUCT,
    iters: int = config.KMEANS_ITERS,
    seed: Seed = None,
) -> MultiIndex:
    """
    Learns two codebooks with K-means and builds the inverted multi-index.

    Product kind clusters each half of the embeddings separately; residual
    kind clusters the embeddings, then the first-level residuals.

    Args:
        emb: Class embeddings.
        k: Codewords per codebook.
        kind: Quantizer kind.
        iters: K-means iteration cap.
        seed: Integer seed or generator.

    Returns:
        The built index; the reconstruction identity holds for every class.

    Raises:
        ConfigurationError: If product kind is requested with an odd dimension.
    """
    kind = QuantizerKind(kind)
    if k < 1:
        raise ConfigurationError(f"Codebook size must be positive, got {k}")
    rng = _rng(seed)
    if kind == QuantizerKind.PRODUCT:
        _require_even(emb.dim)
        half = emb.dim // 2
        first = kmeans(emb.data[:, :half], k, iters, rng)
        second = kmeans(emb.data[:, half:], k, iters, rng)
    else:
        first = kmeans(emb.data, k, iters, rng)
        level_one = emb.data - first.centroids[first.assignments]
        second = kmeans(level_one, k, iters, rng)

    books = [first.centroids, second.centroids]
    # A reduced run has fewer codewords; pad with copies so both books hold k rows.
    for b, result in enumerate((first, second)):
        if result.centroids.shape[0] < k:
            pad = np.repeat(result.centroids[:1], k - result.centroids.shape[0], axis=0)
            books[b] = np.vstack([result.centroids, pad])

    index = index_from_assignments(
        emb, kind, (books[0], books[1]), first.assignments, second.assignments
    )
    logger.info(
        "Built %s index: N=%d D=%d K=%d, %d non-empty cells",
        kind.value,
        emb.n_classes,
        emb.dim,
        k,
        index.nonempty_cells,
    )
    return index


def distortion(index: MultiIndex) -> float:
    """Σ_i ‖q̃_i‖², the total squared residual norm."""
    return float(np.einsum("ij,ij->", index.residuals, index.residuals))


def residual_scores(index: MultiIndex, z) -> np.ndarray:
    """Scores õ_i = z·q̃_i of the query against every residual vector."""
    z = as_query(z, index.dim)
    return index.residuals @ z


def residual_inf_norm(index: MultiIndex, z) -> float:
    """‖õ‖∞ for a query, the quantity the MIDX divergence bounds are driven by."""
    return inf_norm(residual_scores(index, z))
