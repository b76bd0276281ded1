# analysis/codebook_learning.py

"""
Gradient refinement of the two codebooks.

Codewords are treated as parameters: every class gets soft weights over each
book (softmax of inner products), the encoded embedding is built from the
weighted codewords, and the combined loss λ·L_recon + L_KL is minimized with
plain gradient descent. L_KL is log Σ p²/p′, the log of the Rényi-2 ratio
between the softmax over true and encoded embeddings.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy import special

import config
from sampling.core import DimensionError, DomainError, EmbeddingMatrix, NumericalError
from sampling.quantization import MultiIndex, QuantizerKind, index_from_codebooks

logger = logging.getLogger(__name__)

Books = Tuple[np.ndarray, np.ndarray]


@dataclass(frozen=True, eq=False)
class SoftCodebooks:
    """Two learnable codebooks of the given quantizer kind."""

    kind: QuantizerKind
    books: Books

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", QuantizerKind(self.kind))
        c1, c2 = (np.array(b, dtype=np.float64) for b in self.books)
        if c1.ndim != 2 or c1.shape != c2.shape:
            raise DimensionError(f"Codebooks must be equal-shape matrices, got {c1.shape} and {c2.shape}")
        object.__setattr__(self, "books", (c1, c2))

    @property
    def k(self) -> int:
        return self.books[0].shape[0]

    def replace(self, books: Books) -> "SoftCodebooks":
        return SoftCodebooks(kind=self.kind, books=books)


@dataclass(frozen=True)
class LossPoint:
    recon: float
    kl: float

    def total(self, lam: float) -> float:
        return lam * self.recon + self.kl


def _subvectors(data: np.ndarray, state: SoftCodebooks) -> Tuple[np.ndarray, np.ndarray]:
    dim = data.shape[1]
    width = state.books[0].shape[1]
    if state.kind == QuantizerKind.PRODUCT:
        if dim != 2 * width:
            raise DimensionError(f"Product codewords of width {width} need D={2 * width}, got {dim}")
        return data[:, :width], data[:, width:]
    if dim != width:
        raise DimensionError(f"Residual codewords of width {width} need D={width}, got {dim}")
    return data, data


def soft_assign(emb: EmbeddingMatrix, state: SoftCodebooks) -> Tuple[np.ndarray, np.ndarray]:
    """
    Soft weights per class and book: softmax over k of x·c_k.

    Product kind scores each half of the embedding against its own book;
    residual kind scores the full embedding against both.
    """
    x1, x2 = _subvectors(emb.data, state)
    c1, c2 = state.books
    return special.softmax(x1 @ c1.T, axis=1), special.softmax(x2 @ c2.T, axis=1)


def _combine(state: SoftCodebooks, h1: np.ndarray, h2: np.ndarray) -> np.ndarray:
    if state.kind == QuantizerKind.PRODUCT:
        return np.hstack([h1, h2])
    return h1 + h2


def encode(
    emb: EmbeddingMatrix,
    state: SoftCodebooks,
    weights: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> np.ndarray:
    """Encoded embeddings: per-book convex combinations, concatenated (product) or summed (residual)."""
    if weights is None:
        weights = soft_assign(emb, state)
    w1, w2 = weights
    return _combine(state, w1 @ state.books[0], w2 @ state.books[1])


def recon_loss(emb: EmbeddingMatrix, encoded) -> float:
    """Σ_i ‖q̂_i − q_i‖²."""
    encoded = np.asarray(encoded, dtype=np.float64)
    if encoded.shape != emb.data.shape:
        raise DimensionError(f"Encoded shape {encoded.shape} does not match {emb.data.shape}")
    diff = encoded - emb.data
    return float(np.einsum("ij,ij->", diff, diff))


def _as_queries(z, dim: int) -> np.ndarray:
    queries = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if queries.ndim != 2 or queries.shape[1] != dim:
        raise DimensionError(f"Queries must have dimension {dim}, got shape {queries.shape}")
    return queries


def _kl_terms(queries: np.ndarray, emb: EmbeddingMatrix, encoded: np.ndarray):
    o = queries @ emb.data.T
    o_enc = queries @ encoded.T
    log_p = o - special.logsumexp(o, axis=1, keepdims=True)
    log_p_enc = o_enc - special.logsumexp(o_enc, axis=1, keepdims=True)
    ratio = 2.0 * log_p - log_p_enc
    return ratio, log_p_enc


def kl_loss(z, emb: EmbeddingMatrix, encoded) -> float:
    """
    log Σ_i p_i²/p′_i, averaged over the rows of ``z`` when a batch is given.

    p is the softmax over true embeddings, p′ over encoded ones; the value is
    zero when the two coincide.
    """
    encoded = np.asarray(encoded, dtype=np.float64)
    if encoded.shape != emb.data.shape:
        raise DimensionError(f"Encoded shape {encoded.shape} does not match {emb.data.shape}")
    queries = _as_queries(z, emb.dim)
    ratio, _ = _kl_terms(queries, emb, encoded)
    per_query = special.logsumexp(ratio, axis=1)
    return float(max(per_query.mean(), 0.0))


def total_loss(
    state: SoftCodebooks, emb: EmbeddingMatrix, queries, lam: float = config.RECON_WEIGHT
) -> float:
    point = _loss_point(state, emb, _as_queries(queries, emb.dim))
    return point.total(lam)


def _loss_point(state: SoftCodebooks, emb: EmbeddingMatrix, queries: np.ndarray) -> LossPoint:
    encoded = encode(emb, state)
    ratio, _ = _kl_terms(queries, emb, encoded)
    # Unclamped here so finite differences see the smooth function.
    kl = float(special.logsumexp(ratio, axis=1).mean())
    return LossPoint(recon=recon_loss(emb, encoded), kl=kl)


def codebook_grad(
    queries, emb: EmbeddingMatrix, state: SoftCodebooks, lam: float = config.RECON_WEIGHT
) -> Books:
    """
    Analytic gradient of λ·L_recon + L_KL with respect to both codebooks.

    The gradient flows through the encoded vectors, the soft weights and the
    softmax over encoded embeddings.

    Args:
        queries: B×D query matrix (or a single query) for the KL term.
        emb: Class embeddings.
        state: Current codebooks.
        lam: Reconstruction weight, non-negative.

    Returns:
        Gradients shaped like ``state.books``.
    """
    if lam < 0:
        raise DomainError(f"Reconstruction weight must be non-negative, got {lam}")
    queries = _as_queries(queries, emb.dim)
    w1, w2 = soft_assign(emb, state)
    c1, c2 = state.books
    h1, h2 = w1 @ c1, w2 @ c2
    encoded = _combine(state, h1, h2)

    ratio, log_p_enc = _kl_terms(queries, emb, encoded)
    r = special.softmax(ratio, axis=1)
    g = 2.0 * lam * (encoded - emb.data)
    g += (np.exp(log_p_enc) - r).T @ queries / queries.shape[0]

    x1, x2 = _subvectors(emb.data, state)
    if state.kind == QuantizerKind.PRODUCT:
        width = c1.shape[1]
        g_parts = (g[:, :width], g[:, width:])
    else:
        g_parts = (g, g)

    grads = []
    for w, c, h, x, gl in zip((w1, w2), (c1, c2), (h1, h2), (x1, x2), g_parts):
        # dL/ds_ik = w_ik (g_i·c_k − g_i·h_i) for scores s_ik = x_i·c_k
        a = w * (gl @ c.T - np.sum(gl * h, axis=1, keepdims=True))
        grads.append(w.T @ gl + a.T @ x)
    return grads[0], grads[1]


def codebook_step(
    state: SoftCodebooks,
    emb: EmbeddingMatrix,
    queries,
    learning_rate: float,
    steps: int,
    lam: float = config.RECON_WEIGHT,
    batch_size: int = config.KL_QUERY_BATCH,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[SoftCodebooks, List[LossPoint]]:
    """
    Runs ``steps`` iterations of gradient descent on the codebooks.

    Each step draws a mini-set of at most ``batch_size`` queries for the KL
    gradient. The trajectory holds (L_recon, L_KL) over the full query set
    before the first step and after every step.

    Raises:
        DomainError: If ``learning_rate`` is negative.
        NumericalError: If a loss or codeword turns non-finite; ``partial``
            holds the trajectory so far.
    """
    if learning_rate < 0:
        raise DomainError(f"Learning rate must be non-negative, got {learning_rate}")
    queries = _as_queries(queries, emb.dim)
    rng = np.random.default_rng(rng)
    trajectory = [_loss_point(state, emb, queries)]

    for step in range(steps):
        if queries.shape[0] > batch_size:
            picked = queries[rng.choice(queries.shape[0], size=batch_size, replace=False)]
        else:
            picked = queries
        g1, g2 = codebook_grad(picked, emb, state, lam)
        books = (state.books[0] - learning_rate * g1, state.books[1] - learning_rate * g2)
        if not all(np.all(np.isfinite(b)) for b in books):
            raise NumericalError(f"Codewords diverged at step {step}", partial=trajectory)
        state = state.replace(books)
        point = _loss_point(state, emb, queries)
        if not (np.isfinite(point.recon) and np.isfinite(point.kl)):
            raise NumericalError(f"Loss diverged at step {step}", partial=trajectory)
        trajectory.append(point)
        logger.debug("Step %d: recon %.6g, kl %.6g", step, point.recon, point.kl)

    logger.info(
        "Codebook descent: combined loss %.6g -> %.6g over %d steps",
        trajectory[0].total(lam),
        trajectory[-1].total(lam),
        steps,
    )
    return state, trajectory


def init_from_index(index: MultiIndex) -> SoftCodebooks:
    """Starts learning from the codebooks of a built index."""
    return SoftCodebooks(kind=index.kind, books=(index.codebooks[0], index.codebooks[1]))


def to_index(state: SoftCodebooks, emb: EmbeddingMatrix) -> MultiIndex:
    """Hard-assigns classes to the nearest learned codewords and builds the index."""
    return index_from_codebooks(emb, state.books, state.kind)
