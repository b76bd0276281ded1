# sampling/core.py

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import special

import config

logger = logging.getLogger(__name__)

# Plain float64 vectors; the aliases name their role in signatures.
QueryVector = np.ndarray
Logits = np.ndarray
ProbabilityVector = np.ndarray


class MidxError(Exception):
    """Base class for sampler library errors."""

    pass


class DimensionError(MidxError):
    """Raised when vector or matrix shapes do not line up."""

    pass


class DomainError(MidxError):
    """Raised for empty or otherwise invalid numeric input."""

    pass


class ConfigurationError(MidxError):
    """Raised for an invalid combination of parameters."""

    pass


class NumericalError(MidxError):
    """Raised when a loss or gradient turns non-finite.

    Attributes:
        partial: Whatever result was accumulated before the failure.
    """

    def __init__(self, message: str, partial: object = None):
        super().__init__(message)
        self.partial = partial


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    """N class embeddings of dimension D, row i is the embedding of class i."""

    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise DimensionError(f"Embeddings must be 2-D, got {data.ndim}-D")
        if data.shape[0] < 1:
            raise DomainError("Embedding matrix needs at least one class")
        if not np.all(np.isfinite(data)):
            raise DomainError("Embedding matrix contains non-finite entries")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def n_classes(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


def as_vector(values, name: str = "vector") -> np.ndarray:
    """Converts input to a 1-D float64 array."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got shape {arr.shape}")
    return arr


def as_query(z, dim: Optional[int] = None) -> QueryVector:
    """
    Validates a query vector.

    Args:
        z: Query embedding.
        dim: Expected catalog dimension, if known.

    Returns:
        The query as a finite float64 vector.

    Raises:
        DimensionError: If the length does not match ``dim``.
        DomainError: If any entry is non-finite.
    """
    arr = as_vector(z, "query")
    if dim is not None and arr.shape[0] != dim:
        raise DimensionError(f"Query has dimension {arr.shape[0]}, catalog has {dim}")
    if not np.all(np.isfinite(arr)):
        raise DomainError("Query contains non-finite entries")
    return arr


def dot(a, b) -> float:
    """Inner product of two equal-length vectors."""
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    if a.shape != b.shape:
        raise DimensionError(f"Length mismatch: {a.shape[0]} vs {b.shape[0]}")
    return float(np.dot(a, b))


def log_sum_exp(values) -> float:
    """
    Max-shifted log Σ exp(v).

    Raises:
        DomainError: If ``values`` is empty.
    """
    arr = as_vector(values, "values")
    if arr.size == 0:
        raise DomainError("log_sum_exp of an empty vector")
    return float(special.logsumexp(arr))


def softmax(o) -> ProbabilityVector:
    """Softmax over a logit vector, computed through the max shift."""
    arr = as_vector(o, "logits")
    if arr.size == 0:
        raise DomainError("softmax of an empty vector")
    return special.softmax(arr)


def logits(emb: EmbeddingMatrix, z) -> Logits:
    """Returns o with o_j = z·q_j for every class."""
    z = as_query(z, emb.dim)
    return emb.data @ z


def inf_norm(values) -> float:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return 0.0
    return float(np.max(np.abs(arr)))


def check_probability_vector(p, tol: float = config.PROB_SUM_TOL) -> ProbabilityVector:
    """
    Validates a probability vector.

    Raises:
        DomainError: If entries are negative or do not sum to one within ``tol``.
    """
    arr = as_vector(p, "probabilities")
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise DomainError("Probabilities must be finite and non-negative")
    total = float(arr.sum())
    if abs(total - 1.0) > tol:
        raise DomainError(f"Probabilities sum to {total!r}, expected 1")
    return arr
