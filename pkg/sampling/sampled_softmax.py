# sampling/sampled_softmax.py

import logging
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
from scipy import special

from sampling.core import (
    DimensionError,
    Logits,
    as_vector,
    log_sum_exp,
    softmax,
)
from sampling.samplers import SampleBatch

logger = logging.getLogger(__name__)

SAMPLED = "sampled"
IMPORTANCE = "importance"
ESTIMATORS = (SAMPLED, IMPORTANCE)


@dataclass(frozen=True, eq=False)
class CorrectedBatch:
    """
    Positive plus M sampled classes with logits corrected per the proposal.

    Entry 0 is always the positive class and the only labeled entry.
    """

    corrected_logits: np.ndarray
    source_indices: np.ndarray

    @property
    def labels(self) -> np.ndarray:
        y = np.zeros(self.corrected_logits.shape[0])
        y[0] = 1.0
        return y

    @property
    def m(self) -> int:
        return self.corrected_logits.shape[0] - 1


def _check_positive(o: np.ndarray, positive: int) -> None:
    if not 0 <= positive < o.shape[0]:
        raise DimensionError(f"Positive class {positive} out of range for N={o.shape[0]}")


def full_loss(o: Logits, positive: int) -> float:
    """Full softmax cross-entropy: log Σ exp(o_j) − o_positive."""
    o = as_vector(o, "logits")
    _check_positive(o, positive)
    loss = log_sum_exp(o) - o[positive]
    return max(loss, 0.0)


def full_grad_logits(o: Logits, positive: int) -> np.ndarray:
    """Gradient of the full loss with respect to the logits: p − e_positive."""
    o = as_vector(o, "logits")
    _check_positive(o, positive)
    grad = softmax(o)
    grad[positive] -= 1.0
    return grad


def correct_logits(o: Logits, positive: int, batch: Optional[SampleBatch]) -> CorrectedBatch:
    """
    Applies the proposal correction to a sampled batch.

    Sampled negatives get ``o_s − ln(M·q_s)``; an accidental draw of the
    positive keeps its raw logit and is treated as an unlabeled entry.

    Args:
        o: Full logit vector.
        positive: Positive class index.
        batch: Drawn classes with proposal probabilities; None means M = 0.

    Returns:
        The corrected batch with the positive at position 0.

    Raises:
        DimensionError: On out-of-range or inconsistent inputs.
    """
    o = as_vector(o, "logits")
    _check_positive(o, positive)
    if batch is None:
        batch = SampleBatch.empty()
    idx = np.asarray(batch.indices, dtype=np.int64)
    q = np.asarray(batch.probs, dtype=np.float64)
    if idx.shape != q.shape:
        raise DimensionError("Batch indices and probabilities differ in length")
    if np.any((idx < 0) | (idx >= o.shape[0])):
        raise DimensionError("Sampled index outside the catalog")
    m = idx.shape[0]
    corrected = o[idx].copy()
    negatives = idx != positive
    corrected[negatives] -= np.log(m * q[negatives])
    return CorrectedBatch(
        corrected_logits=np.concatenate([[o[positive]], corrected]),
        source_indices=np.concatenate([[positive], idx]).astype(np.int64),
    )


def sampled_loss(cb: CorrectedBatch) -> float:
    """Sampled softmax loss over the corrected logits."""
    o = cb.corrected_logits
    return float(special.logsumexp(o) - o[0])


def sampled_loss_multi(o: Logits, positives: Iterable[int], batch: SampleBatch) -> float:
    """Multi-label loss as the sum of single-positive sampled losses."""
    return sum(sampled_loss(correct_logits(o, int(p), batch)) for p in positives)


def sampled_grad_scatter(cb: CorrectedBatch, n: int) -> np.ndarray:
    """
    Scatters (p′ − y′) onto an N-vector, summing repeated indices.

    This is the sampled estimate of ``full_grad_logits``.
    """
    weights = special.softmax(cb.corrected_logits) - cb.labels
    return np.bincount(cb.source_indices, weights=weights, minlength=n)


def importance_grad_scatter(o: Logits, positive: int, batch: SampleBatch, n: int) -> np.ndarray:
    """
    Self-normalized importance estimate of the full logit gradient.

    The −1 at the positive is exact; the softmax expectation is estimated from
    the draws with weights softmax(o_s − ln(M·q_s)) over all M draws.
    """
    o = as_vector(o, "logits")
    _check_positive(o, positive)
    grad = np.zeros(n)
    grad[positive] = -1.0
    if batch.m == 0:
        return grad
    w = special.softmax(o[batch.indices] - np.log(batch.m * batch.probs))
    return grad + np.bincount(batch.indices, weights=w, minlength=n)


def batched_grad_scatter(
    o: Logits,
    positive: int,
    indices: np.ndarray,
    probs: np.ndarray,
    n: int,
    estimator: str = SAMPLED,
) -> np.ndarray:
    """
    Gradient estimates for T independent batches at once.

    Args:
        o: Full logit vector.
        positive: Positive class index.
        indices: T×M drawn class indices.
        probs: T×M proposal probabilities.
        n: Catalog size.
        estimator: ``"sampled"`` (corrected logits, positive in the
            normalizer) or ``"importance"``.

    Returns:
        T×N matrix; row t equals the single-batch function on batch t.
    """
    o = as_vector(o, "logits")
    _check_positive(o, positive)
    indices = np.asarray(indices, dtype=np.int64)
    probs = np.asarray(probs, dtype=np.float64)
    t, m = indices.shape
    rows = np.repeat(np.arange(t) * n, m).reshape(t, m)

    if estimator == IMPORTANCE:
        w = special.softmax(o[indices] - np.log(m * probs), axis=1)
        flat = np.bincount((rows + indices).ravel(), weights=w.ravel(), minlength=t * n)
        out = flat.reshape(t, n)
        out[:, positive] -= 1.0
        return out
    if estimator != SAMPLED:
        raise ValueError(f"Unknown estimator {estimator!r}")

    corrected = o[indices].copy()
    negatives = indices != positive
    corrected[negatives] -= np.log(m * probs[negatives])
    full = np.hstack([np.full((t, 1), o[positive]), corrected])
    weights = special.softmax(full, axis=1)
    weights[:, 0] -= 1.0
    sources = np.hstack([np.full((t, 1), positive), indices])
    offsets = np.arange(t)[:, None] * n
    flat = np.bincount((offsets + sources).ravel(), weights=weights.ravel(), minlength=t * n)
    return flat.reshape(t, n)
