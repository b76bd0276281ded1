# analysis/toy_trainer.py

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import special

import config
from sampling.core import DimensionError, DomainError, EmbeddingMatrix
from sampling.quantization import QuantizerKind, build_index
from sampling.sampled_softmax import (
    ESTIMATORS,
    IMPORTANCE,
    SAMPLED,
    correct_logits,
    full_grad_logits,
    importance_grad_scatter,
    sampled_grad_scatter,
)
from sampling.samplers import SamplerKind, SamplerSpec, draw, make_sampler, prepare

logger = logging.getLogger(__name__)

FULL = "full"


@dataclass(frozen=True, eq=False)
class ToyTask:
    """
    Bilinear classification task on a Gaussian-mixture catalog.

    Query j should score its label ``labels[j]`` highest; only the catalog
    embeddings are trained.
    """

    queries: np.ndarray
    catalog: EmbeddingMatrix
    labels: np.ndarray
    clusters: int = 0
    noise: float = 0.0
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        queries = np.asarray(self.queries, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if queries.ndim != 2 or queries.shape[1] != self.catalog.dim:
            raise DimensionError(f"Queries must be Q×{self.catalog.dim}, got shape {queries.shape}")
        if labels.shape != (queries.shape[0],):
            raise DimensionError("Need exactly one label per query")
        if np.any((labels < 0) | (labels >= self.catalog.n_classes)):
            raise DimensionError("Label outside the catalog")
        object.__setattr__(self, "queries", queries)
        object.__setattr__(self, "labels", labels)

    @property
    def n_classes(self) -> int:
        return self.catalog.n_classes

    @property
    def n_queries(self) -> int:
        return self.queries.shape[0]


@dataclass
class TrainReport:
    """Per-epoch exact full-softmax loss and full-gradient norm of one run."""

    sampler: str
    m: int
    learning_rate: float
    seed: int
    losses: List[float] = field(default_factory=list)
    grad_norms: List[float] = field(default_factory=list)
    aborted: bool = False
    embeddings: Optional[np.ndarray] = None

    @property
    def initial_loss(self) -> float:
        return self.losses[0]

    @property
    def final_loss(self) -> float:
        return self.losses[-1]

    def rows(self) -> List[Tuple[int, float, float]]:
        return [(epoch, loss, norm) for epoch, (loss, norm) in enumerate(zip(self.losses, self.grad_norms))]


def gen_task(
    n_classes: int = config.TOY_CLASSES,
    dim: int = config.TOY_DIM,
    n_queries: int = config.TOY_QUERIES,
    clusters: int = config.TOY_CLUSTERS,
    noise: float = config.TOY_NOISE,
    seed: int = 0,
) -> ToyTask:
    """
    Generates a clustered toy task.

    Class ``i`` belongs to cluster ``i % clusters``; its embedding is the
    cluster center plus ``noise`` Gaussian noise. Each query is its label's
    embedding plus the same noise.

    Raises:
        DomainError: On non-positive sizes, negative noise or more clusters than classes.
    """
    if n_classes < 1 or dim < 1 or n_queries < 1 or clusters < 1:
        raise DomainError("Task sizes must be positive")
    if clusters > n_classes:
        raise DomainError(f"Cannot have {clusters} clusters over {n_classes} classes")
    if noise < 0 or not math.isfinite(noise):
        raise DomainError(f"Noise scale must be finite and non-negative, got {noise}")

    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((clusters, dim))
    membership = np.arange(n_classes) % clusters
    catalog = centers[membership] + noise * rng.standard_normal((n_classes, dim))
    labels = rng.integers(0, n_classes, size=n_queries)
    queries = catalog[labels] + noise * rng.standard_normal((n_queries, dim))
    queries.setflags(write=False)
    labels.setflags(write=False)
    return ToyTask(
        queries=queries,
        catalog=EmbeddingMatrix(catalog),
        labels=labels,
        clusters=clusters,
        noise=noise,
        seed=seed,
    )


def _full_terms(task: ToyTask, embeddings: np.ndarray) -> Tuple[float, float]:
    o = task.queries @ embeddings.T
    rows = np.arange(task.n_queries)
    losses = special.logsumexp(o, axis=1) - o[rows, task.labels]
    p = special.softmax(o, axis=1)
    p[rows, task.labels] -= 1.0
    grad = p.T @ task.queries / task.n_queries
    return float(losses.mean()), float(np.linalg.norm(grad))


def full_eval_loss(task: ToyTask, embeddings: Optional[np.ndarray] = None) -> float:
    """Mean exact full-softmax loss over every query of the task."""
    if embeddings is None:
        embeddings = task.catalog.data
    return _full_terms(task, np.asarray(embeddings, dtype=np.float64))[0]


def logit_grad(
    o: np.ndarray,
    positive: int,
    spec: Optional[SamplerSpec],
    z: np.ndarray,
    m: int,
    rng: np.random.Generator,
    estimator: str = SAMPLED,
) -> np.ndarray:
    """
    One gradient estimate with respect to the logits.

    ``spec`` None means the exact full gradient.
    """
    if spec is None:
        return full_grad_logits(o, positive)
    batch = draw(prepare(spec, z), m, rng)
    if estimator == IMPORTANCE:
        return importance_grad_scatter(o, positive, batch, o.shape[0])
    return sampled_grad_scatter(correct_logits(o, positive, batch), o.shape[0])


def _sampler_for(
    kind: SamplerKind,
    embeddings: np.ndarray,
    task: ToyTask,
    k: int,
    quantizer: QuantizerKind,
    rng: np.random.Generator,
) -> SamplerSpec:
    if kind.is_midx:
        index = build_index(EmbeddingMatrix(embeddings), k, quantizer, seed=rng)
        return make_sampler(kind, task.n_classes, index=index)
    frequencies = np.bincount(task.labels, minlength=task.n_classes)
    return make_sampler(kind, task.n_classes, frequencies=frequencies)


def train(
    task: ToyTask,
    sampler: str,
    m: int = config.DEFAULT_NUM_SAMPLES,
    epochs: int = config.TOY_EPOCHS,
    lr: float = config.TOY_LEARNING_RATE,
    rebuild_every: int = 1,
    seed: int = 0,
    k: int = config.TOY_CODEWORDS,
    quantizer: QuantizerKind = QuantizerKind.PRODUCT,
    estimator: str = SAMPLED,
) -> TrainReport:
    """
    Trains the catalog embeddings with per-query SGD.

    Every query draws ``m`` classes from the sampler, corrects their logits and
    scatters the logit gradient onto embedding rows through ∂o_j/∂q_j = z.
    MIDX indexes are rebuilt from the current embeddings every
    ``rebuild_every`` epochs. The reported loss is always the exact full
    softmax loss, at epoch 0 and after every epoch.

    Args:
        task: Task from :func:`gen_task`.
        sampler: A sampler kind, or ``"full"`` for exact full gradients.
        m: Draws per query.
        epochs: Passes over the queries.
        lr: Learning rate, non-negative.
        rebuild_every: Index rebuild cadence in epochs.
        seed: Seed for query order, index builds and draws.
        k: Codewords per codebook for MIDX kinds.
        quantizer: Quantizer kind for MIDX kinds.
        estimator: ``"sampled"`` or ``"importance"``.

    Returns:
        The report; ``aborted`` is set when the loss turned non-finite.
    """
    if lr < 0:
        raise DomainError(f"Learning rate must be non-negative, got {lr}")
    if rebuild_every < 1:
        raise DomainError(f"Index rebuild cadence must be at least 1 epoch, got {rebuild_every}")
    if estimator not in ESTIMATORS:
        raise DomainError(f"Unknown estimator {estimator!r}")
    kind = None if sampler == FULL else SamplerKind(sampler)
    if kind is not None and m < 1:
        raise DomainError(f"Number of draws must be positive, got {m}")

    rng = np.random.default_rng(seed)
    embeddings = task.catalog.data.copy()
    report = TrainReport(sampler=sampler if kind is None else kind.value, m=m, learning_rate=lr, seed=seed)
    loss, norm = _full_terms(task, embeddings)
    report.losses.append(loss)
    report.grad_norms.append(norm)

    spec = None
    for epoch in range(epochs):
        if kind is not None and (spec is None or (kind.is_midx and epoch % rebuild_every == 0)):
            spec = _sampler_for(kind, embeddings, task, k, quantizer, rng)
        for j in rng.permutation(task.n_queries):
            z = task.queries[j]
            g = logit_grad(embeddings @ z, int(task.labels[j]), spec, z, m, rng, estimator)
            touched = np.flatnonzero(g)
            embeddings[touched] -= lr * g[touched, None] * z[None, :]

        loss, norm = _full_terms(task, embeddings)
        if not math.isfinite(loss):
            logger.error("Loss turned non-finite after epoch %d (%s)", epoch + 1, report.sampler)
            report.aborted = True
            break
        report.losses.append(loss)
        report.grad_norms.append(norm)
        logger.info("Epoch %d/%d (%s): full loss %.6g", epoch + 1, epochs, report.sampler, loss)

    report.embeddings = embeddings
    return report


@dataclass(frozen=True)
class SweepPoint:
    """Outcome of one training run inside a sample-size sweep."""

    sampler: str
    m: int
    seed: int
    initial_loss: float
    final_loss: float
    aborted: bool


def sample_size_sweep(
    task: ToyTask,
    samplers: Sequence[str],
    m_values: Sequence[int] = config.SWEEP_SAMPLE_SIZES,
    seeds: Sequence[int] = (0,),
    **train_kwargs,
) -> List[SweepPoint]:
    """
    Trains the task once per (sampler, M, seed) and records the loss reached.

    Remaining keyword arguments go to :func:`train`. Aborted runs are kept
    with the last finite loss.

    Raises:
        DomainError: On an empty sampler, size or seed list, or a non-positive M.
    """
    if not samplers or not m_values or not seeds:
        raise DomainError("A sweep needs at least one sampler, sample size and seed")
    if min(m_values) < 1:
        raise DomainError(f"Sample sizes must be positive, got {list(m_values)}")

    points: List[SweepPoint] = []
    for sampler in samplers:
        for m in m_values:
            for seed in seeds:
                report = train(task, sampler, m=m, seed=seed, **train_kwargs)
                points.append(
                    SweepPoint(
                        sampler=report.sampler,
                        m=m,
                        seed=seed,
                        initial_loss=report.initial_loss,
                        final_loss=report.final_loss,
                        aborted=report.aborted,
                    )
                )
            logger.info("Sweep %s M=%d done over %d seeds", sampler, m, len(seeds))
    return points


def sweep_medians(points: Sequence[SweepPoint]) -> Dict[Tuple[str, int], float]:
    """Median final loss per (sampler, M)."""
    grouped: Dict[Tuple[str, int], List[float]] = {}
    for point in points:
        grouped.setdefault((point.sampler, point.m), []).append(point.final_loss)
    return {key: float(np.median(values)) for key, values in grouped.items()}
