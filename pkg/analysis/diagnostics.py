# analysis/diagnostics.py

"""Divergences, bias bounds, frequency checks and timing for the samplers."""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import special, stats

import config
from sampling.core import DomainError, EmbeddingMatrix, MidxError, as_vector, inf_norm, softmax
from sampling.quantization import QuantizerKind, build_index, residual_inf_norm, residual_scores
from sampling.sampled_softmax import IMPORTANCE, batched_grad_scatter, full_grad_logits
from sampling.samplers import (
    PreparedQuery,
    SamplerKind,
    SamplerSpec,
    draw,
    make_sampler,
    prepare,
    proposal_distribution,
)

logger = logging.getLogger(__name__)

# Largest exponent math.expm1 accepts without overflowing.
_EXP_LIMIT = 709.0


@dataclass
class DivergenceReport:
    """
    Divergence of one prepared proposal from the softmax, with its bounds.

    A support violation leaves the matching divergence infinite and sets its flag.
    """

    sampler: str
    kl: float
    d2: float
    kl_bound: float
    grad_bias_bound: float
    kl_within_bound: bool
    o_inf: float
    residual_inf: Optional[float]
    convergence_term: float
    kl_support_violation: bool
    d2_support_violation: bool
    q_min: float
    q_max: float
    n: int
    m: int

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class BiasEstimate:
    """Monte-Carlo gradient bias against its closed-form bound."""

    measured_bias: float
    bound: float
    std_error: float
    d2: float
    trials: int

    @property
    def within_bound(self) -> bool:
        return bool(self.measured_bias <= self.bound + config.MC_SLACK_SIGMAS * self.std_error)


@dataclass(frozen=True)
class TimingRow:
    sampler: str
    n: int
    prepare_seconds: float
    draw_seconds: float


def kl_divergence(q, p) -> float:
    """
    KL(Q‖P) = Σ q log(q/p) with 0·log 0 = 0.

    Returns ``inf`` (and logs a warning) when q puts mass where p has none.
    """
    q = as_vector(q, "q")
    p = as_vector(p, "p")
    if q.shape != p.shape:
        raise DomainError("Distributions differ in length")
    if np.any((q > 0) & (p <= 0)):
        logger.warning("KL support violation: q > 0 where p = 0")
        return math.inf
    return max(float(special.rel_entr(q, p).sum()), 0.0)


def renyi_d2(p, q) -> float:
    """Exponential second-order Rényi divergence d₂(P‖Q) = Σ p²/q."""
    p = as_vector(p, "p")
    q = as_vector(q, "q")
    if p.shape != q.shape:
        raise DomainError("Distributions differ in length")
    support = p > 0
    if np.any(q[support] <= 0):
        logger.warning("Renyi support violation: p > 0 where q = 0")
        return math.inf
    return float(np.sum(p[support] ** 2 / q[support]))


def _normalized_frequencies(frequencies) -> np.ndarray:
    if frequencies is None:
        raise MidxError("Unigram bounds need class frequencies")
    f = as_vector(frequencies, "frequencies")
    return f / f.sum()


def kl_bound(kind: SamplerKind, o, residual_scores=None, frequencies=None) -> float:
    """
    Upper bound on KL(Q‖P) for a sampler kind.

    uniform → 2‖o‖∞; unigram → 2‖o‖∞ + ln(N·q_max); MIDX → 2‖õ‖∞.

    Raises:
        MidxError: If an input the kind needs is missing.
    """
    kind = SamplerKind(kind)
    o = as_vector(o, "logits")
    if kind == SamplerKind.UNIFORM:
        return 2.0 * inf_norm(o)
    if kind == SamplerKind.UNIGRAM:
        q = _normalized_frequencies(frequencies)
        return 2.0 * inf_norm(o) + math.log(q.shape[0] * q.max())
    if residual_scores is None:
        raise MidxError("MIDX bounds need residual scores")
    return 2.0 * inf_norm(residual_scores)


def _bias_exponent(kind: SamplerKind, o, residual_scores=None, frequencies=None) -> float:
    kind = SamplerKind(kind)
    o = as_vector(o, "logits")
    if kind == SamplerKind.UNIFORM:
        return 2.0 * inf_norm(o)
    if kind == SamplerKind.UNIGRAM:
        q = _normalized_frequencies(frequencies)
        q_min = float(q[q > 0].min())
        return 2.0 * inf_norm(o) - math.log(q_min)
    if residual_scores is None:
        raise MidxError("MIDX bounds need residual scores")
    return 2.0 * inf_norm(residual_scores)


def _rate_term(exponent: float, m: int) -> float:
    if exponent > _EXP_LIMIT:
        return math.inf
    return max(math.expm1(exponent), 0.0) / (m + 1)


def bias_bound(kind: SamplerKind, o, residual_scores=None, frequencies=None, m: int = 1) -> float:
    """
    Closed-form gradient-bias bound per sampler kind, clamped at 2 (U = 1).

    uniform → √((e^{2‖o‖∞} − 1)/(M+1)); unigram uses 2‖o‖∞ − ln q_min with q_min
    the smallest positive normalized frequency; MIDX uses 2‖õ‖∞.
    """
    term = _rate_term(_bias_exponent(kind, o, residual_scores, frequencies), m)
    return min(2.0, math.sqrt(term))


def convergence_term(kind: SamplerKind, o, residual_scores=None, frequencies=None, m: int = 1) -> float:
    """
    Bias term (e^x − 1)/(M + 1) that enters the SGD convergence rate of a sampler.

    x is 2‖o‖∞ for uniform, 2‖o‖∞ − ln q_min for unigram and 2‖õ‖∞ for the
    MIDX kinds. Unclamped; ``inf`` once e^x overflows.
    """
    if m < 1:
        raise DomainError(f"Number of draws must be positive, got {m}")
    return _rate_term(_bias_exponent(kind, o, residual_scores, frequencies), m)


def convergence_rate_bound(
    term: float,
    steps: int,
    grad_bound: float,
    smoothness: float,
    loss_gap: float,
    u: float = 1.0,
) -> float:
    """
    Bound on the mean squared full-gradient norm after ``steps`` SGD steps.

    G·√(8·S·(L(θ₀) − L*)/T) + U/(2T)·term, with the step size tuned to T.

    Args:
        term: Sampler bias term from :func:`convergence_term`.
        steps: Number of SGD steps T.
        grad_bound: Bound G on the stochastic gradient norm.
        smoothness: Smoothness constant S of the per-example losses.
        loss_gap: Initial loss minus the optimal loss.
        u: Bound U on the class-gradient norm.

    Raises:
        DomainError: On a non-positive step count or a negative constant.
    """
    if steps < 1:
        raise DomainError(f"Need at least one step, got {steps}")
    if min(grad_bound, smoothness, loss_gap, u, term) < 0:
        raise DomainError("Convergence constants must be non-negative")
    return grad_bound * math.sqrt(8.0 * smoothness * loss_gap / steps) + u * term / (2.0 * steps)


def d2_bias_bound(d2: float, m: int) -> float:
    """U·min{2, √((d₂ − 1)/(M + 1))} with U = 1."""
    if not math.isfinite(d2):
        return 2.0
    return min(2.0, math.sqrt(max(d2 - 1.0, 0.0) / (m + 1)))


def _residual_inputs(spec: SamplerSpec, pq: PreparedQuery) -> Optional[np.ndarray]:
    if spec.kind.is_midx:
        return residual_scores(spec.index, pq.query)
    return None


def divergence_report(spec: SamplerSpec, pq: PreparedQuery, o, m: int) -> DivergenceReport:
    """Exact divergences of a prepared proposal from softmax(o), with bounds."""
    o = as_vector(o, "logits")
    p = softmax(o)
    q = proposal_distribution(pq)
    res = _residual_inputs(spec, pq)
    kl = kl_divergence(q, p)
    d2 = renyi_d2(p, q)
    bound = kl_bound(spec.kind, o, res, spec.frequencies)
    positive_q = q[q > 0]
    return DivergenceReport(
        sampler=spec.kind.value,
        kl=kl,
        d2=d2,
        kl_bound=bound,
        grad_bias_bound=bias_bound(spec.kind, o, res, spec.frequencies, m),
        kl_within_bound=bool(kl <= bound + 1e-12),
        o_inf=inf_norm(o),
        residual_inf=residual_inf_norm(spec.index, pq.query) if spec.kind.is_midx else None,
        convergence_term=convergence_term(spec.kind, o, res, spec.frequencies, m),
        kl_support_violation=not math.isfinite(kl),
        d2_support_violation=not math.isfinite(d2),
        q_min=float(positive_q.min()),
        q_max=float(q.max()),
        n=spec.n_classes,
        m=m,
    )


def _bias_chunk(
    pq: PreparedQuery,
    o: np.ndarray,
    positive: int,
    m: int,
    trials: int,
    rng: np.random.Generator,
    estimator: str,
) -> Tuple[np.ndarray, np.ndarray]:
    n = o.shape[0]
    total = np.zeros(n)
    squares = np.zeros(n)
    remaining = trials
    while remaining > 0:
        t = min(remaining, config.MC_CHUNK_TRIALS)
        batch = draw(pq, t * m, rng)
        grads = batched_grad_scatter(
            o, positive, batch.indices.reshape(t, m), batch.probs.reshape(t, m), n, estimator
        )
        total += grads.sum(axis=0)
        squares += (grads**2).sum(axis=0)
        remaining -= t
    return total, squares


def grad_bias_mc(
    spec: SamplerSpec,
    z,
    emb: EmbeddingMatrix,
    positive: int,
    m: int,
    trials: int = config.BIAS_TRIALS,
    rng: Optional[np.random.Generator] = None,
    estimator: str = IMPORTANCE,
    threads: int = 1,
) -> BiasEstimate:
    """
    Monte-Carlo gradient bias of a sampler against the closed-form bound.

    The bias is ‖mean estimate − full_grad_logits‖∞ over ``trials`` batches of
    ``m`` draws; the bound uses the exactly computed d₂(P‖Q).

    Args:
        spec: Sampler configuration.
        z: Query vector.
        emb: Class embeddings.
        positive: Positive class.
        m: Draws per batch.
        trials: Number of batches, at least 100.
        rng: Seeded generator.
        estimator: ``"importance"`` or ``"sampled"``.
        threads: Independent generator streams run concurrently.

    Returns:
        A :class:`BiasEstimate`.
    """
    if trials < config.MIN_BIAS_TRIALS:
        raise DomainError(f"Need at least {config.MIN_BIAS_TRIALS} trials, got {trials}")
    rng = np.random.default_rng(rng)
    o = emb.data @ np.asarray(z, dtype=np.float64)
    pq = prepare(spec, z)
    exact = full_grad_logits(o, positive)

    threads = max(1, min(threads, trials))
    streams = rng.spawn(threads)
    shares = [trials // threads + (1 if i < trials % threads else 0) for i in range(threads)]
    if threads == 1:
        parts = [_bias_chunk(pq, o, positive, m, shares[0], streams[0], estimator)]
    else:
        # Each worker gets its own prepared state and stream.
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [
                pool.submit(_bias_chunk, prepare(spec, z), o, positive, m, share, stream, estimator)
                for share, stream in zip(shares, streams)
            ]
            parts = [f.result() for f in futures]

    total = sum(p[0] for p in parts)
    squares = sum(p[1] for p in parts)
    mean = total / trials
    variance = np.maximum(squares / trials - mean**2, 0.0)
    std_error = np.sqrt(variance / trials)

    d2 = renyi_d2(softmax(o), proposal_distribution(pq))
    estimate = BiasEstimate(
        measured_bias=inf_norm(mean - exact),
        bound=d2_bias_bound(d2, m),
        std_error=float(std_error.max()),
        d2=d2,
        trials=trials,
    )
    if not estimate.within_bound:
        logger.warning(
            "Measured bias %.4g exceeds bound %.4g + %.1f SE (%s, M=%d)",
            estimate.measured_bias,
            estimate.bound,
            config.MC_SLACK_SIGMAS,
            spec.kind.value,
            m,
        )
    return estimate


def empirical_frequency(
    spec: SamplerSpec, z, m_total: int, rng: Optional[np.random.Generator] = None
) -> np.ndarray:
    """Normalized draw counts over the catalog from ``m_total`` draws."""
    if m_total < config.MIN_FREQUENCY_DRAWS:
        raise DomainError(f"Need at least {config.MIN_FREQUENCY_DRAWS} draws, got {m_total}")
    rng = np.random.default_rng(rng)
    batch = draw(prepare(spec, z), m_total, rng)
    return np.bincount(batch.indices, minlength=spec.n_classes) / m_total


def cumulative_frequency(freqs) -> np.ndarray:
    """Cumulative probability with classes ordered by descending frequency."""
    f = as_vector(freqs, "frequencies")
    return np.cumsum(np.sort(f)[::-1])


def _pool_cells(observed: np.ndarray, expected: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    order = np.argsort(expected, kind="stable")
    obs_sorted = observed[order]
    exp_sorted = expected[order]
    # Merge the smallest cells until the pooled tail reaches the minimum count.
    cut = 0
    tail = 0.0
    while cut < exp_sorted.shape[0] and tail < config.CHI2_MIN_EXPECTED:
        tail += exp_sorted[cut]
        cut += 1
    if cut == 0:
        return obs_sorted, exp_sorted
    pooled_obs = np.concatenate([[obs_sorted[:cut].sum()], obs_sorted[cut:]])
    pooled_exp = np.concatenate([[exp_sorted[:cut].sum()], exp_sorted[cut:]])
    return pooled_obs, pooled_exp


def chi_square_gof(observed_counts, expected_probs) -> Tuple[float, int]:
    """
    Pearson χ² goodness of fit with small expected cells pooled.

    Args:
        observed_counts: Count per outcome.
        expected_probs: Expected probability per outcome.

    Returns:
        (statistic, degrees of freedom).

    Raises:
        DomainError: On a degenerate expected vector or too few observations.
    """
    observed = as_vector(observed_counts, "observed")
    expected_p = as_vector(expected_probs, "expected")
    if observed.shape != expected_p.shape:
        raise DomainError("Observed and expected vectors differ in length")
    if not np.all(np.isfinite(expected_p)) or np.any(expected_p < 0) or expected_p.sum() <= 0:
        raise DomainError("Expected probabilities must be non-negative with a positive sum")
    total = observed.sum()
    if total < config.CHI2_MIN_TOTAL:
        raise DomainError(f"Need at least {config.CHI2_MIN_TOTAL} observations, got {total}")

    expected = total * expected_p / expected_p.sum()
    obs, exp = _pool_cells(observed, expected)
    if obs.shape[0] < 2:
        return 0.0, 0
    statistic, _ = stats.chisquare(obs, exp)
    return float(statistic), int(obs.shape[0] - 1)


def chi_square_critical(dof: int, alpha: float = config.CHI2_ALPHA) -> float:
    """Upper ``1 − alpha`` quantile of χ²(dof)."""
    return float(stats.chi2.ppf(1.0 - alpha, dof))


def timing_profile(
    kinds: Sequence[SamplerKind],
    n_values: Sequence[int],
    k: int,
    d: int,
    m: int,
    repeats: int = config.TIMING_REPEATS,
    seed: int = 0,
    quantizer: QuantizerKind = QuantizerKind.PRODUCT,
) -> List[TimingRow]:
    """
    Median prepare time and per-draw time per (sampler kind, N).

    Catalogs and queries are random Gaussian; index construction is not timed.
    """
    if repeats < config.TIMING_REPEATS:
        raise DomainError(f"Need at least {config.TIMING_REPEATS} repeats, got {repeats}")
    rng = np.random.default_rng(seed)
    rows: List[TimingRow] = []
    for n in n_values:
        emb = EmbeddingMatrix(rng.standard_normal((n, d)) / math.sqrt(d))
        index = None
        if any(SamplerKind(kind).is_midx for kind in kinds):
            index = build_index(emb, k, quantizer, iters=5, seed=rng)
        frequencies = rng.integers(1, 100, size=n)
        for kind in kinds:
            spec = make_sampler(kind, n, index=index, frequencies=frequencies)
            prepare_times = []
            draw_times = []
            for _ in range(repeats):
                z = rng.standard_normal(d)
                start = time.perf_counter()
                pq = prepare(spec, z)
                prepare_times.append(time.perf_counter() - start)
                start = time.perf_counter()
                draw(pq, m, rng)
                draw_times.append((time.perf_counter() - start) / m)
            rows.append(
                TimingRow(
                    sampler=SamplerKind(kind).value,
                    n=n,
                    prepare_seconds=float(np.median(prepare_times)),
                    draw_seconds=float(np.median(draw_times)),
                )
            )
            logger.info("Timed %s at N=%d", SamplerKind(kind).value, n)
    return rows


def growth_ratio(rows: Sequence[TimingRow], kind: SamplerKind, column: str = "prepare_seconds") -> float:
    """Ratio of a timing column between the largest and smallest N for a kind."""
    kind = SamplerKind(kind)
    picked = sorted((r for r in rows if r.sampler == kind.value), key=lambda r: r.n)
    if len(picked) < 2:
        raise DomainError(f"Need at least two catalog sizes for {kind.value}")
    return getattr(picked[-1], column) / getattr(picked[0], column)
