import math

import numpy as np
import pytest

from analysis.diagnostics import (
    bias_bound,
    chi_square_critical,
    chi_square_gof,
    convergence_rate_bound,
    convergence_term,
    cumulative_frequency,
    d2_bias_bound,
    divergence_report,
    empirical_frequency,
    grad_bias_mc,
    growth_ratio,
    kl_bound,
    kl_divergence,
    renyi_d2,
    timing_profile,
)
from analysis.toy_trainer import gen_task
from sampling.core import DomainError, EmbeddingMatrix, MidxError, logits, softmax
from sampling.quantization import QuantizerKind, build_index, residual_scores
from sampling.sampled_softmax import batched_grad_scatter, full_grad_logits
from sampling.samplers import SamplerKind, draw, make_sampler, prepare, proposal_distribution


class TestDivergences:
    def test_kl_identical(self, rng):
        p = softmax(rng.standard_normal(16))
        assert kl_divergence(p, p) == pytest.approx(0.0, abs=1e-15)

    def test_kl_point_mass(self):
        assert kl_divergence([1, 0], [0.5, 0.5]) == pytest.approx(math.log(2))

    def test_kl_matches_loop(self, rng):
        q = softmax(rng.standard_normal(16))
        p = softmax(rng.standard_normal(16))
        expected = sum(qi * math.log(qi / pi) for qi, pi in zip(q, p))
        assert kl_divergence(q, p) == pytest.approx(expected, abs=1e-12)

    def test_kl_support_violation(self, caplog):
        assert kl_divergence([0.5, 0.5], [1.0, 0.0]) == math.inf
        assert "support violation" in caplog.text

    def test_d2_identical_uniform(self):
        assert renyi_d2(np.full(8, 0.125), np.full(8, 0.125)) == pytest.approx(1.0)

    def test_d2_point_mass(self):
        assert renyi_d2([1, 0], [0.5, 0.5]) == pytest.approx(2.0)

    def test_d2_matches_loop(self, rng):
        p = softmax(rng.standard_normal(32))
        q = softmax(rng.standard_normal(32))
        assert renyi_d2(p, q) == pytest.approx(sum(a * a / b for a, b in zip(p, q)), rel=1e-12)

    def test_d2_support_violation(self):
        assert renyi_d2([0.5, 0.5], [1.0, 0.0]) == math.inf

    def test_unigram_report_flags_support_violation(self, rng):
        emb = EmbeddingMatrix(rng.standard_normal((4, 2)))
        z = rng.standard_normal(2)
        spec = make_sampler(SamplerKind.UNIGRAM, 4, frequencies=[0, 1, 1, 1])
        report = divergence_report(spec, prepare(spec, z), logits(emb, z), 4)
        assert report.d2 == math.inf
        assert report.d2_support_violation
        assert math.isfinite(report.kl)
        assert not report.kl_support_violation
        assert report.grad_bias_bound <= 2.0


class TestBounds:
    def test_uniform_kl_bound(self):
        assert kl_bound(SamplerKind.UNIFORM, [1, -1]) == 2

    def test_unigram_kl_bound(self):
        assert kl_bound(SamplerKind.UNIGRAM, [0, 0], frequencies=[1, 3]) == pytest.approx(math.log(1.5))

    def test_midx_needs_residual_scores(self):
        with pytest.raises(MidxError):
            kl_bound(SamplerKind.MIDX_FAST, [0, 0])

    def test_zero_residual_catalog(self):
        emb = EmbeddingMatrix([[1, 1], [1, -1], [-1, 1], [-1, -1]])
        index = build_index(emb, 2, QuantizerKind.PRODUCT, seed=0)
        spec = make_sampler(SamplerKind.MIDX_FAST, 4, index=index)
        z = np.array([0.4, 1.1])
        report = divergence_report(spec, prepare(spec, z), logits(emb, z), 5)
        assert report.kl_bound == pytest.approx(0.0, abs=1e-12)
        assert report.kl == pytest.approx(0.0, abs=1e-12)
        assert report.grad_bias_bound == pytest.approx(0.0, abs=1e-6)

    def test_bias_bound_zero_logits(self):
        assert bias_bound(SamplerKind.UNIFORM, np.zeros(5), m=10) == 0

    def test_bias_bound_plug_in(self):
        value = bias_bound(SamplerKind.UNIFORM, [1, -0.5], m=99)
        assert value == pytest.approx(math.sqrt((math.e**2 - 1) / 100), rel=1e-12)
        assert value == pytest.approx(0.2527, abs=1e-4)

    def test_bias_bound_clamped(self):
        assert bias_bound(SamplerKind.UNIFORM, [20, 0], m=1) == 2.0
        assert bias_bound(SamplerKind.UNIGRAM, [500, 0], frequencies=[1, 1], m=1) == 2.0

    def test_unigram_bias_bound_uses_smallest_positive_frequency(self):
        value = bias_bound(SamplerKind.UNIGRAM, [0, 0, 0], frequencies=[0, 1, 3], m=3)
        assert value == pytest.approx(math.sqrt((4.0 - 1) / 4))

    def test_d2_bias_bound(self):
        assert d2_bias_bound(1.0, 10) == 0
        assert d2_bias_bound(math.inf, 10) == 2.0

    def test_convergence_term_plug_in(self):
        assert convergence_term(SamplerKind.UNIFORM, [1, -0.5], m=99) == pytest.approx((math.e**2 - 1) / 100)
        assert convergence_term(
            SamplerKind.MIDX_FAST, [3, 1], residual_scores=[0.5, -0.25], m=3
        ) == pytest.approx((math.e - 1) / 4)
        assert convergence_term(SamplerKind.UNIGRAM, [0, 0, 0], frequencies=[0, 1, 3], m=3) == pytest.approx(0.75)

    @pytest.mark.parametrize("kind", list(SamplerKind))
    def test_convergence_term_matches_bias_bound(self, make_instance, kind):
        emb, index, z = make_instance(64, 8, 4)
        o = logits(emb, z)
        res = residual_scores(index, z)
        freqs = np.arange(1, 65)
        terms = [convergence_term(kind, o, res, freqs, m) for m in (4, 16, 64)]
        assert terms == sorted(terms, reverse=True)
        for m, term in zip((4, 16, 64), terms):
            assert bias_bound(kind, o, res, freqs, m) == pytest.approx(min(2.0, math.sqrt(term)))

    def test_convergence_term_overflow(self):
        assert convergence_term(SamplerKind.UNIFORM, [400, 0], m=1) == math.inf
        assert bias_bound(SamplerKind.UNIFORM, [400, 0], m=1) == 2.0

    def test_convergence_term_needs_draws(self):
        with pytest.raises(DomainError):
            convergence_term(SamplerKind.UNIFORM, [1, 0], m=0)

    def test_convergence_rate_bound(self):
        assert convergence_rate_bound(3.0, steps=4, grad_bound=1.0, smoothness=2.0, loss_gap=1.0) == pytest.approx(
            2.375
        )
        no_bias = convergence_rate_bound(0.0, steps=100, grad_bound=1.0, smoothness=1.0, loss_gap=1.0)
        assert convergence_rate_bound(1.0, 100, 1.0, 1.0, 1.0) > no_bias

    def test_convergence_rate_bound_domain(self):
        with pytest.raises(DomainError):
            convergence_rate_bound(1.0, steps=0, grad_bound=1.0, smoothness=1.0, loss_gap=1.0)
        with pytest.raises(DomainError):
            convergence_rate_bound(1.0, steps=10, grad_bound=1.0, smoothness=-1.0, loss_gap=1.0)

    def test_kl_within_bound_random_instances(self):
        r = np.random.default_rng(5)
        for i in range(50):
            n = int(r.integers(8, 128))
            emb = EmbeddingMatrix(r.standard_normal((n, 8)))
            z = r.standard_normal(8)
            o = logits(emb, z)
            scale = r.uniform(0.5, 5.0) / np.abs(o).max()
            z, o = z * scale, o * scale
            index = build_index(emb, 4, QuantizerKind.PRODUCT, seed=i)
            freqs = r.integers(1, 20, size=n)
            for kind in SamplerKind:
                spec = make_sampler(kind, n, index=index, frequencies=freqs)
                report = divergence_report(spec, prepare(spec, z), o, 8)
                assert report.kl_within_bound, (i, kind)

    def test_exact_report(self, make_instance):
        emb, index, z = make_instance(64, 8, 4)
        spec = make_sampler(SamplerKind.MIDX_EXACT, 64, index=index)
        report = divergence_report(spec, prepare(spec, z), logits(emb, z), 16)
        assert report.kl < 1e-10
        assert report.d2 == pytest.approx(1.0, abs=1e-9)
        assert report.residual_inf == pytest.approx(np.abs(residual_scores(index, z)).max())
        assert report.convergence_term == pytest.approx(math.expm1(2 * report.residual_inf) / 17)
        assert not report.kl_support_violation and not report.d2_support_violation
        assert report.to_dict()["sampler"] == "midx_exact"


class TestGradBiasMonteCarlo:
    @pytest.mark.slow
    @pytest.mark.parametrize("kind", [SamplerKind.UNIFORM, SamplerKind.UNIGRAM, SamplerKind.MIDX_FAST])
    @pytest.mark.parametrize("m", [4, 16, 64])
    def test_within_bound(self, make_instance, kind, m):
        emb, index, z = make_instance(48, 8, 4, seed=m, scale=2.0)
        freqs = np.random.default_rng(m).integers(1, 10, size=48)
        spec = make_sampler(kind, 48, index=index, frequencies=freqs)
        o = logits(emb, z)
        estimate = grad_bias_mc(spec, z, emb, int(np.argmax(o)), m, rng=np.random.default_rng(m))
        assert estimate.within_bound
        assert estimate.measured_bias <= estimate.bound + 3 * estimate.std_error
        res = residual_scores(index, z) if kind.is_midx else None
        # The closed-form bound dominates the d2 form.
        assert estimate.bound <= bias_bound(kind, o, res, freqs, m) + 1e-12

    def test_exact_proposal_m_equals_n(self, make_instance):
        emb, index, z = make_instance(16, 4, 2, seed=1)
        spec = make_sampler(SamplerKind.MIDX_EXACT, 16, index=index)
        estimate = grad_bias_mc(spec, z, emb, 3, 16, rng=np.random.default_rng(4))
        assert estimate.measured_bias < 5 * estimate.std_error
        assert estimate.measured_bias <= estimate.bound + 3 * estimate.std_error

    def test_single_draw_from_target(self, make_instance):
        emb, index, z = make_instance(16, 4, 2, seed=2)
        spec = make_sampler(SamplerKind.MIDX_EXACT, 16, index=index)
        estimate = grad_bias_mc(spec, z, emb, 0, 1, rng=np.random.default_rng(6))
        assert estimate.d2 == pytest.approx(1.0, abs=1e-9)
        assert estimate.measured_bias < 5 * estimate.std_error

    def test_threads_merge(self, make_instance):
        emb, index, z = make_instance(16, 4, 2, seed=3)
        spec = make_sampler(SamplerKind.MIDX_FAST, 16, index=index)
        a = grad_bias_mc(spec, z, emb, 1, 4, 1000, rng=np.random.default_rng(9), threads=3)
        b = grad_bias_mc(spec, z, emb, 1, 4, 1000, rng=np.random.default_rng(9), threads=3)
        assert a.measured_bias == b.measured_bias
        assert a.trials == 1000

    def test_too_few_trials(self, make_instance):
        emb, index, z = make_instance(16, 4, 2)
        spec = make_sampler(SamplerKind.UNIFORM, 16)
        with pytest.raises(DomainError):
            grad_bias_mc(spec, z, emb, 0, 4, trials=50)

    @pytest.mark.slow
    def test_error_decays_with_root_m(self, make_instance):
        emb, index, z = make_instance(32, 8, 4, seed=6)
        spec = make_sampler(SamplerKind.MIDX_EXACT, 32, index=index)
        o = logits(emb, z)
        exact = full_grad_logits(o, 0)
        pq = prepare(spec, z)
        rng = np.random.default_rng(17)
        ms = np.array([8, 32, 128])
        errors = []
        for m in ms:
            batch = draw(pq, 200 * m, rng)
            grads = batched_grad_scatter(
                o, 0, batch.indices.reshape(200, m), batch.probs.reshape(200, m), 32, "importance"
            )
            errors.append(np.linalg.norm(grads - exact, axis=1).mean())
        slope = np.polyfit(np.log(ms), np.log(errors), 1)[0]
        assert -0.7 <= slope <= -0.3


class TestFrequencies:
    def test_uniform_frequencies(self, rng):
        freq = empirical_frequency(make_sampler(SamplerKind.UNIFORM, 4), None, 1_000_000, rng)
        assert np.all((freq >= 0.247) & (freq <= 0.253))

    def test_single_class(self, rng):
        freq = empirical_frequency(make_sampler(SamplerKind.UNIFORM, 1), None, 10_000, rng)
        np.testing.assert_allclose(freq, [1.0])

    def test_too_few_draws(self, rng):
        with pytest.raises(DomainError):
            empirical_frequency(make_sampler(SamplerKind.UNIFORM, 4), None, 100, rng)

    @pytest.mark.slow
    def test_exact_midx_against_softmax(self, make_instance, rng):
        emb, index, z = make_instance(16, 8, 2, seed=8, scale=2.0)
        spec = make_sampler(SamplerKind.MIDX_EXACT, 16, index=index)
        freq = empirical_frequency(spec, z, 1_000_000, rng)
        stat, dof = chi_square_gof(freq * 1_000_000, softmax(logits(emb, z)))
        assert stat < chi_square_critical(dof)

    def test_cumulative(self):
        np.testing.assert_allclose(cumulative_frequency([0.1, 0.6, 0.3]), [0.6, 0.9, 1.0])


class TestChiSquare:
    def test_proportional_counts(self):
        stat, dof = chi_square_gof([250, 500, 250], [0.25, 0.5, 0.25])
        assert stat == pytest.approx(0.0)
        assert dof == 2

    def test_hand_arithmetic(self):
        stat, dof = chi_square_gof([510, 490], [0.5, 0.5])
        assert stat == pytest.approx(0.4)
        assert dof == 1

    def test_small_cells_are_pooled(self):
        expected = np.array([0.001, 0.001, 0.004, 0.494, 0.5])
        stat, dof = chi_square_gof([1, 1, 4, 494, 500], expected)
        assert stat == pytest.approx(0.0, abs=1e-9)
        assert dof == 2

    def test_calibration(self):
        rejections = 0
        for seed in range(100):
            draws = np.random.default_rng(seed).integers(0, 10, size=5000)
            stat, dof = chi_square_gof(np.bincount(draws, minlength=10), np.full(10, 0.1))
            rejections += stat >= chi_square_critical(dof)
        assert rejections <= 1

    def test_degenerate_inputs(self):
        with pytest.raises(DomainError):
            chi_square_gof([500, 500], [0.0, 0.0])
        with pytest.raises(DomainError):
            chi_square_gof([5, 5], [0.5, 0.5])
        with pytest.raises(DomainError):
            chi_square_gof([500, 500], [0.5, 0.25, 0.25])


@pytest.mark.slow
class TestKLOrdering:
    def _kl(self, emb, queries, kind, quantizer, seed):
        index = build_index(emb, 16, quantizer, seed=seed)
        spec = make_sampler(kind, emb.n_classes, index=index)
        values = []
        for z in queries:
            values.append(kl_divergence(proposal_distribution(prepare(spec, z)), softmax(logits(emb, z))))
        return float(np.mean(values))

    def test_fast_midx_beats_uniform(self):
        midx, uniform = [], []
        for seed in range(20):
            task = gen_task(512, 16, 16, clusters=16, seed=seed)
            midx.append(self._kl(task.catalog, task.queries, SamplerKind.MIDX_FAST, QuantizerKind.PRODUCT, seed))
            spec = make_sampler(SamplerKind.UNIFORM, 512)
            uniform.append(
                np.mean(
                    [
                        kl_divergence(proposal_distribution(prepare(spec)), softmax(logits(task.catalog, z)))
                        for z in task.queries
                    ]
                )
            )
        assert np.median(midx) < np.median(uniform)

    def test_residual_not_worse_than_product(self):
        product, residual = [], []
        for seed in range(20):
            task = gen_task(512, 16, 16, clusters=16, seed=seed)
            product.append(self._kl(task.catalog, task.queries, SamplerKind.MIDX_FAST, QuantizerKind.PRODUCT, seed))
            residual.append(self._kl(task.catalog, task.queries, SamplerKind.MIDX_FAST, QuantizerKind.RESIDUAL, seed))
        assert np.median(residual) <= np.median(product)


@pytest.mark.slow
class TestTiming:
    def test_small_profile(self):
        rows = timing_profile(list(SamplerKind), [200, 400], k=4, d=8, m=100, seed=0)
        assert len(rows) == 8
        assert all(r.prepare_seconds >= 0 and r.draw_seconds > 0 for r in rows)
        assert growth_ratio(rows, SamplerKind.UNIFORM, "draw_seconds") > 0

    def test_complexity(self):
        rows = timing_profile(list(SamplerKind), [1_000, 100_000], k=64, d=16, m=10_000, seed=1)
        assert growth_ratio(rows, SamplerKind.MIDX_FAST) < 3
        assert growth_ratio(rows, SamplerKind.MIDX_EXACT) > 10
        assert growth_ratio(rows, SamplerKind.UNIFORM, "draw_seconds") < 2
        assert growth_ratio(rows, SamplerKind.UNIGRAM, "draw_seconds") < 2

    def test_needs_two_sizes(self):
        rows = timing_profile([SamplerKind.UNIFORM], [100], k=2, d=4, m=10, seed=0)
        with pytest.raises(DomainError):
            growth_ratio(rows, SamplerKind.UNIFORM)
