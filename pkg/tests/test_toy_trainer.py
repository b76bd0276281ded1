import numpy as np
import pytest

from analysis.toy_trainer import (
    FULL,
    SweepPoint,
    ToyTask,
    full_eval_loss,
    gen_task,
    logit_grad,
    sample_size_sweep,
    sweep_medians,
    train,
)
from sampling.core import DimensionError, DomainError, EmbeddingMatrix, logits
from sampling.quantization import QuantizerKind
from sampling.sampled_softmax import IMPORTANCE, full_grad_logits
from sampling.samplers import SamplerKind, make_sampler


class TestGenTask:
    def test_noise_free_queries_hit_their_class(self):
        task = gen_task(12, 4, 30, clusters=12, noise=0.0, seed=3)
        np.testing.assert_array_equal(task.queries, task.catalog.data[task.labels])

    def test_deterministic_under_seed(self):
        a = gen_task(32, 4, 20, clusters=4, seed=9)
        b = gen_task(32, 4, 20, clusters=4, seed=9)
        np.testing.assert_array_equal(a.catalog.data, b.catalog.data)
        np.testing.assert_array_equal(a.labels, b.labels)
        c = gen_task(32, 4, 20, clusters=4, seed=10)
        assert not np.array_equal(a.catalog.data, c.catalog.data)

    def test_classes_cluster_together(self):
        task = gen_task(64, 8, 10, clusters=8, noise=0.3, seed=0)
        data = task.catalog.data
        membership = np.arange(64) % 8
        dist = np.linalg.norm(data[:, None, :] - data[None, :, :], axis=2)
        same = membership[:, None] == membership[None, :]
        off_diagonal = ~np.eye(64, dtype=bool)
        assert dist[same & off_diagonal].mean() < dist[~same].mean()

    def test_shapes_and_label_range(self):
        task = gen_task(20, 6, 15, clusters=5, seed=1)
        assert task.n_classes == 20 and task.n_queries == 15
        assert task.queries.shape == (15, 6)
        assert task.labels.min() >= 0 and task.labels.max() < 20

    def test_invalid_sizes(self):
        with pytest.raises(DomainError):
            gen_task(4, 2, 3, clusters=5)
        with pytest.raises(DomainError):
            gen_task(0, 2, 3, clusters=1)
        with pytest.raises(DomainError):
            gen_task(4, 2, 3, clusters=2, noise=-1.0)

    def test_task_validation(self):
        emb = EmbeddingMatrix(np.zeros((3, 2)))
        with pytest.raises(DimensionError):
            ToyTask(queries=np.zeros((2, 3)), catalog=emb, labels=np.array([0, 1]))
        with pytest.raises(DimensionError):
            ToyTask(queries=np.zeros((2, 2)), catalog=emb, labels=np.array([0, 3]))


class TestLogitGrad:
    def test_full_when_no_sampler(self, rng):
        o = rng.standard_normal(10)
        g = logit_grad(o, 2, None, np.zeros(4), 5, rng)
        np.testing.assert_allclose(g, full_grad_logits(o, 2))

    def test_sampled_gradient_sums_to_zero(self, make_instance, rng):
        emb, index, z = make_instance(64, 8, 4)
        spec = make_sampler(SamplerKind.MIDX_FAST, 64, index=index)
        g = logit_grad(logits(emb, z), 7, spec, z, 10, rng)
        assert g.sum() == pytest.approx(0.0, abs=1e-12)
        assert g[7] < 0


class TestTrain:
    @pytest.fixture
    def small_task(self):
        return gen_task(32, 8, 64, clusters=4, seed=2)

    def test_zero_learning_rate_keeps_loss(self, small_task):
        report = train(small_task, SamplerKind.UNIFORM.value, m=4, epochs=3, lr=0.0)
        assert len(report.losses) == 4
        assert len(set(report.losses)) == 1
        assert report.initial_loss == pytest.approx(full_eval_loss(small_task))

    def test_full_gradient_reduces_loss(self, small_task):
        report = train(small_task, FULL, epochs=5, lr=0.05)
        assert report.final_loss < report.initial_loss
        assert not report.aborted
        assert full_eval_loss(small_task, report.embeddings) == pytest.approx(report.final_loss)

    def test_exact_midx_with_full_draws_tracks_full_gradient(self, small_task):
        common = dict(epochs=3, lr=0.01, seed=4)
        full = train(small_task, FULL, **common)
        midx = train(
            small_task, SamplerKind.MIDX_EXACT.value, m=32, k=2, estimator=IMPORTANCE, **common
        )
        assert midx.final_loss == pytest.approx(full.final_loss, rel=0.05)

    def test_first_step_direction_matches_full_gradient(self, make_instance):
        # The mean of many one-query gradient estimates projects onto the full gradient.
        emb, index, z = make_instance(32, 8, 2, seed=6, scale=2.0)
        o = logits(emb, z)
        exact = full_grad_logits(o, 3)
        spec = make_sampler(SamplerKind.MIDX_EXACT, 32, index=index)
        r = np.random.default_rng(1)
        projections = np.array(
            [np.dot(logit_grad(o, 3, spec, z, 16, r, IMPORTANCE), exact) for _ in range(4000)]
        )
        mean = projections.mean()
        std_error = projections.std(ddof=1) / np.sqrt(projections.size)
        assert abs(mean - np.dot(exact, exact)) < 3 * std_error + 1e-12

    def test_deterministic_under_seed(self, small_task):
        a = train(small_task, SamplerKind.MIDX_FAST.value, m=4, epochs=2, lr=0.01, seed=3, k=2)
        b = train(small_task, SamplerKind.MIDX_FAST.value, m=4, epochs=2, lr=0.01, seed=3, k=2)
        assert a.losses == b.losses

    def test_residual_quantizer_and_unigram(self, small_task):
        for sampler, extra in (
            (SamplerKind.MIDX_FAST.value, dict(quantizer=QuantizerKind.RESIDUAL, k=2)),
            (SamplerKind.UNIGRAM.value, {}),
        ):
            report = train(small_task, sampler, m=4, epochs=2, lr=0.01, **extra)
            assert len(report.grad_norms) == 3

    def test_rows(self, small_task):
        report = train(small_task, SamplerKind.UNIFORM.value, m=2, epochs=2, lr=0.01)
        rows = report.rows()
        assert [r[0] for r in rows] == [0, 1, 2]
        assert rows[-1][1] == report.final_loss

    def test_invalid_arguments(self, small_task):
        with pytest.raises(DomainError):
            train(small_task, FULL, lr=-1.0)
        with pytest.raises(DomainError):
            train(small_task, SamplerKind.UNIFORM.value, m=0)
        with pytest.raises(DomainError):
            train(small_task, SamplerKind.UNIFORM.value, rebuild_every=0)
        with pytest.raises(ValueError):
            train(small_task, "nearest")

    def test_divergence_aborts(self, small_task):
        report = train(small_task, FULL, epochs=3, lr=float("inf"))
        assert report.aborted
        assert len(report.losses) < 4

    @pytest.mark.slow
    def test_fast_midx_beats_uniform(self):
        fast, uniform = [], []
        for seed in range(10):
            task = gen_task(256, 16, 512, clusters=16, seed=seed)
            fast_report = train(task, SamplerKind.MIDX_FAST.value, m=8, epochs=30, seed=seed)
            uniform_report = train(task, SamplerKind.UNIFORM.value, m=8, epochs=30, seed=seed)
            for report in (fast_report, uniform_report):
                assert report.final_loss < report.initial_loss
            fast.append(fast_report.final_loss)
            uniform.append(uniform_report.final_loss)
        assert np.median(fast) < np.median(uniform)

    @pytest.mark.slow
    @pytest.mark.parametrize("kind", list(SamplerKind))
    def test_loss_decreases_for_every_sampler(self, kind):
        for seed in range(3):
            task = gen_task(256, 16, 512, clusters=16, seed=seed)
            report = train(task, kind.value, m=8, epochs=10, seed=seed)
            assert not report.aborted
            assert report.final_loss < report.initial_loss, (kind, seed)


class TestSampleSizeSweep:
    @pytest.fixture
    def small_task(self):
        return gen_task(32, 8, 64, clusters=4, seed=2)

    def test_one_point_per_run(self, small_task):
        points = sample_size_sweep(
            small_task, [SamplerKind.UNIFORM.value, SamplerKind.MIDX_FAST.value], [2, 4], seeds=[0, 1], epochs=1, k=2
        )
        assert len(points) == 8
        assert {(p.sampler, p.m) for p in points} == {
            (s, m) for s in (SamplerKind.UNIFORM.value, SamplerKind.MIDX_FAST.value) for m in (2, 4)
        }
        assert all(p.initial_loss == pytest.approx(full_eval_loss(small_task)) for p in points)

    def test_matches_single_runs(self, small_task):
        point = sample_size_sweep(small_task, [SamplerKind.UNIFORM.value], [3], seeds=[5], epochs=2, lr=0.01)[0]
        report = train(small_task, SamplerKind.UNIFORM.value, m=3, seed=5, epochs=2, lr=0.01)
        assert point.final_loss == report.final_loss
        assert not point.aborted

    def test_default_sizes(self, small_task):
        points = sample_size_sweep(small_task, [SamplerKind.UNIFORM.value], epochs=0)
        assert [p.m for p in points] == [5, 10, 50, 100]

    def test_medians(self):
        points = [
            SweepPoint("uniform", 5, seed, 2.0, loss, False) for seed, loss in enumerate((1.0, 3.0, 2.0))
        ] + [SweepPoint("uniform", 10, 0, 2.0, 0.5, False)]
        assert sweep_medians(points) == {("uniform", 5): 2.0, ("uniform", 10): 0.5}

    def test_invalid_grid(self, small_task):
        with pytest.raises(DomainError):
            sample_size_sweep(small_task, [], [5])
        with pytest.raises(DomainError):
            sample_size_sweep(small_task, [SamplerKind.UNIFORM.value], [0, 5])

    @pytest.mark.slow
    def test_more_draws_do_not_hurt_fast_midx(self):
        task = gen_task(256, 16, 512, clusters=16, seed=0)
        points = sample_size_sweep(task, [SamplerKind.MIDX_FAST.value], [5, 100], seeds=range(5), epochs=10)
        medians = sweep_medians(points)
        assert medians[(SamplerKind.MIDX_FAST.value, 100)] <= medians[(SamplerKind.MIDX_FAST.value, 5)]
