import math

import numpy as np
import pytest

from sampling.core import (
    DimensionError,
    DomainError,
    EmbeddingMatrix,
    as_query,
    check_probability_vector,
    dot,
    inf_norm,
    log_sum_exp,
    logits,
    softmax,
)


class TestDot:
    def test_small_values(self):
        assert dot([1, 2], [3, 4]) == 11

    def test_zero_vector(self, rng):
        assert dot(rng.standard_normal(5), np.zeros(5)) == 0

    def test_matches_loop(self, rng):
        a, b = rng.standard_normal(16), rng.standard_normal(16)
        expected = 0.0
        for x, y in zip(a, b):
            expected += x * y
        assert dot(a, b) == pytest.approx(expected, rel=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            dot([1, 2], [1, 2, 3])


class TestLogSumExp:
    def test_equal_entries(self):
        assert log_sum_exp([0, 0, 0, 0]) == pytest.approx(math.log(4), abs=1e-12)

    def test_no_overflow(self):
        assert log_sum_exp([1000, 1000]) == pytest.approx(1000 + math.log(2), abs=1e-9)

    def test_matches_naive(self, rng):
        v = rng.uniform(-5, 5, size=8)
        assert log_sum_exp(v) == pytest.approx(math.log(np.exp(v).sum()), abs=1e-12)

    def test_empty(self):
        with pytest.raises(DomainError):
            log_sum_exp([])


class TestSoftmax:
    def test_constant_logits(self):
        np.testing.assert_allclose(softmax(np.full(5, 3.7)), np.full(5, 0.2), atol=1e-15)

    def test_exact_exponentials(self):
        np.testing.assert_allclose(softmax(np.log([1, 2, 3, 4])), [0.1, 0.2, 0.3, 0.4], atol=1e-12)

    def test_matches_naive(self, rng):
        v = rng.uniform(-5, 5, size=10)
        np.testing.assert_allclose(softmax(v), np.exp(v) / np.exp(v).sum(), atol=1e-12)

    def test_large_logits_stay_finite(self):
        p = softmax([1e4, 1e4 - 1, -1e4])
        assert np.all(np.isfinite(p))
        assert p.sum() == pytest.approx(1.0)


class TestInvariants:
    @pytest.mark.parametrize("seed", range(10))
    @pytest.mark.parametrize("c", [-500.0, -1.0, 0.0, 3.7, 500.0])
    def test_softmax_shift_invariant(self, seed, c):
        o = np.random.default_rng(seed).standard_normal(64) * 3
        assert np.max(np.abs(softmax(o + c) - softmax(o))) < 1e-12

    @pytest.mark.parametrize("seed", range(10))
    def test_argmax_preserved(self, seed):
        o = np.random.default_rng(seed).standard_normal(100)
        assert np.argmax(softmax(o)) == np.argmax(o)

    @pytest.mark.parametrize("n", [1, 2, 17, 1000])
    def test_log_sum_exp_bracketed(self, rng, n):
        o = rng.uniform(-20, 20, size=n)
        lse = log_sum_exp(o)
        assert o.max() <= lse <= o.max() + math.log(n) + 1e-12

    def test_log_sum_exp_upper_bound_attained(self):
        assert log_sum_exp(np.full(8, 2.5)) == pytest.approx(2.5 + math.log(8), abs=1e-12)

    def test_logits_near_a_thousand(self, rng):
        o = 1000 + rng.standard_normal(256)
        p = softmax(o)
        assert np.all(np.isfinite(p))
        assert p.sum() == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(p, softmax(o - 1000), atol=1e-12)
        assert log_sum_exp(o) == pytest.approx(1000 + log_sum_exp(o - 1000), abs=1e-9)


class TestEmbeddingMatrix:
    def test_shape_and_dtype(self):
        emb = EmbeddingMatrix(np.ones((3, 2), dtype=np.float32))
        assert (emb.n_classes, emb.dim) == (3, 2)
        assert emb.data.dtype == np.float64

    def test_read_only(self, small_emb):
        with pytest.raises(ValueError):
            small_emb.data[0, 0] = 1.0

    def test_rejects_non_finite(self):
        with pytest.raises(DomainError):
            EmbeddingMatrix([[1.0, np.nan]])

    def test_rejects_empty(self):
        with pytest.raises(DomainError):
            EmbeddingMatrix(np.zeros((0, 4)))

    def test_rejects_vector(self):
        with pytest.raises(DimensionError):
            EmbeddingMatrix([1.0, 2.0])


class TestHelpers:
    def test_logits(self, small_emb, rng):
        z = rng.standard_normal(small_emb.dim)
        np.testing.assert_allclose(logits(small_emb, z), small_emb.data @ z)

    def test_query_dimension(self, small_emb):
        with pytest.raises(DimensionError):
            logits(small_emb, np.ones(small_emb.dim + 1))

    def test_query_non_finite(self):
        with pytest.raises(DomainError):
            as_query([1.0, np.inf], 2)

    def test_inf_norm(self):
        assert inf_norm([1, -3, 2]) == 3
        assert inf_norm([]) == 0

    def test_probability_vector(self):
        check_probability_vector([0.25, 0.75])
        with pytest.raises(DomainError):
            check_probability_vector([0.5, 0.6])
        with pytest.raises(DomainError):
            check_probability_vector([1.5, -0.5])
