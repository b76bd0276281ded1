# tests/conftest.py

import numpy as np
import pytest

from sampling.core import EmbeddingMatrix
from sampling.quantization import QuantizerKind, build_index


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture
def make_instance():
    """Factory for a random catalog, its index and a query."""

    def _make(n=64, d=8, k=4, kind=QuantizerKind.PRODUCT, seed=0, scale=1.0):
        r = np.random.default_rng(seed)
        emb = EmbeddingMatrix(r.standard_normal((n, d)) * scale / np.sqrt(d))
        index = build_index(emb, k, kind, seed=r)
        z = r.standard_normal(d)
        return emb, index, z

    return _make


@pytest.fixture
def small_emb():
    r = np.random.default_rng(7)
    return EmbeddingMatrix(r.standard_normal((32, 8)))
