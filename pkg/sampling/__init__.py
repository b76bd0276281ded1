# sampling/__init__.py
from .alias import AliasTable, alias_build, alias_draw
from .core import EmbeddingMatrix, MidxError, log_sum_exp, logits, softmax
from .quantization import MultiIndex, QuantizerKind, build_index, distortion, residual_inf_norm
from .samplers import SampleBatch, SamplerKind, SamplerSpec, draw, make_sampler, prepare

__all__ = [
    "AliasTable",
    "EmbeddingMatrix",
    "MidxError",
    "MultiIndex",
    "QuantizerKind",
    "SampleBatch",
    "SamplerKind",
    "SamplerSpec",
    "alias_build",
    "alias_draw",
    "build_index",
    "distortion",
    "draw",
    "log_sum_exp",
    "logits",
    "make_sampler",
    "prepare",
    "residual_inf_norm",
    "softmax",
]
