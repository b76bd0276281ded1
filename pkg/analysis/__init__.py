# analysis/__init__.py
from .codebook_learning import SoftCodebooks, codebook_grad, codebook_step
from .diagnostics import DivergenceReport, divergence_report, grad_bias_mc, kl_divergence
from .toy_trainer import SweepPoint, ToyTask, TrainReport, gen_task, sample_size_sweep, train

__all__ = [
    "DivergenceReport",
    "SoftCodebooks",
    "SweepPoint",
    "ToyTask",
    "TrainReport",
    "codebook_grad",
    "codebook_step",
    "divergence_report",
    "gen_task",
    "grad_bias_mc",
    "kl_divergence",
    "sample_size_sweep",
    "train",
]
