"""Trainable orthogonal low-rank projections for compressing a transformer's KV cache."""

from .allocation import RankAllocation
from .model import ModelConfig, TransformerWeights, forward_baseline, forward_projected
from .projections import ProjectionBank, init_bank, load_bank, save_bank

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "ProjectionBank",
    "RankAllocation",
    "TransformerWeights",
    "forward_baseline",
    "forward_projected",
    "init_bank",
    "load_bank",
    "save_bank",
]
