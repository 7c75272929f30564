"""Small numpy neural engine: dense layers, query-key attention, reverse-mode gradients."""

from . import ops
from .checkpoint import architecture_hash, load_checkpoint, save_checkpoint
from .layers import AttentionHeads, DenseLayer, attention_contribution, attention_scores, dense_forward
from .optim import Adam, clip_by_global_norm, sgd_step
from .tensor import Tape, Tensor, backward, parameter

__all__ = [
    "Adam",
    "AttentionHeads",
    "DenseLayer",
    "Tape",
    "Tensor",
    "architecture_hash",
    "attention_contribution",
    "backward",
    "attention_scores",
    "clip_by_global_norm",
    "dense_forward",
    "load_checkpoint",
    "ops",
    "parameter",
    "save_checkpoint",
    "sgd_step",
]
