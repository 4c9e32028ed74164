"""Toy ViT encoder operating on packed batches."""

from .checkpoint import load_checkpoint, read_tensors, save_checkpoint, write_tensors
from .losses import contrastive_loss_chunked, contrastive_loss_naive, sigmoid_xent
from .model import (
    EncoderConfig,
    EncoderParams,
    PooledOutputs,
    forward_packed,
    init_params,
)
from .train import LOSS_KINDS, AdamW, Schedule, compute_loss, train_step

__all__ = [
    "LOSS_KINDS",
    "AdamW",
    "EncoderConfig",
    "EncoderParams",
    "PooledOutputs",
    "Schedule",
    "compute_loss",
    "contrastive_loss_chunked",
    "contrastive_loss_naive",
    "forward_packed",
    "init_params",
    "load_checkpoint",
    "read_tensors",
    "save_checkpoint",
    "sigmoid_xent",
    "train_step",
    "write_tensors",
]
