"""Adam-style optimizer with decoupled weight decay, learning-rate schedules, train step."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..cost import encoder_flops
from ..errors import ConfigError, NonFiniteLossError
from ..numerics import ops
from ..numerics.tensor import Tape
from .losses import contrastive_loss_chunked, contrastive_loss_naive, sigmoid_xent
from .model import forward_packed, real_token_count

LOSS_KINDS = ("sigmoid", "contrastive")


@dataclass(frozen=True)
class Schedule:
    """Constant, or reciprocal square root with linear warmup and linear cooldown."""

    kind: str = "constant"
    base_lr: float = 1e-3
    warmup: int = 0
    cooldown: int = 0
    total: int = 0

    def __post_init__(self):
        if self.kind not in ("constant", "rsqrt"):
            raise ConfigError(f"unknown schedule {self.kind!r}", "train.schedule")

    def __call__(self, step):
        lr = self.base_lr
        if self.kind == "rsqrt":
            lr *= 1 / math.sqrt(max(step + 1, self.warmup, 1) / max(self.warmup, 1))
        if self.warmup and step < self.warmup:
            lr *= (step + 1) / self.warmup
        if self.cooldown and self.total and step >= self.total - self.cooldown:
            lr *= max(0.0, (self.total - step) / self.cooldown)
        return lr


@dataclass
class AdamW:
    schedule: Schedule = field(default_factory=Schedule)
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def update(self, params):
        lr = self.schedule(self.step)
        self.step += 1
        c1 = 1 - self.b1**self.step
        c2 = 1 - self.b2**self.step
        for name, p in params.tensors.items():
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype)
            m = self.m.get(name, np.zeros_like(p.data))
            v = self.v.get(name, np.zeros_like(p.data))
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * g * g
            self.m[name], self.v[name] = m.astype(p.data.dtype), v.astype(p.data.dtype)
            if lr == 0:
                continue
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.data.dtype)
        return lr


def compute_loss(params, batch, loss="sigmoid", temperature=0.1, chunk=None):
    out = forward_packed(params, batch)
    if loss == "sigmoid":
        return sigmoid_xent(out.logits, batch.slot_labels(), out.real), out
    if loss == "contrastive":
        labels = batch.slot_labels()[out.real]
        txt = ops.take(params["text/table"], labels)
        img_rows = out.flat()[0]
        if chunk:
            value = contrastive_loss_chunked(img_rows, txt, temperature, chunk, img_real=out.real)
        else:
            value = contrastive_loss_naive(img_rows, txt, temperature, img_real=out.real)
        return value, out
    raise ConfigError(f"unknown loss {loss!r}", "train.loss")


def train_step(params, batch, loss, optimizer: AdamW, **loss_kwargs):
    """One gradient step; returns ``(params, metrics)``.

    Raises :class:`NonFiniteLossError` (parameters untouched) when the loss or
    a gradient is not finite.
    """
    params.zero_grad()
    with Tape() as tape:
        value, out = compute_loss(params, batch, loss, **loss_kwargs)
        loss_value = float(value.data)
        if not math.isfinite(loss_value):
            raise NonFiniteLossError(f"loss is {loss_value} at step {optimizer.step}")
        tape.backward(value)
    bad = [n for n, p in params.tensors.items() if p.grad is not None and not np.isfinite(p.grad).all()]
    if bad:
        raise NonFiniteLossError(f"non-finite gradients at step {optimizer.step} in {bad}")
    lr = optimizer.update(params)
    config = params.config
    metrics = {
        "loss": loss_value,
        "lr": lr,
        "images": int(out.real.sum()),
        "tokens": real_token_count(batch),
        "flops": encoder_flops(batch.seq_len, config.width, config.depth, batch.num_sequences, train=True),
    }
    return params, metrics
