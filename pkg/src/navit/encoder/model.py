"""Toy ViT encoder over packed batches: masked attention, QK-norm, masked attention pooling."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ConfigError
from ..numerics import ops
from ..numerics.rng import make_rng
from ..numerics.tensor import Tensor, default_dtype, precision
from ..packing import PAD, build_masks, check_masks
from ..posemb import PosEmbTable, eval_posemb, init_posemb


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 2
    width: int = 32
    heads: int = 2
    mlp_ratio: int = 4
    patch: int = 8
    channels: int = 1
    posemb: str = "fact-frac-sum"
    maxdim: int = 16
    max_examples: int = 8
    num_classes: int = 4
    precision: str = "single"

    def __post_init__(self):
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}", "encoder.heads")
        for name in ("depth", "width", "heads", "mlp_ratio", "patch", "channels", "maxdim",
                     "max_examples"):
            if getattr(self, name) < (0 if name == "depth" else 1):
                raise ConfigError(f"must be positive, got {getattr(self, name)}", f"encoder.{name}")

    @property
    def head_dim(self):
        return self.width // self.heads

    @property
    def patch_features(self):
        return self.patch * self.patch * self.channels

    def to_dict(self):
        return asdict(self)


@dataclass
class EncoderParams:
    """Named learnable tensors of the encoder, its heads and the pooling query."""

    config: EncoderConfig
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def __len__(self):
        return len(self.tensors)

    def names(self):
        return list(self.tensors)

    def posemb_table(self) -> PosEmbTable:
        prefix = "posemb/"
        sub = {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}
        return PosEmbTable(self.config.posemb, self.config.width, self.config.maxdim, sub)

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def count(self):
        return sum(t.size for t in self.tensors.values())


def init_params(config: EncoderConfig, seed=0, text_tower=False) -> EncoderParams:
    """Lecun-normal projections, unit LayerNorm gains, small pooling query.

    ``text_tower`` adds a per-class embedding table used as the text side of
    the contrastive loss.
    """
    rng = make_rng(seed, "init")
    d, f = config.width, config.patch_features
    hidden = config.mlp_ratio * d
    with precision(config.precision):
        tensors = {}

        def dense(name, fan_in, fan_out):
            tensors[name] = Tensor(rng.normal(0, 1 / math.sqrt(fan_in), size=(fan_in, fan_out)),
                                   requires_grad=True, name=name)

        def gain(name, n):
            tensors[name] = Tensor(np.ones(n), requires_grad=True, name=name)

        dense("patch/kernel", f, d)
        for k, v in init_posemb(config.posemb, d, config.maxdim, rng).params.items():
            v.name = f"posemb/{k}"
            tensors[v.name] = v
        for i in range(config.depth):
            p = f"block{i}/"
            gain(p + "ln1", d)
            for proj in ("query", "key", "value", "out"):
                dense(p + proj, d, d)
            gain(p + "query_norm", config.head_dim)
            gain(p + "key_norm", config.head_dim)
            gain(p + "ln2", d)
            dense(p + "mlp_in", d, hidden)
            dense(p + "mlp_out", hidden, d)
        gain("final_ln", d)
        tensors["pool/query"] = Tensor(rng.normal(0, 0.02, size=d), requires_grad=True, name="pool/query")
        dense("pool/key", d, d)
        dense("pool/value", d, d)
        if config.num_classes:
            dense("head/kernel", d, config.num_classes)
        if text_tower:
            tensors["text/table"] = Tensor(rng.normal(0, 1, size=(max(config.num_classes, 1), d)),
                                           requires_grad=True, name="text/table")
    return EncoderParams(config, tensors)


@dataclass
class PooledOutputs:
    """One pooled vector per (sequence, example slot); PAD slots are zero and flagged."""

    vectors: Tensor  # [B, E_max, D]
    real: np.ndarray  # [B, E_max] bool
    logits: Tensor | None = None  # [B, E_max, C]

    def flat(self):
        b, e, d = self.vectors.shape
        return ops.reshape(self.vectors, (b * e, d)), self.real.reshape(-1)


def token_grids(batch):
    """Per-token ``(rows, cols)`` of the owning example; PAD tokens get a 1x1 grid."""
    b, length = batch.owner.shape
    rows = np.ones((b, length), dtype=np.int64)
    cols = np.ones((b, length), dtype=np.int64)
    for s, seq in enumerate(batch.examples):
        for e, ex in enumerate(seq):
            sel = batch.owner[s] == e
            rows[s, sel] = ex.rows
            cols[s, sel] = ex.cols
        # tokens whose pooled slot was dropped still need a grid
        extra = batch.owner[s] >= len(seq)
        for e in np.unique(batch.owner[s][extra]):
            sel = batch.owner[s] == e
            rows[s, sel] = batch.coords[s, sel, 1].max() + 1
            cols[s, sel] = batch.coords[s, sel, 0].max() + 1
    return rows, cols


def _split_heads(x, heads):
    b, length, d = x.shape
    return ops.transpose(ops.reshape(x, (b, length, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x):
    b, h, length, dh = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (b, length, h * dh))


def attention_block(params, prefix, x, attention_mask, config):
    h = ops.layer_norm(x, params[prefix + "ln1"])
    q = _split_heads(ops.matmul(h, params[prefix + "query"]), config.heads)
    k = _split_heads(ops.matmul(h, params[prefix + "key"]), config.heads)
    v = _split_heads(ops.matmul(h, params[prefix + "value"]), config.heads)
    q = ops.layer_norm(q, params[prefix + "query_norm"])
    k = ops.layer_norm(k, params[prefix + "key_norm"])
    scores = ops.scale(ops.matmul(q, ops.swap_last(k)), 1 / math.sqrt(config.head_dim))
    weights = ops.softmax_lastdim(ops.masked_fill(scores, attention_mask[:, None]))
    mixed = _merge_heads(ops.matmul(weights, v))
    return ops.add(x, ops.matmul(mixed, params[prefix + "out"]))


def mlp_block(params, prefix, x):
    h = ops.layer_norm(x, params[prefix + "ln2"])
    h = ops.gelu(ops.matmul(h, params[prefix + "mlp_in"]))
    return ops.add(x, ops.matmul(h, params[prefix + "mlp_out"]))


def masked_attention_pool(params, x, pooling_mask):
    """Shared learned query attending over each example slot's own tokens."""
    b, length, d = x.shape
    keys = ops.matmul(x, params["pool/key"])
    values = ops.matmul(x, params["pool/value"])
    query = ops.reshape(params["pool/query"], (d, 1))
    scores = ops.reshape(ops.scale(ops.matmul(keys, query), 1 / math.sqrt(d)), (b, 1, length))
    scores = ops.broadcast_to(scores, (b, pooling_mask.shape[1], length))
    weights = ops.softmax_lastdim(ops.masked_fill(scores, pooling_mask))
    return ops.matmul(weights, values), weights


def forward_packed(params: EncoderParams, batch, masks=None, return_pool_weights=False):
    """Encode a packed batch into per-slot pooled vectors (and class logits).

    ``masks`` is ``(attention, pooling)`` or ``(attention, pooling, pad_slots)``
    as returned by :func:`navit.packing.build_masks`; they are derived from the
    batch when omitted and cross-checked otherwise.
    """
    config = params.config
    if masks is None:
        attention, pooling, _ = build_masks(batch)
    else:
        attention, pooling = masks[0], masks[1]
        check_masks(batch, attention, pooling)
    if batch.patches is None:
        raise ValueError("batch carries no patch payloads")
    b, length, _ = batch.patches.shape
    dtype = default_dtype()

    x = ops.matmul(Tensor(batch.patches, dtype=dtype), params["patch/kernel"])
    rows, cols = token_grids(batch)
    emb = eval_posemb(params.posemb_table(), batch.coords.reshape(-1, 2), rows.reshape(-1), cols.reshape(-1))
    x = ops.add(x, ops.reshape(emb, (b, length, config.width)))
    for i in range(config.depth):
        x = attention_block(params, f"block{i}/", x, attention, config)
        x = mlp_block(params, f"block{i}/", x)
    x = ops.layer_norm(x, params["final_ln"])
    pooled, weights = masked_attention_pool(params, x, pooling)
    logits = ops.matmul(pooled, params["head/kernel"]) if "head/kernel" in params.tensors else None
    out = PooledOutputs(pooled, batch.slot_real(), logits)
    if return_pool_weights:
        return out, weights
    return out


def real_token_count(batch):
    return int((batch.owner != PAD).sum())
