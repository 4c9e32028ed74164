"""Positional-embedding variants for variable-resolution token grids.

Tag strings name the variant: ``learned1d``, ``learned2d``, ``fact-abs-sum``,
``fact-abs-stack``, ``fact-abs-prod``, ``fourier-abs``, ``sinus-abs``,
``fact-frac-sum``, ``fourier-frac`` and ``sinus-frac``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, RangeError
from .numerics import ops
from .numerics.tensor import Tensor, default_dtype

VARIANTS = (
    "learned1d",
    "learned2d",
    "fact-abs-sum",
    "fact-abs-stack",
    "fact-abs-prod",
    "fourier-abs",
    "sinus-abs",
    "fact-frac-sum",
    "fourier-frac",
    "sinus-frac",
)
FRACTIONAL = ("fact-frac-sum", "fourier-frac", "sinus-frac")
#: Variants backed by a table indexed directly with absolute coordinates.
TABLE_LOOKUP = ("learned2d", "fact-abs-sum", "fact-abs-stack", "fact-abs-prod")
INIT_STD = 0.02


@dataclass
class PosEmbTable:
    variant: str
    width: int
    maxdim: int
    params: dict = field(default_factory=dict)

    @property
    def fractional(self):
        return self.variant in FRACTIONAL


def init_posemb(variant, width, maxdim, rng) -> PosEmbTable:
    """Fresh parameters for ``variant``; learned tables start at Normal(0, 0.02)."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown positional embedding {variant!r}", "posemb")
    need = 4 if variant.startswith("sinus") else 2
    if width % need:
        raise ConfigError(f"{variant} needs width divisible by {need}, got {width}", "posemb")
    if maxdim < 1:
        raise ConfigError("maxdim must be >= 1", "posemb")

    def table(*shape, name):
        return Tensor(rng.normal(0.0, INIT_STD, size=shape), requires_grad=True, name=name)

    params = {}
    if variant == "learned1d":
        params["table"] = table(maxdim * maxdim, width, name="posemb/table")
    elif variant == "learned2d":
        params["table"] = table(maxdim * maxdim, width, name="posemb/table")
    elif variant in ("fact-abs-sum", "fact-abs-prod", "fact-frac-sum"):
        params["x"] = table(maxdim, width, name="posemb/x")
        params["y"] = table(maxdim, width, name="posemb/y")
    elif variant == "fact-abs-stack":
        params["x"] = table(maxdim, width // 2, name="posemb/x")
        params["y"] = table(maxdim, width // 2, name="posemb/y")
    elif variant.startswith("fourier"):
        std = math.pi if variant == "fourier-frac" else math.pi / maxdim
        params["proj"] = Tensor(rng.normal(0.0, std, size=(2, width // 2)), requires_grad=True,
                                name="posemb/proj")
    return PosEmbTable(variant, width, maxdim, params)


def sinusoid_frequencies(width, maxdim):
    """``width // 4`` angular frequencies, geometric from 1 down to 1 / (1e4 * maxdim)."""
    count = width // 4
    if count == 1:
        return np.ones(1)
    return (1e4 * maxdim) ** (-np.arange(count) / (count - 1))


def sinusoid(positions, width, maxdim):
    """Fixed ``[n, width // 2]`` embedding ``concat(sin(w p), cos(w p))`` of one axis."""
    angles = np.asarray(positions, dtype=np.float64)[:, None] * sinusoid_frequencies(width, maxdim)[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def fractional_position(coord, extent, maxdim):
    """Neighbour indices and weights of ``coord / extent`` on a virtual grid of ``maxdim`` entries."""
    pos = np.asarray(coord, dtype=np.float64) / np.asarray(extent, dtype=np.float64) * maxdim
    pos = np.clip(pos, 0, maxdim - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, maxdim - 1)
    t = pos - lo
    return np.stack([lo, hi], axis=-1), np.stack([1 - t, t], axis=-1)


def _resampled_position(coord, extent, maxdim):
    """Half-pixel-centred source position when resizing ``maxdim`` entries to ``extent``."""
    pos = (np.asarray(coord, dtype=np.float64) + 0.5) * maxdim / np.asarray(extent, dtype=np.float64) - 0.5
    pos = np.clip(pos, 0, maxdim - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, maxdim - 1)
    return lo, hi, pos - lo


def _check_range(table, x, y):
    worst = max(int(x.max(initial=0)), int(y.max(initial=0)))
    if worst >= table.maxdim:
        raise RangeError(
            f"{table.variant}: coordinate {worst} outside the table (maxdim={table.maxdim})"
        )


def eval_posemb(table: PosEmbTable, coords, rows, cols) -> Tensor:
    """Embedding rows ``[n, width]`` for tokens at ``coords`` (``(x, y)`` pairs).

    ``rows``/``cols`` give each token's grid size, either one value for all
    tokens or one per token, so tokens of several examples can be evaluated
    together without interacting.
    """
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    x, y = coords[:, 0], coords[:, 1]
    rows = np.broadcast_to(np.asarray(rows, dtype=np.int64), x.shape)
    cols = np.broadcast_to(np.asarray(cols, dtype=np.int64), x.shape)
    v, p, m = table.variant, table.params, table.maxdim
    dtype = default_dtype()

    if v in TABLE_LOOKUP:
        _check_range(table, x, y)
    if v == "learned2d":
        return ops.take(p["table"], y * m + x)
    if v == "learned1d":
        y0, y1, ty = _resampled_position(y, rows, m)
        x0, x1, tx = _resampled_position(x, cols, m)
        index = np.stack([y0 * m + x0, y0 * m + x1, y1 * m + x0, y1 * m + x1], axis=1)
        weights = np.stack([(1 - ty) * (1 - tx), (1 - ty) * tx, ty * (1 - tx), ty * tx], axis=1)
        return ops.weighted_take(p["table"], index, weights)
    if v == "fact-abs-sum":
        return ops.add(ops.take(p["x"], x), ops.take(p["y"], y))
    if v == "fact-abs-stack":
        return ops.concat([ops.take(p["x"], x), ops.take(p["y"], y)], axis=-1)
    if v == "fact-abs-prod":
        return ops.mul(ops.take(p["x"], x), ops.take(p["y"], y))
    if v == "fact-frac-sum":
        ix, wx = fractional_position(x, cols, m)
        iy, wy = fractional_position(y, rows, m)
        return ops.add(ops.weighted_take(p["x"], ix, wx), ops.weighted_take(p["y"], iy, wy))
    if v in ("fourier-abs", "fourier-frac"):
        if v == "fourier-abs":
            inputs = np.stack([x, y], axis=1).astype(np.float64)
        else:
            inputs = np.stack([x / cols, y / rows], axis=1)
        phase = ops.matmul(Tensor(inputs, dtype=dtype), p["proj"])
        return ops.concat([ops.sin(phase), ops.cos(phase)], axis=-1)
    if v == "sinus-abs":
        return Tensor(np.concatenate([sinusoid(x, table.width, m), sinusoid(y, table.width, m)], axis=1),
                      dtype=dtype)
    # sinus-frac: interpolate the fixed absolute embedding at fractional positions
    ix, wx = fractional_position(x, cols, m)
    iy, wy = fractional_position(y, rows, m)
    ex = (sinusoid(ix.reshape(-1), table.width, m).reshape(len(x), 2, -1) * wx[..., None]).sum(1)
    ey = (sinusoid(iy.reshape(-1), table.width, m).reshape(len(y), 2, -1) * wy[..., None]).sum(1)
    return Tensor(np.concatenate([ex, ey], axis=1), dtype=dtype)


def add_posemb(tokens: Tensor, emb: Tensor) -> Tensor:
    if tokens.shape != emb.shape:
        raise DimensionError(f"add_posemb: tokens {tokens.shape} vs embeddings {emb.shape}")
    return ops.add(tokens, emb)
