"""Dense tensors with reverse-mode differentiation, precision modes and seeded RNG."""

from . import ops
from .gradcheck import analytic_gradients, grad_check, numeric_gradient
from .ops import (
    gelu,
    layer_norm,
    logsumexp_lastdim,
    masked_fill,
    matmul,
    softmax_lastdim,
)
from .rng import make_rng, substream
from .tensor import (
    SENTINEL,
    Tape,
    Tensor,
    default_dtype,
    get_precision,
    precision,
    set_precision,
)

__all__ = [
    "SENTINEL",
    "Tape",
    "Tensor",
    "analytic_gradients",
    "default_dtype",
    "gelu",
    "get_precision",
    "grad_check",
    "layer_norm",
    "logsumexp_lastdim",
    "make_rng",
    "masked_fill",
    "matmul",
    "numeric_gradient",
    "ops",
    "precision",
    "set_precision",
    "softmax_lastdim",
    "substream",
]
