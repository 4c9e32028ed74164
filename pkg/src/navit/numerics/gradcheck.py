"""Finite-difference verification of tape gradients."""

import numpy as np

from ..errors import EvaluationError
from .tensor import Tape, get_precision


def _value(f) -> float:
    out = f()
    value = float(out.data) if hasattr(out, "data") else float(out)
    if not np.isfinite(value):
        raise EvaluationError(f"function under check returned {value}")
    return value


def numeric_gradient(f, param, eps=1e-3, entries=None) -> np.ndarray:
    """Fourth-order central differences of ``f`` with respect to every entry of ``param``.

    Uses the stencil ``(8[f(x+h) - f(x-h)] - [f(x+2h) - f(x-2h)]) / 12h``; its
    truncation error is O(h^4), which allows a step large enough to keep
    cancellation error near 1e-13 in double precision.
    """
    flat = param.data.reshape(-1)
    if not np.shares_memory(flat, param.data):
        raise ValueError("parameter data must be contiguous")
    grad = np.full(flat.size, np.nan)
    for i in range(flat.size) if entries is None else entries:
        orig = flat[i]
        samples = []
        for step in (2, 1, -1, -2):
            flat[i] = orig + step * eps
            samples.append(_value(f))
        flat[i] = orig
        grad[i] = (8 * (samples[1] - samples[2]) - (samples[0] - samples[3])) / (12 * eps)
    return grad.reshape(param.shape)


def analytic_gradients(f, params):
    for p in params:
        p.grad = None
    with Tape() as tape:
        out = f()
        if not np.isfinite(out.data).all():
            raise EvaluationError(f"function under check returned {out.data}")
        tape.backward(out)
    return [np.zeros(p.shape) if p.grad is None else np.array(p.grad, dtype=np.float64)
            for p in params]


def grad_check(f, params, eps=1e-3, max_entries=None, seed=0) -> float:
    """Worst relative error between tape and finite-difference gradients.

    ``f`` takes no arguments and returns a scalar Tensor computed from
    ``params``; it must be deterministic. The relative error of each entry is
    ``|a - n| / max(|a|, |n|, 1e-8)``. With ``max_entries`` set, tensors larger
    than that are checked on a seeded random subset of their entries.
    """
    if get_precision() != "double":
        raise RuntimeError("grad_check requires double precision mode")
    worst = 0.0
    pick = np.random.default_rng(seed)
    for p, analytic in zip(params, analytic_gradients(f, params)):
        entries = None
        if max_entries is not None and p.size > max_entries:
            entries = np.sort(pick.choice(p.size, size=max_entries, replace=False))
        numeric = numeric_gradient(f, p, eps, entries).reshape(-1)
        analytic = analytic.reshape(-1)
        if entries is not None:
            numeric, analytic = numeric[entries], analytic[entries]
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        if analytic.size:
            worst = max(worst, float((np.abs(analytic - numeric) / denom).max()))
    return worst
