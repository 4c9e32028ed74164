"""Example-level losses over pooled outputs; PAD rows never contribute."""

from __future__ import annotations

import numpy as np

from ..errors import DegenerateBatchError, DimensionError
from ..numerics import ops
from ..numerics.tensor import Tensor


def _real_rows(x, real):
    """Select the rows of ``x`` flagged real; ``x`` may be pooled outputs or a 2-D tensor."""
    if hasattr(x, "flat"):
        rows, flags = x.flat()
        real = flags if real is None else np.asarray(real, dtype=bool).reshape(-1)
    else:
        rows = x
        if rows.ndim != 2:
            rows = ops.reshape(rows, (-1, rows.shape[-1]))
        real = np.ones(rows.shape[0], dtype=bool) if real is None else np.asarray(real, dtype=bool).reshape(-1)
    if len(real) != rows.shape[0]:
        raise DimensionError(f"{len(real)} flags for {rows.shape[0]} rows")
    index = np.flatnonzero(real)
    return ops.take(rows, index), index


def sigmoid_xent(logits, labels, real=None) -> Tensor:
    """Mean over real examples of the per-class sigmoid cross-entropy, summed over classes.

    ``labels`` holds integer class ids (one per row of ``logits``) or a
    multi-hot target array of the same shape as ``logits``.
    """
    if hasattr(logits, "logits"):
        real = logits.real if real is None else real
        logits = logits.logits
    z = logits if logits.ndim == 2 else ops.reshape(logits, (-1, logits.shape[-1]))
    n, classes = z.shape
    labels = np.asarray(labels)
    if labels.shape == tuple(logits.shape):
        targets = labels.reshape(n, classes).astype(np.float64)
    else:
        labels = labels.reshape(-1)
        if len(labels) != n:
            raise DimensionError(f"{len(labels)} labels for {n} logit rows")
        targets = np.zeros((n, classes))
        targets[np.arange(n), labels] = 1.0
    real = np.ones(n, dtype=bool) if real is None else np.asarray(real, dtype=bool).reshape(-1)
    index = np.flatnonzero(real)
    if len(index) == 0:
        raise DegenerateBatchError("sigmoid_xent over a batch with no real examples")
    z = ops.take(z, index)
    y = Tensor(targets[index], dtype=z.data.dtype)
    per_class = ops.sub(ops.softplus(z), ops.mul(z, y))
    return ops.scale(ops.sum(per_class), 1.0 / len(index))


def _paired(img, txt, img_real, txt_real):
    a, _ = _real_rows(img, img_real)
    b, _ = _real_rows(txt, txt_real)
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"{a.shape[0]} real image rows vs {b.shape[0]} real text rows")
    if a.shape[0] < 2:
        raise DegenerateBatchError("contrastive loss needs at least 2 real pairs")
    return ops.l2_normalize(a), ops.l2_normalize(b)


def _symmetric(row_lse, col_lse, diag, n):
    total = ops.add(ops.sum(ops.sub(row_lse, diag)), ops.sum(ops.sub(col_lse, diag)))
    return ops.scale(total, 0.5 / n)


def contrastive_loss_naive(img, txt, temperature=1.0, img_real=None, txt_real=None) -> Tensor:
    """Symmetric InfoNCE over cosine similarities divided by ``temperature``."""
    a, b = _paired(img, txt, img_real, txt_real)
    n = a.shape[0]
    inv_t = 1.0 / temperature
    logits = ops.scale(ops.matmul(a, ops.swap_last(b)), inv_t)
    diag = ops.scale(ops.sum(ops.mul(a, b), axis=-1), inv_t)
    row_lse = ops.logsumexp_lastdim(logits)
    col_lse = ops.logsumexp_lastdim(ops.swap_last(logits))
    return _symmetric(row_lse, col_lse, diag, n)


def _streamed_lse(blocks):
    """Log-sum-exp over the last axis of horizontally concatenated ``blocks``.

    Keeps a running row maximum (a constant shift) and a rescaled running sum
    of exponentials, so only one block is alive at a time.
    """
    running_max, running_sum = None, None
    for block in blocks:
        block_max = block.data.max(axis=-1, keepdims=True)
        if running_max is None:
            new_max = block_max
        else:
            new_max = np.maximum(running_max, block_max)
        shift = Tensor(np.broadcast_to(new_max, block.shape), dtype=block.data.dtype)
        partial = ops.sum(ops.exp(ops.sub(block, shift)), axis=-1)
        if running_sum is None:
            running_sum = partial
        else:
            rescale = Tensor(np.exp(running_max - new_max)[..., 0], dtype=block.data.dtype)
            running_sum = ops.add(ops.mul(running_sum, rescale), partial)
        running_max = new_max
    return ops.add(ops.log(running_sum), Tensor(running_max[..., 0], dtype=running_sum.data.dtype))


def contrastive_loss_chunked(img, txt, temperature=1.0, chunk=16, img_real=None, txt_real=None) -> Tensor:
    """Same value as :func:`contrastive_loss_naive`, computed over ``n x chunk`` similarity blocks."""
    a, b = _paired(img, txt, img_real, txt_real)
    n = a.shape[0]
    if not 1 <= chunk <= n:
        raise ValueError(f"chunk must be in [1, {n}], got {chunk}")
    inv_t = 1.0 / temperature
    starts = range(0, n, chunk)

    def column_blocks():
        # image-to-text: rows of a against a chunk of text rows
        for s in starts:
            yield ops.scale(ops.matmul(a, ops.swap_last(ops.take(b, np.arange(s, min(s + chunk, n))))), inv_t)

    def row_blocks():
        # text-to-image: the transposed block of a chunk of image rows
        for s in starts:
            block = ops.scale(ops.matmul(ops.take(a, np.arange(s, min(s + chunk, n))), ops.swap_last(b)), inv_t)
            yield ops.swap_last(block)

    diag = ops.scale(ops.sum(ops.mul(a, b), axis=-1), inv_t)
    return _symmetric(_streamed_lse(column_blocks()), _streamed_lse(row_blocks()), diag, n)
