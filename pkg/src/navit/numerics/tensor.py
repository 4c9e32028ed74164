"""Dense tensors, the global precision mode, and the gradient tape."""

from __future__ import annotations

import contextlib

import numpy as np

from ..errors import DimensionError

#: Additive mask value applied before a softmax; far below any real logit.
SENTINEL = -1e9

_DTYPES = {"single": np.float32, "double": np.float64}
_precision = "single"
_tape_stack: list[Tape] = []


def set_precision(mode: str) -> None:
    global _precision
    if mode not in _DTYPES:
        raise ValueError(f"unknown precision {mode!r}; expected 'single' or 'double'")
    _precision = mode


def get_precision() -> str:
    return _precision


def default_dtype():
    return _DTYPES[_precision]


@contextlib.contextmanager
def precision(mode: str):
    """Temporarily switch the global precision mode."""
    previous = _precision
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(previous)


def active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


class Tensor:
    """An n-d array of floats that can take part in reverse-mode differentiation.

    ``requires_grad`` marks parameters (leaves) and, by propagation, every
    value computed from them while a :class:`Tape` is recording.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        dtype = dtype or default_dtype()
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.data.dtype})"


def wrap(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` over the leading axes it gained by broadcasting to reach ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def check_leading_broadcast(a_shape, b_shape, op):
    """Only equal shapes or leading-dimension broadcasting (suffix match) are allowed."""
    if a_shape == b_shape:
        return
    short, long = sorted((a_shape, b_shape), key=len)
    if len(short) == 0 or long[len(long) - len(short):] == short:
        return
    raise DimensionError(f"{op}: incompatible shapes {a_shape} and {b_shape}")


class Tape:
    """Ordered record of differentiable operations.

    Used as a context manager; operations executed inside the ``with`` block
    whose inputs depend on a parameter are appended in execution order, so
    replaying the record backwards is a valid topological order.
    """

    def __init__(self):
        self.records = []

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.remove(self)
        return False

    def record(self, out, parents, backward):
        self.records.append((out, parents, backward))

    def backward(self, loss: Tensor, seed=None):
        """Propagate adjoints from ``loss`` and store ``.grad`` on every parameter leaf."""
        grads = {id(loss): np.ones_like(loss.data) if seed is None else np.asarray(seed)}
        leaves = {}
        for out, parents, backward in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(parents, backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                    leaves[key] = parent
        for key, tensor in leaves.items():
            if key in grads:
                g = grads[key]
                tensor.grad = g if tensor.grad is None else tensor.grad + g
        if id(loss) in grads and loss.requires_grad:
            loss.grad = grads[id(loss)]


def make_result(data, parents, backward) -> Tensor:
    """Wrap ``data`` as an op output and record it when a tape is active."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = False
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, backward)
    return out
