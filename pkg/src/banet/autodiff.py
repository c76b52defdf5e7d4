"""Reverse-mode automatic differentiation over dense 5-D arrays.

Everything flowing through the network is a `Tensor` wrapping a numpy array
of shape (N, C, D, H, W).  Gradients are computed define-by-run: while a
`Tape` is active, differentiable ops append (name, output, backward_fn)
nodes in execution order; `backward` walks that list in reverse, which is a
valid topological order because every op's inputs were recorded before the
op itself.

Tensors default to float32.  Passing float64 data keeps float64, which is
how the finite-difference checks run the whole stack in "shadow" precision.
Gradient accumulation is by summation, so fan-out (one tensor consumed by
several ops) needs no special casing.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .errors import NumericalError

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A 5-D array plus an optional gradient of the same shape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if arr.ndim != 5:
            raise ValueError(f"Tensor data must be 5-D (N, C, D, H, W), got shape {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def scalar_tensor(value: float, dtype=np.float32) -> Tensor:
    """A (1,1,1,1,1) tensor holding one value."""
    return Tensor(np.full((1, 1, 1, 1, 1), value, dtype=dtype))


class Tape:
    """Ordered record of one forward pass.

    Use as a context manager around the forward + loss computation:

        with Tape() as tape:
            loss = ...
            backward(loss)

    A tape can drive backward() once; reset() clears it for reuse.
    """

    def __init__(self):
        self.nodes: list[tuple[str, Tensor, Callable[[np.ndarray], None]]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack.pop()
        assert popped is self, "tape stack corrupted (unbalanced enter/exit)"

    def record(self, name: str, out: Tensor, backward_fn: Callable[[np.ndarray], None]) -> None:
        self.nodes.append((name, out, backward_fn))

    def reset(self) -> None:
        self.nodes.clear()
        self.consumed = False

    def first_nonfinite_op(self) -> Optional[str]:
        """Name of the earliest recorded op whose output holds a non-finite value."""
        for name, out, _ in self.nodes:
            if not np.all(np.isfinite(out.data)):
                return name
        return None


_tape_stack: list[Tape] = []


def active_tape() -> Optional[Tape]:
    return _tape_stack[-1] if _tape_stack else None


def record_op(name: str, out: Tensor, inputs: tuple[Tensor, ...],
              backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    """Mark `out` as produced from `inputs`; register on the active tape.

    With no active tape (or no differentiable inputs) this is a no-op, so
    pure inference pays nothing for the machinery.
    """
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(name, out, backward_fn)
    return out


def accumulate_grad(t: Tensor, g: np.ndarray, owned: bool = False) -> None:
    """Add `g` into t.grad (allocating on first touch).

    owned=True promises `g` is a freshly computed array nothing else aliases,
    letting the first accumulation adopt it without a defensive copy.
    """
    if not t.requires_grad:
        return
    if t.grad is None:
        if owned and g.dtype == t.data.dtype:
            t.grad = g
        else:
            # Copy: `g` may alias the upstream gradient buffer or another
            # input's gradient.
            t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def backward(loss: Tensor) -> None:
    """Populate .grad on every tensor the scalar `loss` depends on.

    Walks the active tape in reverse execution order, which is a reverse
    topological order of the recorded graph.  Nodes whose output never
    received a gradient are skipped (they did not feed the loss).
    """
    tape = active_tape()
    if tape is None:
        raise RuntimeError("backward() needs an active Tape")
    if tape.consumed:
        raise RuntimeError("this Tape was already consumed; call reset() before reuse")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor with requires_grad=True")
    if loss.data.size != 1:
        raise ValueError(f"backward() expects a scalar loss, got shape {loss.shape}")
    tape.consumed = True
    loss.grad = np.ones_like(loss.data)
    for name, out, backward_fn in reversed(tape.nodes):
        if out.grad is None:
            continue
        backward_fn(out.grad)


# ---------------------------------------------------------------------------
# Elementwise / structural primitives.  Convolutions and the rest of the
# network-level ops live in ops.py; these are the small building blocks the
# loss assembly and attention arithmetic need.
# ---------------------------------------------------------------------------


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    n, _, d, h, w = a.shape
    if b.shape == (n, 1, d, h, w):
        return
    raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape} "
                     "(second operand may broadcast over channels only)")


def _reduce_to(shape: tuple[int, ...], g: np.ndarray) -> np.ndarray:
    """Sum `g` down to `shape` (only channel-axis broadcasting happens here)."""
    if g.shape == shape:
        return g
    return np.sum(g, axis=1, keepdims=True)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = Tensor(a.data + b.data)

    def bw(g: np.ndarray) -> None:
        accumulate_grad(a, g)
        gb = _reduce_to(b.shape, g)
        accumulate_grad(b, gb, owned=gb is not g)

    return record_op("add", out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = Tensor(a.data * b.data)

    def bw(g: np.ndarray) -> None:
        accumulate_grad(a, g * b.data, owned=True)
        accumulate_grad(b, _reduce_to(b.shape, g * a.data), owned=True)

    return record_op("mul", out, (a, b), bw)


def scalar_add(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data + a.dtype.type(c))

    def bw(g: np.ndarray) -> None:
        accumulate_grad(a, g)

    return record_op("scalar_add", out, (a,), bw)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    out = Tensor(a.data * c)

    def bw(g: np.ndarray) -> None:
        accumulate_grad(a, g * c, owned=True)

    return record_op("scalar_mul", out, (a,), bw)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat_channels: incompatible shapes {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = Tensor(np.concatenate([a.data, b.data], axis=1))

    def bw(g: np.ndarray) -> None:
        accumulate_grad(a, g[:, :ca])
        accumulate_grad(b, g[:, ca:])

    return record_op("concat_channels", out, (a, b), bw)


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= a.shape[1]):
        raise ValueError(f"slice_channels: [{start}:{stop}] out of range for C={a.shape[1]}")
    out = Tensor(np.ascontiguousarray(a.data[:, start:stop]))

    def bw(g: np.ndarray) -> None:
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        accumulate_grad(a, full, owned=True)

    return record_op("slice_channels", out, (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    total = np.sum(a.data, dtype=np.float64)
    out = Tensor(np.full((1, 1, 1, 1, 1), total, dtype=a.dtype))

    def bw(g: np.ndarray) -> None:
        accumulate_grad(a, np.full_like(a.data, g.reshape(())), owned=True)

    return record_op("sum_all", out, (a,), bw)


def check_finite(t: Tensor, context: str) -> None:
    """Raise NumericalError if `t` holds NaN or Inf."""
    if not np.all(np.isfinite(t.data)):
        raise NumericalError(f"non-finite values in {context}")
