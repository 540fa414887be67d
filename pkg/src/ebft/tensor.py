"""Dense float64 tensors with tape-based reverse-mode autodiff.

Design notes:

* All data lives in 64-bit numpy arrays; gradients are plain numpy arrays
  stored in ``Tensor.grad``.
* Operations are module-level functions. While a ``Tape`` is active (as a
  context manager) every primitive whose inputs require grad appends an op
  record; ``backward(loss, tape)`` replays the records in exact reverse
  order. With no active tape the same functions are plain numpy math, which
  is what evaluation passes use.
* One forward/backward per tape. A tape cannot be replayed twice; rebuild
  the graph for every training step.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_tls = threading.local()


def _active_tape() -> Optional["Tape"]:
    return getattr(_tls, "tape", None)


class Tensor:
    """A float64 n-d array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class _OpRecord:
    __slots__ = ("inputs", "out", "backward_fn")

    def __init__(self, inputs, out, backward_fn):
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive ops; replayed once, in reverse, by backward()."""

    def __init__(self):
        self.ops: list[_OpRecord] = []
        self.consumed = False
        self._prev = None

    def __enter__(self):
        self._prev = _active_tape()
        _tls.tape = self
        return self

    def __exit__(self, *exc):
        _tls.tape = self._prev
        return False


def _record(inputs: Sequence[Tensor], out_data: np.ndarray,
            backward_fn: Callable) -> Tensor:
    """Wrap an op result, recording it on the active tape when grads flow."""
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = False
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.ops.append(_OpRecord(tuple(inputs), out, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate .grad on every requires_grad tensor reachable from loss.

    Participating requires_grad tensors that loss does not reach get a zero
    gradient. The tape is consumed; a second call raises ContractError.
    """
    if tape.consumed:
        raise ContractError("tape already consumed; re-run the forward pass")
    tape.consumed = True
    if not tape.ops:
        return
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(op.out) for op in tape.ops}
    if id(loss) not in produced:
        raise ContractError("loss was not produced under this tape")

    participants: list[Tensor] = []
    seen: set[int] = set()
    for op in tape.ops:
        for t in op.inputs + (op.out,):
            if t.requires_grad and id(t) not in seen:
                t.grad = None
                seen.add(id(t))
                participants.append(t)

    loss.grad = np.ones_like(loss.data)
    for op in reversed(tape.ops):
        a_out = op.out.grad
        if a_out is None:  # op not reachable from the loss
            continue
        needs = tuple(t.requires_grad for t in op.inputs)
        grads = op.backward_fn(a_out, needs)
        for t, g in zip(op.inputs, grads):
            if g is None:
                continue
            if t.grad is None:
                # adopt fresh arrays; copy views or the adjoint itself so an
                # in-place accumulation later cannot corrupt another buffer
                t.grad = g.copy() if (g is a_out or g.base is not None) else g
            else:
                t.grad += g
    for t in participants:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError("matmul needs >=2-d operands", a.shape, b.shape)
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul inner dimensions differ", a.shape, b.shape)
    try:
        out = a.data @ b.data
    except ValueError:
        raise DimensionError("matmul batch dims not broadcastable", a.shape, b.shape)

    def back(a_out, needs):
        ga = _unbroadcast(a_out @ _swap_last(b.data), a.shape) if needs[0] else None
        gb = _unbroadcast(_swap_last(a.data) @ a_out, b.shape) if needs[1] else None
        return ga, gb

    return _record((a, b), out, back)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError("add shapes not broadcastable", a.shape, b.shape)

    def back(a_out, needs):
        ga = _unbroadcast(a_out, a.shape) if needs[0] else None
        gb = _unbroadcast(a_out, b.shape) if needs[1] else None
        return ga, gb

    return _record((a, b), out, back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data - b.data
    except ValueError:
        raise DimensionError("sub shapes not broadcastable", a.shape, b.shape)

    def back(a_out, needs):
        ga = _unbroadcast(a_out, a.shape) if needs[0] else None
        gb = _unbroadcast(-a_out, b.shape) if needs[1] else None
        return ga, gb

    return _record((a, b), out, back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError("mul shapes not broadcastable", a.shape, b.shape)

    def back(a_out, needs):
        ga = _unbroadcast(a_out * b.data, a.shape) if needs[0] else None
        gb = _unbroadcast(a_out * a.data, b.shape) if needs[1] else None
        return ga, gb

    return _record((a, b), out, back)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = x.data * c

    def back(a_out, needs):
        return (a_out * c,) if needs[0] else (None,)

    return _record((x,), out, back)


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig

    def back(a_out, needs):
        if not needs[0]:
            return (None,)
        return (a_out * sig * (1.0 + x.data * (1.0 - sig)),)

    return _record((x,), out, back)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise DimensionError(f"transpose axes {axes} invalid for", x.shape)
    out = np.transpose(x.data, axes)
    inv = tuple(int(i) for i in np.argsort(axes))

    def back(a_out, needs):
        return (np.transpose(a_out, inv),) if needs[0] else (None,)

    return _record((x,), out, back)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape to {shape}", x.shape)
    old = x.shape

    def back(a_out, needs):
        return (a_out.reshape(old),) if needs[0] else (None,)

    return _record((x,), out, back)


def slice_(x: Tensor, key) -> Tensor:
    """Basic slicing only; `key` is a slice or tuple of slices/ints."""
    out = np.ascontiguousarray(x.data[key])

    def back(a_out, needs):
        if not needs[0]:
            return (None,)
        g = np.zeros_like(x.data)
        g[key] = a_out
        return (g,)

    return _record((x,), out, back)


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    try:
        out = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError:
        raise DimensionError("concat shapes incompatible", *[t.shape for t in xs])
    sizes = [t.shape[axis] for t in xs]
    offsets = np.cumsum(sizes)[:-1]

    def back(a_out, needs):
        pieces = np.split(a_out, offsets, axis=axis)
        return tuple(p if need else None for p, need in zip(pieces, needs))

    return _record(tuple(xs), out, back)


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    out = np.mean(x.data, axis=axis)
    n = x.data.size if axis is None else x.shape[axis]

    def back(a_out, needs):
        if not needs[0]:
            return (None,)
        if axis is None:
            return (np.full_like(x.data, float(a_out) / n),)
        return (np.broadcast_to(np.expand_dims(a_out, axis), x.shape) / n,)

    return _record((x,), out, back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError("layer_norm parameter dim mismatch", x.shape, gamma.shape, beta.shape)
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be positive, got {eps}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    out = xhat * gamma.data + beta.data

    def back(a_out, needs):
        dxhat = a_out * gamma.data
        gx = None
        if needs[0]:
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            gx = (dxhat - m1 - xhat * m2) * inv_std
        reduce_axes = tuple(range(a_out.ndim - 1))
        gg = (a_out * xhat).sum(axis=reduce_axes) if needs[1] else None
        gb = a_out.sum(axis=reduce_axes) if needs[2] else None
        return gx, gg, gb

    return _record((x, gamma, beta), out, back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for", x.shape)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def back(a_out, needs):
        if not needs[0]:
            return (None,)
        inner = np.sum(a_out * out, axis=axis, keepdims=True)
        return (out * (a_out - inner),)

    return _record((x,), out, back)


def reconstruction_loss(target: Tensor, pred: Tensor) -> Tensor:
    """Mean squared element difference; the block fine-tuning objective."""
    if target.shape != pred.shape:
        raise DimensionError("reconstruction_loss shape mismatch", target.shape, pred.shape)
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray((diff * diff).sum() / n)

    def back(a_out, needs):
        base = (2.0 / n) * float(a_out) * diff
        gt = -base if needs[0] else None
        gp = base if needs[1] else None
        return gt, gp

    return _record((target, pred), out, back)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup; `ids` is a plain integer array, not a Tensor."""
    ids = np.asarray(ids)
    out = table.data[ids]

    def back(a_out, needs):
        if not needs[0]:
            return (None,)
        g = np.zeros_like(table.data)
        np.add.at(g, ids.ravel(), a_out.reshape(-1, table.shape[-1]))
        return (g,)

    return _record((table,), out, back)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean next-token NLL over all positions, computed via log-sum-exp."""
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise DimensionError("cross_entropy target shape mismatch", logits.shape, targets.shape)
    m = np.max(logits.data, axis=-1, keepdims=True)
    e = np.exp(logits.data - m)
    z = e.sum(axis=-1, keepdims=True)
    lse = (m + np.log(z)).squeeze(-1)
    picked = np.take_along_axis(logits.data, targets[..., None], axis=-1).squeeze(-1)
    n = targets.size
    out = np.asarray((lse - picked).sum() / n)

    def back(a_out, needs):
        if not needs[0]:
            return (None,)
        p = e / z
        flat = p.reshape(-1, p.shape[-1])
        flat[np.arange(n), targets.ravel()] -= 1.0
        return (float(a_out) / n * p,)

    return _record((logits,), out, back)
