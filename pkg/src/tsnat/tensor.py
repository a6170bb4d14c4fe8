"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded only while a :class:`Tape` is active (``with Tape()
as tape:``) and at least one input requires a gradient.  Outside a tape every
op is a plain numpy computation, which is what inference uses.

Gradients accumulate: calling :func:`backward` twice without
:meth:`Tensor.zero_grad` adds the second gradient to the first.  The joint
AR/NAR loss relies on this when both decoder passes feed one scalar.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "EmptyLossError",
    "Tape",
    "Tensor",
    "active_tape",
    "add",
    "backward",
    "cross_entropy",
    "dropout",
    "embedding",
    "frame_unfold",
    "glu",
    "layer_norm",
    "log_softmax_lastdim",
    "masked_fill",
    "matmul",
    "mean",
    "mul",
    "relu",
    "reshape",
    "scale",
    "sigmoid",
    "softmax_lastdim",
    "sub",
    "sum_all",
    "transpose",
]

_node_ids = itertools.count()
_state = threading.local()


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class EmptyLossError(ValueError):
    """Raised when every target position is ignored."""


class Tensor:
    """An n-dimensional float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "_grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._grad: Optional[np.ndarray] = None
        self.node_id = next(_node_ids)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def grad(self) -> Optional[np.ndarray]:
        if not self.requires_grad:
            return None
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    def zero_grad(self) -> None:
        if self.requires_grad:
            self._grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("kind", "inputs", "output", "backward")

    def __init__(self, kind: str, inputs: tuple, output: Tensor, backward: Callable):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward = backward

    @property
    def input_ids(self) -> tuple:
        return tuple(t.node_id for t in self.inputs)


class Tape:
    """Ordered log of differentiable operations for one forward pass."""

    def __init__(self):
        self.records: list[_Record] = []
        self._outputs: set[int] = set()

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, kind: str, inputs: tuple, output: Tensor, fn: Callable) -> None:
        self.records.append(_Record(kind, inputs, output, fn))
        self._outputs.add(output.node_id)

    def owns(self, t: Tensor) -> bool:
        return t.node_id in self._outputs

    def leaves(self) -> list[Tensor]:
        """Grad-requiring inputs that were not produced on this tape."""
        seen: dict[int, Tensor] = {}
        for rec in self.records:
            for t in rec.inputs:
                if t.requires_grad and t.node_id not in self._outputs:
                    seen.setdefault(t.node_id, t)
        return list(seen.values())


def active_tape() -> Optional[Tape]:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def _emit(kind: str, data: np.ndarray, inputs: tuple, fn: Callable) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor(data, requires_grad=True)
        tape.record(kind, inputs, out, fn)
        return out
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor."""
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.owns(loss):
        raise ValueError("loss was not produced on this tape")
    pending: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = pending.pop(rec.output.node_id, None)
        if g is None:
            continue
        out = rec.output
        out._grad = g if out._grad is None else out._grad + g
        for t, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if tape.owns(t):
                prev = pending.get(t.node_id)
                pending[t.node_id] = gi if prev is None else prev + gi
            else:
                if t._grad is None:
                    t._grad = np.array(gi, dtype=np.float64, copy=True)
                else:
                    t._grad += gi


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape

    def fn(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _emit("add", a.data + b.data, (a, b), fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape

    def fn(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _emit("sub", a.data - b.data, (a, b), fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data

    def fn(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _emit("mul", ad * bd, (a, b), fn)


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return _emit("mean", np.asarray(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, shape),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    orig = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes, numpy broadcasting."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {ad.shape} x {bd.shape}")
    try:
        out = ad @ bd
    except ValueError as err:
        raise DimensionError(f"matmul batch dims not broadcastable: {ad.shape} x {bd.shape}") from err

    def fn(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _emit("matmul", out, (a, b), fn)


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    return _emit("relu", np.where(keep, a.data, 0.0), (a,), lambda g: (g * keep,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _emit("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def glu(x: Tensor) -> Tensor:
    """Gated linear unit: first half of the last axis times sigmoid(second half)."""
    d2 = x.shape[-1]
    if d2 % 2:
        raise DimensionError(f"glu needs an even last dimension, got {x.shape}")
    d = d2 // 2
    lin, gate = x.data[..., :d], x.data[..., d:]
    s = _sigmoid(gate)

    def fn(g):
        return (np.concatenate([g * s, g * lin * s * (1.0 - s)], axis=-1),)

    return _emit("glu", lin * s, (x,), fn)


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.shape[-1] < 1:
        raise DimensionError("softmax over an empty axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", y, (x,), fn)


def log_softmax_lastdim(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def fn(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _emit("log_softmax", out, (x,), fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} vs last dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data

    def fn(g):
        lead = tuple(range(g.ndim - 1))
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit("layer_norm", xhat * gd + beta.data, (x, gamma, beta), fn)


def masked_fill(x: Tensor, mask: np.ndarray, value: float = -np.inf) -> Tensor:
    """Replace entries where ``mask`` is true; masked entries get no gradient."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    keep = ~mask
    return _emit("masked_fill", np.where(mask, value, x.data), (x,), lambda g: (g * keep,))


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    m = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _emit("dropout", x.data * m, (x,), lambda g: (g * m,))


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    wshape = weight.shape

    def fn(g):
        gw = np.zeros(wshape)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, wshape[-1]))
        return (gw,)

    return _emit("embedding", weight.data[ids], (weight,), fn)


def frame_unfold(x: Tensor, kernel: int, stride: int, pad: int) -> Tensor:
    """Stack ``kernel`` neighbouring time steps of ``x[B, T, C]`` -> ``[B, T', kernel*C]``.

    Zero padding of ``pad`` steps on both ends; ``T' = (T + 2*pad - kernel) // stride + 1``.
    Together with a matmul this is a time-axis convolution.
    """
    b, t, c = x.shape
    tp = t + 2 * pad
    t_out = (tp - kernel) // stride + 1
    if t_out < 1:
        raise DimensionError(f"frame_unfold: length {t} too short for kernel {kernel}")
    xp = np.zeros((b, tp, c))
    xp[:, pad:pad + t] = x.data
    span = stride * (t_out - 1) + 1
    out = np.concatenate([xp[:, j:j + span:stride] for j in range(kernel)], axis=-1)

    def fn(g):
        g = g.reshape(b, t_out, kernel, c)
        gp = np.zeros((b, tp, c))
        for j in range(kernel):
            gp[:, j:j + span:stride] += g[:, :, j]
        return (gp[:, pad:pad + t],)

    return _emit("frame_unfold", out, (x,), fn)


def cross_entropy(logits: Tensor, targets, ignore_id: int) -> Tensor:
    """Mean token-level negative log-likelihood over non-ignored positions.

    ``logits`` has shape ``[..., V]`` and ``targets`` the leading shape.
    """
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
    if tgt.shape[0] != flat.shape[0]:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {np.shape(targets)}")
    valid = tgt != ignore_id
    n = int(valid.sum())
    if n == 0:
        raise EmptyLossError("empty loss: every target position is ignored")
    if np.any((tgt[valid] < 0) | (tgt[valid] >= v)):
        raise ValueError("cross_entropy: target id out of range")
    z = flat - flat.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    rows = np.nonzero(valid)[0]
    loss = -logp[rows, tgt[rows]].sum() / n
    shape = logits.shape

    def fn(g):
        gl = np.exp(logp)
        gl[rows, tgt[rows]] -= 1.0
        gl[~valid] = 0.0
        return ((gl * (g / n)).reshape(shape),)

    return _emit("cross_entropy", np.asarray(loss), (logits,), fn)
