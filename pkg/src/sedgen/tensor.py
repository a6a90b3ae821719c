"""Dense float64 tensors with reverse-mode autodiff on an explicit tape.

Graphs are define-by-run: while a ``Tape`` is active (used as a context
manager), every differentiable op whose inputs require gradients appends one
record to it, in execution order. ``backward(loss, tape)`` replays the records
in exact reverse order, so gradient accumulation order is deterministic and
repeated backward passes over the same tape are bit-identical.

Storage is always ``np.float64``. Gradients are plain numpy arrays written
into the ``.grad`` slot of leaf tensors (tensors the caller created with
``requires_grad=True``, as opposed to op outputs).
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigError, ContractError, ShapeError

Array = np.ndarray

_TAPE_STACK: list["Tape"] = []


class Tape:
    """Execution-ordered record of differentiable operations."""

    __slots__ = ("records",)

    def __init__(self):
        # each record: (out, inputs, vjp) where vjp(g_out) -> per-input grads
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tapes must unwind in LIFO order"

    def __len__(self) -> int:
        return len(self.records)


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "is_leaf")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data: Array = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self.is_leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> Array:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        grad = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"

    # operator sugar; scalars are wrapped as constant tensors
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        tape.records.append((out, inputs, vjp))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Reverse sweep over ``tape``; accumulates into leaf ``.grad`` buffers.

    Every leaf tensor with requires_grad=True that appears on the tape ends up
    with a grad buffer; leaves unreachable from ``loss`` get zeros added.
    Non-scalar losses are rejected.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, vjp in reversed(tape.records):
        g = grads.get(id(out))
        if g is None:
            continue
        in_grads = vjp(g)
        for t, gi in zip(inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.data.shape:
                raise ContractError(
                    f"vjp produced grad of shape {gi.shape} for input of shape {t.data.shape}"
                )
            acc = grads.get(id(t))
            grads[id(t)] = gi if acc is None else acc + gi
    for _, inputs, _ in tape.records:
        for t in inputs:
            if t.requires_grad and t.is_leaf:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                g = grads.get(id(t))
                if g is not None:
                    t.grad = t.grad + g
                    grads.pop(id(t))  # each leaf is credited once


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``g`` back down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting rules)

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _record(out, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data / b.data)

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _record(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


# ---------------------------------------------------------------------------
# elementwise nonlinearities

def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    y = np.sqrt(a.data)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * 0.5 / y,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign to avoid overflow in exp
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, 0.0))
    return _record(out, (a,), lambda g: (g * mask,))


_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    a = as_tensor(a)
    x = a.data
    phi = 0.5 * (1.0 + erf(x / _SQRT2))
    out = Tensor(x * phi)

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (phi + x * pdf),)

    return _record(out, (a,), vjp)


# ---------------------------------------------------------------------------
# linear algebra and structure

def matmul(a, b) -> Tensor:
    """Matrix product. 2-D x 2-D, or stacked with identical leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _record(out, (a, b), vjp)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    out = Tensor(np.transpose(a.data, axes))
    inv = tuple(np.argsort(axes))
    return _record(out, (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.data.shape),))


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of an empty sequence")
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(ts), vjp)


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("stack of an empty sequence")
    out = Tensor(np.stack([t.data for t in ts], axis=axis))

    def vjp(g):
        parts = np.split(g, len(ts), axis=axis)
        return tuple(np.squeeze(p, axis=axis) for p in parts)

    return _record(out, tuple(ts), vjp)


def slice_(a, key) -> Tensor:
    """Basic slicing (ints and slices only; no fancy indexing)."""
    a = as_tensor(a)
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not isinstance(k, (int, np.integer, slice)) and k is not Ellipsis:
            raise ShapeError(f"only basic slicing is differentiable, got {type(k).__name__}")
    out = Tensor(a.data[key])

    def vjp(g):
        gx = np.zeros_like(a.data)
        gx[key] += g
        return (gx,)

    return _record(out, (a,), vjp)


def flip(a, axis: int) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.flip(a.data, axis=axis))
    return _record(out, (a,), lambda g: (np.flip(g, axis=axis),))


# ---------------------------------------------------------------------------
# reductions

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _record(out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.data.shape[i] for i in ax]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# composite normalizers

def softmax(a, axis: int = -1) -> Tensor:
    """Row-stabilized softmax; the max shift is treated as a constant."""
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)  # all-masked rows are the caller's problem
    e = exp(sub(a, Tensor(m)))
    s = sum_(e, axis=axis, keepdims=True)
    return div(e, s)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    shifted = sub(a, Tensor(m))
    lse = log(sum_(exp(shifted), axis=axis, keepdims=True))
    return sub(shifted, lse)


def layernorm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    if eps <= 0:
        raise ConfigError(f"layernorm eps must be > 0, got {eps}")
    a = as_tensor(a)
    mu = mean(a, axis=-1, keepdims=True)
    xc = sub(a, mu)
    var = mean(mul(xc, xc), axis=-1, keepdims=True)
    inv = div(1.0, sqrt(add(var, eps)))
    return add(mul(mul(xc, inv), gamma), beta)


def l2_normalize(v, eps: float = 1e-12) -> Tensor:
    """v / (||v|| + eps) over the last axis."""
    v = as_tensor(v)
    n = sqrt(sum_(mul(v, v), axis=-1, keepdims=True))
    return div(v, add(n, eps))


# ---------------------------------------------------------------------------
# convolution and pooling (channels-first: (C, H, W))

def conv2d(x, w, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation), zero padding, square stride."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"conv2d expects x (C,H,W) and w (O,C,kh,kw), got {x.shape}, {w.shape}")
    cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: x has {cin}, w expects {cin_w}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv2d stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    hp, wp = h + 2 * padding, wd + 2 * padding
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d kernel {kh}x{kw} does not fit padded input {hp}x{wp}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    patches = windows[:, ::stride, ::stride]  # (C, ho, wo, kh, kw)
    cols = patches.transpose(1, 2, 0, 3, 4).reshape(ho * wo, cin * kh * kw)
    wmat = w.data.reshape(cout, cin * kh * kw)
    y = (cols @ wmat.T).T.reshape(cout, ho, wo)
    b = as_tensor(bias) if bias is not None else None
    if b is not None:
        if b.shape != (cout,):
            raise ShapeError(f"conv2d bias must be ({cout},), got {b.shape}")
        y = y + b.data[:, None, None]
    out = Tensor(y)

    def vjp(g):
        g2 = g.reshape(cout, ho * wo).T  # (ho*wo, cout)
        gw = (g2.T @ cols).reshape(w.data.shape)
        gcols = (g2 @ wmat).reshape(ho, wo, cin, kh, kw).transpose(2, 0, 1, 3, 4)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, :, i, j]
        gx = gxp[:, padding:padding + h, padding:padding + wd]
        if b is not None:
            return np.ascontiguousarray(gx), gw, g.sum(axis=(1, 2))
        return np.ascontiguousarray(gx), gw

    inputs = (x, w, b) if b is not None else (x, w)
    return _record(out, inputs, vjp)


def avg_pool2d(x, k: int) -> Tensor:
    """Non-overlapping k x k average pooling; spatial dims must divide by k."""
    x = as_tensor(x)
    c, h, w = _pool_check(x, k)
    r = x.data.reshape(c, h // k, k, w // k, k)
    out = Tensor(r.mean(axis=(2, 4)))

    def vjp(g):
        ge = g[:, :, None, :, None] / (k * k)
        return (np.broadcast_to(ge, (c, h // k, k, w // k, k)).reshape(c, h, w).copy(),)

    return _record(out, (x,), vjp)


def max_pool2d(x, k: int) -> Tensor:
    """Non-overlapping k x k max pooling; ties go to the first (row-major) cell."""
    x = as_tensor(x)
    c, h, w = _pool_check(x, k)
    blocks = (
        x.data.reshape(c, h // k, k, w // k, k)
        .transpose(0, 1, 3, 2, 4)
        .reshape(c, h // k, w // k, k * k)
    )
    idx = blocks.argmax(axis=-1)
    out = Tensor(np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0])

    def vjp(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(c, h // k, w // k, k, k).transpose(0, 1, 3, 2, 4).reshape(c, h, w)
        return (gx,)

    return _record(out, (x,), vjp)


def _pool_check(x: Tensor, k: int) -> tuple[int, int, int]:
    if x.ndim != 3:
        raise ShapeError(f"pooling expects (C,H,W), got {x.shape}")
    if k < 1:
        raise ConfigError(f"pool size must be >= 1, got {k}")
    c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"pooling needs H,W divisible by {k}, got {h}x{w}; pad first")
    return c, h, w


# ---------------------------------------------------------------------------
# lookup and regularization

def embedding(table, ids) -> Tensor:
    """Row lookup: table (V, D), ids int sequence -> (len(ids), D)."""
    table = as_tensor(table)
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {table.shape}")
    idx = np.asarray(ids, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"embedding ids must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ContractError(
            f"embedding id out of range [0, {table.shape[0]}): min {idx.min()}, max {idx.max()}"
        )
    out = Tensor(table.data[idx])

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _record(out, (table,), vjp)


def dropout(x, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout with a caller-supplied generator. Train-time only."""
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout p must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, Tensor(mask))


def argmax_last(a) -> int:
    """Index of the maximum along the last axis of a 1-D tensor; ties pick the lowest index."""
    a = as_tensor(a)
    if a.ndim != 1:
        raise ShapeError(f"argmax_last expects 1-D, got {a.shape}")
    return int(np.argmax(a.data))
