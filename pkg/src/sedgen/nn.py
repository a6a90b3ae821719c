"""Model building blocks on top of the tape tensor core.

Modules are plain attribute containers: assigning a Tensor with
requires_grad=True, another Module, or a list of Modules registers it under a
dotted path name. Names are what the optimizer's weight-decay filter and the
checkpoint container see, so keep attribute names stable.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .tensor import (
    Tensor,
    add,
    concat,
    conv2d,
    embedding,
    layernorm,
    matmul,
    mul,
    reshape,
    sigmoid,
    slice_,
    softmax,
    sub,
    tanh,
    transpose,
)


class Module:
    training: bool = False

    def named_parameters(self, prefix: str = "", _seen: set[int] | None = None) -> Iterator[tuple[str, Tensor]]:
        # a tensor shared between submodules (tied weights) is yielded once,
        # under the first dotted path that reaches it
        seen = set() if _seen is None else _seen
        for attr, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                if id(value) not in seen:
                    seen.add(id(value))
                    yield prefix + attr, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{attr}.", seen)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{attr}.{i}.", seen)
                    elif isinstance(item, Tensor) and item.requires_grad:
                        if id(item) not in seen:
                            seen.add(id(item))
                            yield f"{prefix}{attr}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(arrays))
            unexpected = sorted(set(arrays) - set(own))
            if missing or unexpected:
                raise ContractError(f"state dict mismatch: missing {missing}, unexpected {unexpected}")
        for name, p in own.items():
            if name not in arrays:
                continue
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ShapeError(f"param '{name}' has shape {p.data.shape}, checkpoint has {arr.shape}")
            p.data[...] = arr

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.zero_grad()


class DropoutSource:
    """Counter-based mask stream: draw i is a pure function of (seed, i).

    Philox is keyed with (seed, counter) per draw, so replaying a training run
    from the same seed regenerates identical masks regardless of tensor shapes
    drawn in between.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.counter = 0

    def reset(self, counter: int = 0) -> None:
        self.counter = counter

    def draw(self, shape: tuple[int, ...], p: float) -> np.ndarray:
        key = np.array([self.seed, self.counter], dtype=np.uint64)
        self.counter += 1
        rng = np.random.Generator(np.random.Philox(key=key))
        return (rng.random(shape) >= p) / (1.0 - p)


class Dropout(Module):
    def __init__(self, p: float, source: DropoutSource):
        if not 0.0 <= p < 1.0:
            raise ConfigError(f"dropout p must be in [0, 1), got {p}")
        self.p = p
        self._source = source

    def __call__(self, x: Tensor) -> Tensor:
        if not self.training or self.p == 0.0:
            return x
        mask = self._source.draw(x.shape, self.p)
        return mul(x, Tensor(mask))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, init_std: float = 0.02):
        self.w = Tensor(rng.normal(0.0, init_std, size=(d_in, d_out)), requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.w)
        if self.b is not None:
            y = add(y, self.b)
        return y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.shift = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layernorm(x, self.gain, self.shift, self.eps)


class Embedding(Module):
    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator, init_std: float = 0.02):
        self.table = Tensor(rng.normal(0.0, init_std, size=(vocab_size, dim)), requires_grad=True)

    def __call__(self, ids) -> Tensor:
        return embedding(self.table, ids)


class Conv2d(Module):
    """3x3-style convolution over (channels, height, width) inputs."""

    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        init_std: float = 0.02,
    ):
        self.w = Tensor(rng.normal(0.0, init_std, size=(c_out, c_in, kernel, kernel)), requires_grad=True)
        self.b = Tensor(np.zeros(c_out), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


def sinusoidal_positions(n: int, dim: int) -> np.ndarray:
    """Fixed sin/cos position code, shape (n, dim)."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * i / dim)
    pe = np.zeros((n, dim))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles[:, : dim - dim // 2])
    return pe


def linear_interp_matrix(t_in: int, t_out: int) -> np.ndarray:
    """Row-stochastic (t_out, t_in) matrix for align-corners linear resampling."""
    if t_in < 1 or t_out < 1:
        raise ConfigError(f"interp needs positive lengths, got {t_in} -> {t_out}")
    m = np.zeros((t_out, t_in))
    if t_in == 1:
        m[:, 0] = 1.0
        return m
    for i in range(t_out):
        p = i * (t_in - 1) / (t_out - 1) if t_out > 1 else 0.0
        lo = min(int(np.floor(p)), t_in - 2)
        frac = p - lo
        m[i, lo] = 1.0 - frac
        m[i, lo + 1] = frac
    return m


class MultiHeadAttention(Module):
    """Scaled dot-product attention with per-head projections.

    Accepts (N, D) or batched (B, N, D) queries; keys/values must share the
    batch layout. ``mask`` is a boolean numpy array, True where attention is
    allowed, shaped (N, M) or (B, N, M).
    """

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator):
        if d_model % heads != 0:
            raise ConfigError(f"d_model {d_model} not divisible by heads {heads}")
        self.heads = heads
        self.d_head = d_model // heads
        self.wq = Linear(d_model, d_model, rng)
        self.wk = Linear(d_model, d_model, rng)
        self.wv = Linear(d_model, d_model, rng)
        self.wo = Linear(d_model, d_model, rng)

    def __call__(self, q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
        squeeze = q.ndim == 2
        if squeeze:
            q = reshape(q, (1, *q.shape))
            k = reshape(k, (1, *k.shape))
            v = reshape(v, (1, *v.shape))
        if not (q.ndim == k.ndim == v.ndim == 3):
            raise ShapeError(f"attention expects rank-3 operands, got {q.shape}, {k.shape}, {v.shape}")
        b, n, d = q.shape
        _, m, _ = k.shape
        h, dh = self.heads, self.d_head

        qh = self.wq(reshape(q, (b * n, d)))
        kh = self.wk(reshape(k, (b * m, d)))
        vh = self.wv(reshape(v, (b * m, d)))
        qh = reshape(transpose(reshape(qh, (b, n, h, dh)), (0, 2, 1, 3)), (b * h, n, dh))
        kh = reshape(transpose(reshape(kh, (b, m, h, dh)), (0, 2, 1, 3)), (b * h, m, dh))
        vh = reshape(transpose(reshape(vh, (b, m, h, dh)), (0, 2, 1, 3)), (b * h, m, dh))

        scores = mul(matmul(qh, transpose(kh, (0, 2, 1))), 1.0 / np.sqrt(dh))
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape == (n, m):
                mask3 = np.broadcast_to(mask, (b, n, m))
            elif mask.shape == (b, n, m):
                mask3 = mask
            else:
                raise ShapeError(f"mask shape {mask.shape} incompatible with ({b},{n},{m})")
            if not mask3.any(axis=-1).all():
                raise ContractError("attention mask forbids every key for some query")
            bias = np.where(mask3, 0.0, -np.inf)
            bias = np.broadcast_to(bias[:, None, :, :], (b, h, n, m)).reshape(b * h, n, m)
            scores = add(scores, Tensor(bias))
        probs = softmax(scores, axis=-1)
        ctx = matmul(probs, vh)  # (b*h, n, dh)
        ctx = reshape(transpose(reshape(ctx, (b, h, n, dh)), (0, 2, 1, 3)), (b * n, d))
        out = self.wo(ctx)
        out = reshape(out, (b, n, d))
        if squeeze:
            out = reshape(out, (n, d))
        return out


class GRUCell(Module):
    """Gated recurrent unit, gate order (reset, update, candidate)."""

    def __init__(self, d_in: int, d_hidden: int, rng: np.random.Generator, init_std: float = 0.02):
        self.d_hidden = d_hidden
        self.w_ih = Tensor(rng.normal(0.0, init_std, size=(d_in, 3 * d_hidden)), requires_grad=True)
        self.w_hh = Tensor(rng.normal(0.0, init_std, size=(d_hidden, 3 * d_hidden)), requires_grad=True)
        self.b_ih = Tensor(np.zeros(3 * d_hidden), requires_grad=True)
        self.b_hh = Tensor(np.zeros(3 * d_hidden), requires_grad=True)


def run_gru(cell: GRUCell, xs: Tensor, reverse: bool = False) -> Tensor:
    """Scan a GRU over xs (T, d_in) -> (T, d_hidden), zero initial state.

    With reverse=True the input is consumed from the last step backward and
    outputs are returned re-flipped, so output[t] always corresponds to xs[t].
    """
    if xs.ndim != 2:
        raise ShapeError(f"run_gru expects (T, d_in), got {xs.shape}")
    t_len = xs.shape[0]
    hd = cell.d_hidden
    xw = add(matmul(xs, cell.w_ih), cell.b_ih)  # (T, 3H) input projection, hoisted
    h = Tensor(np.zeros((1, hd)))
    outs: list[Tensor] = [None] * t_len  # type: ignore[list-item]
    order = range(t_len - 1, -1, -1) if reverse else range(t_len)
    for t in order:
        xw_t = slice_(xw, (slice(t, t + 1), slice(None)))
        hu = add(matmul(h, cell.w_hh), cell.b_hh)  # (1, 3H)
        rz = sigmoid(add(slice_(xw_t, (slice(None), slice(0, 2 * hd))), slice_(hu, (slice(None), slice(0, 2 * hd)))))
        r = slice_(rz, (slice(None), slice(0, hd)))
        z = slice_(rz, (slice(None), slice(hd, 2 * hd)))
        n = tanh(add(slice_(xw_t, (slice(None), slice(2 * hd, 3 * hd))), mul(r, slice_(hu, (slice(None), slice(2 * hd, 3 * hd))))))
        h = add(n, mul(z, sub(h, n)))  # (1-z)*n + z*h
        outs[t] = h
    return concat(outs, axis=0)


class BiGRU(Module):
    def __init__(self, d_in: int, d_hidden: int, rng: np.random.Generator):
        self.fwd = GRUCell(d_in, d_hidden, rng)
        self.bwd = GRUCell(d_in, d_hidden, rng)

    def __call__(self, xs: Tensor) -> Tensor:
        f = run_gru(self.fwd, xs, reverse=False)
        b = run_gru(self.bwd, xs, reverse=True)
        return concat([f, b], axis=1)  # (T, 2H)
