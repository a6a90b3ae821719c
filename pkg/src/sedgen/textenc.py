"""Unimodal text encoder: pooled caption embeddings for contrastive training.

A CLS token is prepended, token + fixed sinusoidal position embeddings feed a
small stack of bidirectional (non-causal) pre-norm attention blocks, and the
CLS output is projected to the shared space and L2-normalized. PAD positions
are masked out as attention keys, so the embedding is independent of how much
padding a sequence carries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError
from .nn import Embedding, LayerNorm, Linear, Module, MultiHeadAttention, sinusoidal_positions
from .tensor import Tensor, add, gelu, l2_normalize, reshape, slice_
from .vocab import Vocabulary


@dataclass
class TextEncoderConfig:
    layers: int = 2
    heads: int = 4
    d_model: int = 64
    ffn_dim: int = 256
    max_len: int = 64
    d_shared: int = 64

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        for name in ("layers", "heads", "d_model", "ffn_dim", "max_len", "d_shared"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")


class AttentionBlock(Module):
    """Pre-norm self-attention + MLP; the mask decides bidirectional/causal."""

    def __init__(self, d_model: int, heads: int, ffn_dim: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, heads, rng)
        self.norm2 = LayerNorm(d_model)
        self.fc1 = Linear(d_model, ffn_dim, rng)
        self.fc2 = Linear(ffn_dim, d_model, rng)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        h = self.norm1(x)
        x = add(x, self.attn(h, h, h, mask=mask))
        return add(x, self.fc2(gelu(self.fc1(self.norm2(x)))))


class TextEncoder(Module):
    def __init__(self, vocab: Vocabulary, cfg: TextEncoderConfig, embed: Embedding, rng: np.random.Generator):
        if embed.table.shape != (vocab.size, cfg.d_model):
            raise ConfigError(
                f"embedding table {embed.table.shape} does not match vocab {vocab.size} x d_model {cfg.d_model}"
            )
        self.cfg = cfg
        self._vocab = vocab
        self.embed = embed
        self.blocks = [AttentionBlock(cfg.d_model, cfg.heads, cfg.ffn_dim, rng) for _ in range(cfg.layers)]
        self.final_norm = LayerNorm(cfg.d_model)
        self.proj = Linear(cfg.d_model, cfg.d_shared, rng)
        self._positions = sinusoidal_positions(cfg.max_len + 1, cfg.d_model)

    def __call__(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise InputError(f"expected a non-empty 1-D id sequence, got shape {ids.shape}")
        if ids.size > self.cfg.max_len:
            raise InputError(f"sequence of {ids.size} tokens exceeds max_len {self.cfg.max_len}")
        full = np.concatenate([[self._vocab.cls_id], ids])
        n = full.size
        x = add(self.embed(full), Tensor(self._positions[:n]))
        real = full != self._vocab.pad_id  # CLS is always real, so no empty rows
        mask = np.broadcast_to(real[None, :], (n, n))
        for block in self.blocks:
            x = block(x, mask=mask)
        pooled = self.proj(slice_(self.final_norm(x), (slice(0, 1), slice(None))))
        return l2_normalize(reshape(pooled, (self.cfg.d_shared,)))
