"""Causal caption decoder conditioned on audio frames via cross-attention.

Each layer runs causal self-attention over the token prefix, cross-attention
whose keys/values are the audio frame embeddings (no causal mask there), and
an MLP — all pre-norm with residuals. Output logits are weight-tied to the
token embedding table. Two position variants exist: fixed sinusoidal
("bert" mode) and learned ("bart" mode); the matching label-smoothing change
for bart mode lives in the loss configuration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError
from .nn import (
    Dropout,
    DropoutSource,
    Embedding,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    sinusoidal_positions,
)
from .tensor import Tensor, add, gelu, matmul, transpose
from .vocab import Vocabulary

DECODER_MODES = ("bert", "bart")


@dataclass
class DecoderConfig:
    layers: int = 2
    heads: int = 4
    d_model: int = 64
    ffn_dim: int = 256
    dropout: float = 0.2
    max_len: int = 64
    mode: str = "bert"

    def __post_init__(self):
        if self.mode not in DECODER_MODES:
            raise ConfigError(f"unknown decoder mode {self.mode!r}; choose from {DECODER_MODES}")
        if self.d_model % self.heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        for name in ("layers", "heads", "d_model", "ffn_dim", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")


class DecoderBlock(Module):
    def __init__(self, d_model: int, heads: int, ffn_dim: int, dropout: Dropout, rng: np.random.Generator):
        self.norm1 = LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, heads, rng)
        self.norm2 = LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, heads, rng)
        self.norm3 = LayerNorm(d_model)
        self.fc1 = Linear(d_model, ffn_dim, rng)
        self.fc2 = Linear(ffn_dim, d_model, rng)
        self.drop = dropout

    def __call__(self, x: Tensor, audio: Tensor, causal: np.ndarray) -> Tensor:
        h = self.norm1(x)
        x = add(x, self.drop(self.self_attn(h, h, h, mask=causal)))
        x = add(x, self.drop(self.cross_attn(self.norm2(x), audio, audio)))
        return add(x, self.drop(self.fc2(gelu(self.fc1(self.norm3(x))))))


class CaptionDecoder(Module):
    def __init__(
        self,
        vocab: Vocabulary,
        cfg: DecoderConfig,
        embed: Embedding,
        rng: np.random.Generator,
        dropout_source: DropoutSource | None = None,
    ):
        if embed.table.shape != (vocab.size, cfg.d_model):
            raise ConfigError(
                f"embedding table {embed.table.shape} does not match vocab {vocab.size} x d_model {cfg.d_model}"
            )
        self.cfg = cfg
        self._vocab = vocab
        self.embed = embed
        source = dropout_source if dropout_source is not None else DropoutSource(0)
        self.drop = Dropout(cfg.dropout, source)
        if cfg.mode == "bart":
            self.positions = Tensor(rng.normal(0.0, 0.02, size=(cfg.max_len, cfg.d_model)), requires_grad=True)
        else:
            self.positions = Tensor(sinusoidal_positions(cfg.max_len, cfg.d_model))
        self.blocks = [
            DecoderBlock(cfg.d_model, cfg.heads, cfg.ffn_dim, self.drop, rng) for _ in range(cfg.layers)
        ]
        self.final_norm = LayerNorm(cfg.d_model)

    def __call__(self, ids, audio_frames: Tensor) -> Tensor:
        """Next-token logits, shape (len(ids), vocab size)."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise InputError(f"expected a non-empty 1-D id sequence, got shape {ids.shape}")
        if ids[0] != self._vocab.bos_id:
            raise InputError(f"decoder input must start with BOS (id {self._vocab.bos_id}), got id {ids[0]}")
        if ids.size > self.cfg.max_len:
            raise InputError(f"sequence of {ids.size} tokens exceeds max_len {self.cfg.max_len}")
        if audio_frames.ndim != 2 or audio_frames.shape[0] < 1:
            raise InputError(f"audio frames must be (T, D) with T >= 1, got {audio_frames.shape}")
        n = ids.size
        x = add(self.embed(ids), self.positions[:n, :])
        x = self.drop(x)
        causal = np.tril(np.ones((n, n), dtype=bool))
        for block in self.blocks:
            x = block(x, audio_frames, causal)
        return matmul(self.final_norm(x), transpose(self.embed.table, (1, 0)))
