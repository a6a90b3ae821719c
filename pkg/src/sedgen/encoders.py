"""Audio encoders: a VGG-style CNN and a windowed-attention transformer.

Both encoders map a log-mel spectrogram (T, M) to the same contract: frame
embeddings (out_frames, model_dim) via a shared upsample + bi-GRU adapter,
plus an L2-normalized pooled vector for contrastive training. Downstream code
never branches on which encoder produced the embedding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, InputError
from .nn import (
    BiGRU,
    Conv2d,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    linear_interp_matrix,
    sinusoidal_positions,
)
from .tensor import Tensor, add, avg_pool2d, concat, gelu, l2_normalize, matmul, mean, reshape, transpose

ENCODER_KINDS = ("pann_lite", "htsat_lite")

# Log-mel value used to extend a spectrogram along time so its frame count
# divides the encoder's downsampling factor; matches the silence floor of the
# feature frontend (log of its power floor).
PAD_LOG_VALUE = float(np.log(1e-10))


@dataclass
class EncoderConfig:
    kind: str = "htsat_lite"
    model_dim: int = 64
    patch: int = 4
    window: int = 4
    stages: int = 2
    heads: int = 4
    gru_hidden: int = 64
    out_frames: int = 250
    num_classes: int = 4
    d_shared: int = 64
    clip_seconds: float = 10.0

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise ConfigError(f"unknown encoder kind {self.kind!r}; choose from {ENCODER_KINDS}")
        if self.model_dim % self.heads != 0:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.model_dim % (2 ** (self.stages - 1)) != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by 2^(stages-1)={2 ** (self.stages - 1)}"
            )
        if self.model_dim % 4 != 0:
            raise ConfigError(f"model_dim {self.model_dim} must be divisible by 4")
        for name in ("patch", "window", "stages", "heads", "gru_hidden", "out_frames", "num_classes", "d_shared"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")

    @property
    def frame_seconds(self) -> float:
        return self.clip_seconds / self.out_frames


@dataclass
class AudioEmbedding:
    """Frame features (out_frames, model_dim) plus pooled unit vector."""

    frames: Tensor
    pooled: Tensor
    frame_seconds: float


def pad_frames(mel: np.ndarray, multiple: int) -> np.ndarray:
    """Extend the time axis with the silence floor to a multiple of `multiple`."""
    t = mel.shape[0]
    extra = (-t) % multiple
    if extra == 0:
        return mel
    tail = np.full((extra, mel.shape[1]), PAD_LOG_VALUE)
    return np.concatenate([mel, tail], axis=0)


class ContrastivePool(Module):
    """Time-mean then project to the shared contrastive space, unit norm."""

    def __init__(self, model_dim: int, d_shared: int, rng: np.random.Generator):
        self.proj = Linear(model_dim, d_shared, rng)

    def __call__(self, frames: Tensor) -> Tensor:
        pooled = self.proj(mean(frames, axis=0, keepdims=True))  # (1, d_shared)
        return l2_normalize(reshape(pooled, (pooled.shape[1],)))


class UpsampleBiGruAdapter(Module):
    """Interpolate frame features to out_frames, tag each frame with a fixed
    sinusoidal time code, then bi-GRU + linear back to model_dim.

    The time code is added because the convolution/attention features are
    (nearly) translation-equivariant, while the decoder must read absolute
    event times out of these frames.
    """

    def __init__(self, model_dim: int, gru_hidden: int, out_frames: int, rng: np.random.Generator):
        self.out_frames = out_frames
        self.gru = BiGRU(model_dim, gru_hidden, rng)
        self.proj = Linear(2 * gru_hidden, model_dim, rng)
        self.time_code = sinusoidal_positions(out_frames, model_dim)

    def __call__(self, frames: Tensor) -> Tensor:
        t_in = frames.shape[0]
        if t_in < 2:
            raise InputError(f"adapter needs at least 2 input frames, got {t_in}")
        interp = Tensor(linear_interp_matrix(t_in, self.out_frames))
        x = add(matmul(interp, frames), Tensor(self.time_code))
        return self.proj(self.gru(x))


class PannLite(Module):
    """Four conv blocks (3x3 conv -> channel layernorm -> GELU -> 2x2 avg pool),
    frequency mean, then the shared adapter and contrastive pool."""

    DOWNSAMPLE = 16  # 2^4 from four pooling layers

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.model_dim
        channels = [d // 4, d // 2, d, d]
        self.convs = []
        self.norms = []
        c_in = 1
        for c_out in channels:
            self.convs.append(Conv2d(c_in, c_out, 3, rng, padding=1))
            self.norms.append(LayerNorm(c_out))
            c_in = c_out
        self.adapter = UpsampleBiGruAdapter(d, cfg.gru_hidden, cfg.out_frames, rng)
        self.pool = ContrastivePool(d, cfg.d_shared, rng)

    def _block(self, x: Tensor, conv: Conv2d, norm: LayerNorm) -> Tensor:
        x = conv(x)  # (C, H, W)
        x = transpose(x, (1, 2, 0))  # normalize over channels at each cell
        x = norm(x)
        x = transpose(x, (2, 0, 1))
        return avg_pool2d(gelu(x), 2)

    def frame_features(self, mel: np.ndarray) -> Tensor:
        mel = np.asarray(mel, dtype=np.float64)
        if mel.ndim != 2:
            raise InputError(f"expected (frames, mels) spectrogram, got shape {mel.shape}")
        if mel.shape[0] < self.DOWNSAMPLE:
            raise InputError(f"need at least {self.DOWNSAMPLE} mel frames, got {mel.shape[0]}")
        if mel.shape[1] % self.DOWNSAMPLE != 0:
            raise InputError(f"mel bins {mel.shape[1]} must divide by {self.DOWNSAMPLE}")
        x = Tensor(pad_frames(mel, self.DOWNSAMPLE)[None, :, :])  # (1, T, M)
        for conv, norm in zip(self.convs, self.norms):
            x = self._block(x, conv, norm)
        return transpose(mean(x, axis=2), (1, 0))  # (T/16, model_dim)

    def __call__(self, mel: np.ndarray) -> AudioEmbedding:
        frames = self.adapter(self.frame_features(mel))
        return AudioEmbedding(frames, self.pool(frames), self.cfg.frame_seconds)


def window_partition(grid: Tensor, window: int) -> tuple[Tensor, np.ndarray, tuple[int, int]]:
    """Split a (H, W, D) token grid into (n_windows, window*window, D) plus a
    per-token validity flag for positions added to reach divisibility."""
    h, w, d = grid.shape
    ph, pw = (-h) % window, (-w) % window
    valid = np.ones((h + ph, w + pw), dtype=bool)
    if ph or pw:
        valid[h:, :] = False
        valid[:, w:] = False
        rows = [grid]
        if ph:
            rows.append(Tensor(np.zeros((ph, w, d))))
        grid = concat(rows, axis=0) if ph else grid
        cols = [grid]
        if pw:
            cols.append(Tensor(np.zeros((h + ph, pw, d))))
        grid = concat(cols, axis=1) if pw else grid
    hp, wp = h + ph, w + pw
    nh, nw = hp // window, wp // window
    tokens = reshape(grid, (nh, window, nw, window, d))
    tokens = transpose(tokens, (0, 2, 1, 3, 4))
    tokens = reshape(tokens, (nh * nw, window * window, d))
    flags = valid.reshape(nh, window, nw, window).transpose(0, 2, 1, 3).reshape(nh * nw, window * window)
    return tokens, flags, (hp, wp)


def window_unpartition(tokens: Tensor, window: int, padded: tuple[int, int], original: tuple[int, int]) -> Tensor:
    hp, wp = padded
    h, w = original
    d = tokens.shape[-1]
    nh, nw = hp // window, wp // window
    grid = reshape(tokens, (nh, nw, window, window, d))
    grid = transpose(grid, (0, 2, 1, 3, 4))
    grid = reshape(grid, (hp, wp, d))
    if (hp, wp) != (h, w):
        grid = grid[:h, :w, :]
    return grid


class WindowBlock(Module):
    """Pre-norm transformer block whose self-attention sees only one
    window x window neighborhood of the token grid at a time."""

    def __init__(self, dim: int, heads: int, window: int, rng: np.random.Generator):
        self.window = window
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, 4 * dim, rng)
        self.fc2 = Linear(4 * dim, dim, rng)

    def _windowed_attention(self, grid: Tensor) -> Tensor:
        h, w, _ = grid.shape
        tokens, valid, padded = window_partition(grid, self.window)
        # every query may look at every real token in its window; padded
        # tokens are masked out as keys and their outputs are cropped away
        mask = np.broadcast_to(valid[:, None, :], (valid.shape[0], valid.shape[1], valid.shape[1]))
        out = self.attn(tokens, tokens, tokens, mask=mask)
        return window_unpartition(out, self.window, padded, (h, w))

    def __call__(self, grid: Tensor) -> Tensor:
        grid = add(grid, self._windowed_attention(self.norm1(grid)))
        flat = reshape(grid, (grid.shape[0] * grid.shape[1], grid.shape[2]))
        mlp = self.fc2(gelu(self.fc1(self.norm2(flat))))
        return add(grid, reshape(mlp, grid.shape))


class PatchMerge(Module):
    """Concatenate each 2x2 grid neighborhood and project 4D -> 2D."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.proj = Linear(4 * dim, 2 * dim, rng)

    def __call__(self, grid: Tensor) -> Tensor:
        h, w, d = grid.shape
        if h % 2 or w % 2:
            raise ContractError(f"grid {h}x{w} not divisible by 2 for patch merging")
        x = reshape(grid, (h // 2, 2, w // 2, 2, d))
        x = transpose(x, (0, 2, 1, 3, 4))
        x = reshape(x, (h // 2, w // 2, 4 * d))
        flat = self.proj(reshape(x, ((h // 2) * (w // 2), 4 * d)))
        return reshape(flat, (h // 2, w // 2, 2 * d))


class TokenSemanticHead(Module):
    """3x3 conv over the final token grid mapping features to class logits;
    frequency-mean gives per-frame logits, time-mean gives clip logits."""

    def __init__(self, dim: int, num_classes: int, rng: np.random.Generator):
        self.conv = Conv2d(dim, num_classes, 3, rng, padding=1)

    def __call__(self, grid: Tensor) -> tuple[Tensor, Tensor]:
        x = self.conv(transpose(grid, (2, 0, 1)))  # (C, T', F')
        frame_logits = transpose(mean(x, axis=2), (1, 0))  # (T', C)
        return frame_logits, mean(frame_logits, axis=0)


class HtsatLite(Module):
    """Patch embedding, per-stage windowed attention blocks with patch
    merging between stages, then the shared adapter and contrastive pool."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        d0 = cfg.model_dim // (2 ** (cfg.stages - 1))
        self.patch_embed = Linear(cfg.patch * cfg.patch, d0, rng)
        self.blocks = []
        self.merges = []
        dim = d0
        for stage in range(cfg.stages):
            self.blocks.append(WindowBlock(dim, cfg.heads, cfg.window, rng))
            if stage < cfg.stages - 1:
                self.merges.append(PatchMerge(dim, rng))
                dim *= 2
        self.final_norm = LayerNorm(cfg.model_dim)
        self.semantic = TokenSemanticHead(cfg.model_dim, cfg.num_classes, rng)
        self.adapter = UpsampleBiGruAdapter(cfg.model_dim, cfg.gru_hidden, cfg.out_frames, rng)
        self.pool = ContrastivePool(cfg.model_dim, cfg.d_shared, rng)

    def _grid(self, mel: np.ndarray) -> Tensor:
        cfg = self.cfg
        mel = np.asarray(mel, dtype=np.float64)
        if mel.ndim != 2:
            raise InputError(f"expected (frames, mels) spectrogram, got shape {mel.shape}")
        multiple = cfg.patch * (2 ** (cfg.stages - 1))
        if mel.shape[0] < multiple:
            raise InputError(f"need at least {multiple} mel frames, got {mel.shape[0]}")
        if mel.shape[1] % multiple != 0:
            raise InputError(f"mel bins {mel.shape[1]} must divide by {multiple}")
        padded = pad_frames(mel, multiple)
        t, m, p = padded.shape[0], padded.shape[1], cfg.patch
        ht, wf = t // p, m // p
        patches = padded.reshape(ht, p, wf, p).transpose(0, 2, 1, 3).reshape(ht * wf, p * p)
        grid = reshape(self.patch_embed(Tensor(patches)), (ht, wf, -1))
        for stage, block in enumerate(self.blocks):
            grid = block(grid)
            if stage < len(self.merges):
                grid = self.merges[stage](grid)
        if grid.shape[:2] != (t // (p * 2 ** (cfg.stages - 1)), m // (p * 2 ** (cfg.stages - 1))):
            raise ContractError(f"unexpected final grid shape {grid.shape}")
        return self.final_norm(grid)

    def frame_features(self, mel: np.ndarray) -> Tensor:
        return mean(self._grid(mel), axis=1)  # (T', model_dim)

    def __call__(self, mel: np.ndarray) -> AudioEmbedding:
        frames = self.adapter(self.frame_features(mel))
        return AudioEmbedding(frames, self.pool(frames), self.cfg.frame_seconds)

    def forward_with_semantic(self, mel: np.ndarray) -> tuple[AudioEmbedding, Tensor, Tensor]:
        grid = self._grid(mel)
        frames = self.adapter(mean(grid, axis=1))
        frame_logits, clip_logits = self.semantic(grid)
        return AudioEmbedding(frames, self.pool(frames), self.cfg.frame_seconds), frame_logits, clip_logits


def build_encoder(cfg: EncoderConfig, rng: np.random.Generator) -> Module:
    if cfg.kind == "pann_lite":
        return PannLite(cfg, rng)
    return HtsatLite(cfg, rng)
