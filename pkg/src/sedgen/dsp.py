"""Audio I/O and the log-mel spectrogram frontend.

All audio is mono float64 in [-1, 1]. The spectrogram path is: Hann STFT with
centered reflect padding -> power -> triangular mel filterbank (Slaney-style
band spacing, area-normalized) -> log with an absolute floor of 1e-10.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .errors import ConfigError, InputError

LOG_FLOOR = 1e-10


@dataclass
class AudioClip:
    samples: np.ndarray  # (n,) float64
    rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise InputError(f"AudioClip wants mono (n,) samples, got shape {self.samples.shape}")
        if self.rate <= 0:
            raise InputError(f"AudioClip rate must be positive, got {self.rate}")

    @property
    def seconds(self) -> float:
        return self.samples.size / self.rate


def read_wav(path) -> AudioClip:
    """Read a RIFF wav (16-bit PCM or float32). Stereo is averaged to mono."""
    path = Path(path)
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except Exception as exc:  # scipy raises ValueError on malformed RIFF
        raise InputError(f"cannot read wav '{path}': {exc}") from exc
    if data.ndim == 2:
        data = data.mean(axis=1)
    elif data.ndim != 1:
        raise InputError(f"wav '{path}' has unsupported layout {data.shape}")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise InputError(f"wav '{path}' has unsupported sample format {data.dtype}")
    return AudioClip(samples, int(rate))


def write_wav(path, clip: AudioClip) -> None:
    """Write 16-bit PCM."""
    scaled = np.round(np.clip(clip.samples, -1.0, 1.0) * 32767.0)
    wavfile.write(Path(path), clip.rate, scaled.astype(np.int16))


def resample(clip: AudioClip, rate: int) -> AudioClip:
    """Linear-interpolation sample rate conversion."""
    if rate <= 0:
        raise ConfigError(f"target rate must be positive, got {rate}")
    if rate == clip.rate:
        return clip
    n_out = int(round(clip.samples.size * rate / clip.rate))
    if clip.samples.size == 0:
        return AudioClip(np.zeros(0), rate)
    t_in = np.arange(clip.samples.size) / clip.rate
    t_out = np.arange(n_out) / rate
    return AudioClip(np.interp(t_out, t_in, clip.samples), rate)


def crop_or_pad(clip: AudioClip, seconds: float, rng: np.random.Generator | None = None) -> AudioClip:
    """Force exact length seconds*rate: zero-pad at the end, or crop.

    Cropping uses a random offset drawn from ``rng``; with rng=None (eval) the
    offset is 0.
    """
    target = int(round(seconds * clip.rate))
    n = clip.samples.size
    if n == target:
        return clip
    if n < target:
        return AudioClip(np.pad(clip.samples, (0, target - n)), clip.rate)
    offset = int(rng.integers(0, n - target + 1)) if rng is not None else 0
    return AudioClip(clip.samples[offset:offset + target].copy(), clip.rate)


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft_magnitude(samples: np.ndarray, window: int, hop: int) -> np.ndarray:
    """Centered magnitude STFT: (floor(n/hop)+1, window//2+1).

    The signal is reflect-padded by window//2 on both sides, so frame t is
    centered on sample t*hop.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if window < 2 or hop < 1:
        raise ConfigError(f"stft needs window >= 2 and hop >= 1, got {window}, {hop}")
    pad = window // 2
    if samples.size <= pad:
        raise InputError(f"signal of {samples.size} samples is too short for window {window}")
    x = np.pad(samples, (pad, pad), mode="reflect")
    n_frames = samples.size // hop + 1
    win = hann_window(window)
    starts = np.arange(n_frames) * hop
    idx = starts[:, None] + np.arange(window)[None, :]
    frames = x[idx] * win
    return np.abs(np.fft.rfft(frames, axis=1))


def _hz_to_mel(f):
    """Slaney scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    mel = f * 3.0 / 200.0
    log_region = f >= 1000.0
    with np.errstate(divide="ignore"):
        mel = np.where(log_region, 15.0 + 27.0 * np.log(np.maximum(f, 1e-30) / 1000.0) / np.log(6.4), mel)
    return mel


def _mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f = m * 200.0 / 3.0
    log_region = m >= 15.0
    return np.where(log_region, 1000.0 * np.exp(np.log(6.4) * (m - 15.0) / 27.0), f)


def mel_filterbank(n_mels: int, window: int, rate: int, fmin: float = 50.0, fmax: float | None = None) -> np.ndarray:
    """Triangular, area-normalized filterbank: (n_mels, window//2 + 1)."""
    if fmax is None:
        fmax = rate / 2.0
    if n_mels < 1:
        raise ConfigError(f"n_mels must be >= 1, got {n_mels}")
    if not (0.0 <= fmin < fmax <= rate / 2.0 + 1e-9):
        raise ConfigError(f"need 0 <= fmin < fmax <= rate/2, got fmin={fmin}, fmax={fmax}, rate={rate}")
    n_bins = window // 2 + 1
    bin_hz = np.arange(n_bins) * rate / window
    edges = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2))
    fb = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, center, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (bin_hz - lo) / max(center - lo, 1e-12)
        down = (hi - bin_hz) / max(hi - center, 1e-12)
        tri = np.maximum(0.0, np.minimum(up, down))
        fb[m] = tri * (2.0 / (hi - lo))  # area normalization
    return fb


@dataclass
class FeatureConfig:
    sample_rate: int = 16000
    window: int = 512
    hop: int = 160
    n_mels: int = 64
    fmin: float = 50.0
    fmax: float | None = None  # None -> rate/2
    clip_seconds: float = 10.0

    def __post_init__(self):
        if self.window < 2 or self.hop < 1:
            raise ConfigError(f"bad window/hop: {self.window}/{self.hop}")

    @property
    def frame_hz(self) -> float:
        return self.sample_rate / self.hop


def desk_features() -> FeatureConfig:
    return FeatureConfig(sample_rate=16000, window=512, hop=160, n_mels=64)


def fullscale_features() -> FeatureConfig:
    return FeatureConfig(sample_rate=44100, window=1024, hop=441, n_mels=64)


class MelSpectrogram:
    """Log-mel frontend bound to one FeatureConfig; reusable across clips."""

    def __init__(self, cfg: FeatureConfig):
        self.cfg = cfg
        self.filterbank = mel_filterbank(cfg.n_mels, cfg.window, cfg.sample_rate, cfg.fmin, cfg.fmax)

    def __call__(self, clip: AudioClip) -> np.ndarray:
        """(T, n_mels) log-mel; T = floor(n/hop) + 1."""
        if clip.rate != self.cfg.sample_rate:
            raise InputError(f"clip rate {clip.rate} != configured {self.cfg.sample_rate}; resample first")
        mag = stft_magnitude(clip.samples, self.cfg.window, self.cfg.hop)
        power = mag * mag
        mel = power @ self.filterbank.T
        return np.log(np.maximum(mel, LOG_FLOOR))
