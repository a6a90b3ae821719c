"""Synthetic strongly-labeled audio scenes.

Each class is tied to one parametric renderer (sine, linear chirp, AM tone,
band-limited noise burst, harmonic stack) at a class-specific base frequency,
so classes are spectrally separable by construction. Clips are a pink-noise
floor plus events at exact, known times; ground truth is therefore exact.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dsp import AudioClip, write_wav
from .errors import ConfigError, InputError
from .vocab import Event, default_classes

RENDERERS = ("sine", "chirp", "am", "noise", "harmonic")
FADE_SECONDS = 0.010
MIN_EVENT_SECONDS = 0.25  # events shorter than this are dropped by augmentation
PEAK_NORM = 0.9

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class ClassSpec:
    name: str
    renderer: str
    base_hz: float

    def __post_init__(self):
        if self.renderer not in RENDERERS:
            raise ConfigError(f"unknown renderer {self.renderer!r}; choose from {RENDERERS}")
        if self.base_hz <= 0:
            raise ConfigError(f"base_hz must be positive, got {self.base_hz}")


@dataclass
class SceneSpec:
    classes: list[ClassSpec] = field(default_factory=lambda: default_scene_classes())
    sample_rate: int = 16000
    clip_seconds: float = 10.0
    events_per_clip: tuple[int, int] = (1, 4)
    event_seconds: tuple[float, float] = (0.5, 3.0)
    snr_db: tuple[float, float] = (6.0, 20.0)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.events_per_clip
        if not (0 <= lo <= hi):
            raise ConfigError(f"events_per_clip range {self.events_per_clip} is not ordered")
        dlo, dhi = self.event_seconds
        if not (0.0 < dlo <= dhi <= self.clip_seconds):
            raise ConfigError(f"event_seconds range {self.event_seconds} does not fit the clip")
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate class names: {names}")
        for c in self.classes:
            if c.base_hz >= self.sample_rate / 2:
                raise ConfigError(f"class {c.name} base {c.base_hz} Hz is above Nyquist")

    @property
    def class_names(self) -> list[str]:
        return [c.name for c in self.classes]


def default_scene_classes() -> list[ClassSpec]:
    names = default_classes()
    return [
        ClassSpec(names[0], "sine", 440.0),
        ClassSpec(names[1], "chirp", 900.0),
        ClassSpec(names[2], "am", 220.0),
        ClassSpec(names[3], "noise", 4000.0),
    ]


def _cosine_fade(x: np.ndarray, rate: int) -> np.ndarray:
    n_fade = min(int(FADE_SECONDS * rate), x.size // 2)
    if n_fade < 1:
        return x
    ramp = 0.5 * (1.0 - np.cos(np.pi * np.arange(n_fade) / n_fade))
    x[:n_fade] *= ramp
    x[-n_fade:] *= ramp[::-1]
    return x


def render_event(spec: ClassSpec, seconds: float, rate: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-peak waveform for one event, with cosine fades at both ends."""
    n = int(round(seconds * rate))
    if n < 2:
        raise InputError(f"event of {seconds}s is too short to render at {rate} Hz")
    t = np.arange(n) / rate
    f = spec.base_hz
    phase = rng.uniform(0.0, 2.0 * np.pi)
    if spec.renderer == "sine":
        x = np.sin(2 * np.pi * f * t + phase)
    elif spec.renderer == "chirp":
        # linear sweep f -> 2f across the event
        sweep = f * t + 0.5 * (f / seconds) * t * t
        x = np.sin(2 * np.pi * sweep + phase)
    elif spec.renderer == "am":
        x = np.sin(2 * np.pi * f * t + phase) * (0.55 + 0.45 * np.sin(2 * np.pi * 8.0 * t))
    elif spec.renderer == "noise":
        x = _bandpass_noise(n, rate, f, rng)
    elif spec.renderer == "harmonic":
        x = np.zeros(n)
        k = 1
        while k <= 5 and k * f < rate / 2:
            x += np.sin(2 * np.pi * k * f * t + k * phase) / k
            k += 1
    else:  # pragma: no cover - ClassSpec validates
        raise ConfigError(spec.renderer)
    peak = np.max(np.abs(x))
    if peak > 0:
        x = x / peak
    return _cosine_fade(x, rate)


def _bandpass_noise(n: int, rate: int, center: float, rng: np.random.Generator) -> np.ndarray:
    white = rng.normal(size=n)
    spectrum = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, 1.0 / rate)
    lo, hi = center / np.sqrt(2.0), min(center * np.sqrt(2.0), rate / 2.0)
    spectrum[(freqs < lo) | (freqs > hi)] = 0.0
    return np.fft.irfft(spectrum, n)


def pink_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    """1/f-power noise via spectral shaping, unit RMS."""
    white = rng.normal(size=n)
    spectrum = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n)
    shape = np.ones_like(freqs)
    shape[1:] = 1.0 / np.sqrt(freqs[1:])
    shape[0] = 0.0
    x = np.fft.irfft(spectrum * shape, n)
    return x / max(np.sqrt(np.mean(x * x)), 1e-30)


def synthesize_clip(spec: SceneSpec, rng: np.random.Generator) -> tuple[AudioClip, list[Event], np.ndarray]:
    """One scene: (clip, ground-truth events, clean event track before noise).

    Event count is uniform over events_per_clip, onsets uniform wherever the
    event fits, per-event SNR uniform over snr_db relative to the noise floor.
    The mix is peak-normalized to 0.9.
    """
    n = int(round(spec.clip_seconds * spec.sample_rate))
    noise = pink_noise(n, rng) * 0.05  # floor RMS; events are scaled relative to it
    clean = np.zeros(n)
    events: list[Event] = []
    lo, hi = spec.events_per_clip
    for _ in range(int(rng.integers(lo, hi + 1))):
        cls = spec.classes[int(rng.integers(len(spec.classes)))]
        seconds = float(rng.uniform(*spec.event_seconds))
        onset = float(rng.uniform(0.0, spec.clip_seconds - seconds))
        snr = float(rng.uniform(*spec.snr_db))
        wave = render_event(cls, seconds, spec.sample_rate, rng)
        rms = np.sqrt(np.mean(wave * wave))
        target_rms = 0.05 * (10.0 ** (snr / 20.0))
        wave = wave * (target_rms / max(rms, 1e-30))
        start = int(round(onset * spec.sample_rate))
        clean[start:start + wave.size] += wave
        events.append(Event(cls.name, start / spec.sample_rate, (start + wave.size) / spec.sample_rate))
    mix = clean + noise
    peak = np.max(np.abs(mix))
    if peak > 0:
        mix = mix * (PEAK_NORM / peak)
    return AudioClip(mix, spec.sample_rate), sorted(events, key=lambda e: (e.onset, e.label, e.offset)), clean


def shift_augment(
    samples: np.ndarray,
    events: list[Event],
    clip_seconds: float,
    rate: int,
    max_shift: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, list[Event]]:
    """Shift audio and labels together by a uniform random offset.

    The shift is non-circular (vacated samples are zero); events are clipped
    to the clip bounds and dropped entirely if less than 0.25 s survives.
    """
    if max_shift < 0:
        raise ConfigError(f"max_shift must be >= 0, got {max_shift}")
    delta = float(rng.uniform(-max_shift, max_shift))
    k = int(round(delta * rate))
    delta = k / rate  # quantize to whole samples so audio and labels agree
    out = np.zeros_like(samples)
    if k >= 0:
        out[k:] = samples[:samples.size - k] if k else samples
    else:
        out[:k] = samples[-k:]
    shifted: list[Event] = []
    for ev in events:
        onset = max(0.0, ev.onset + delta)
        offset = min(clip_seconds, ev.offset + delta)
        if offset - onset >= MIN_EVENT_SECONDS:
            shifted.append(Event(ev.label, onset, offset))
    return out, shifted


# ---------------------------------------------------------------------------
# dataset generation and the JSON manifest


def generate_dataset(spec: SceneSpec, out_dir, counts: dict[str, int], config_hash: str = "") -> Path:
    """Render clips per split and write manifest.json; returns its path.

    Per-clip RNG streams are keyed by (seed, split index, clip index), so the
    same spec always reproduces the same data and splits never share streams.
    """
    out_dir = Path(out_dir)
    (out_dir / "wavs").mkdir(parents=True, exist_ok=True)
    clips = []
    for split, count in counts.items():
        if split not in SPLITS:
            raise ConfigError(f"unknown split {split!r}; use {SPLITS}")
        split_idx = SPLITS.index(split)
        for i in range(count):
            rng = np.random.default_rng([spec.seed, split_idx, i])
            clip, events, _ = synthesize_clip(spec, rng)
            clip_id = f"{split}_{i:05d}"
            rel = f"wavs/{clip_id}.wav"
            write_wav(out_dir / rel, clip)
            clips.append(
                {
                    "id": clip_id,
                    "split": split,
                    "wav_path": rel,
                    "events": [
                        {"label": e.label, "onset": round(e.onset, 6), "offset": round(e.offset, 6)}
                        for e in events
                    ],
                }
            )
    manifest = {
        "classes": spec.class_names,
        "sample_rate": spec.sample_rate,
        "clip_seconds": spec.clip_seconds,
        "seed": spec.seed,
        "config_hash": config_hash,
        "scene": {
            "classes": [asdict(c) for c in spec.classes],
            "events_per_clip": list(spec.events_per_clip),
            "event_seconds": list(spec.event_seconds),
            "snr_db": list(spec.snr_db),
        },
        "clips": clips,
    }
    path = out_dir / "manifest.json"
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return path


def load_manifest(path) -> dict:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as f:
            manifest = json.load(f)
    except json.JSONDecodeError as exc:
        raise InputError(f"manifest '{path}' is not valid JSON: {exc}") from exc
    for key in ("classes", "clips", "sample_rate", "clip_seconds"):
        if key not in manifest:
            raise InputError(f"manifest '{path}' is missing the '{key}' field")
    for clip in manifest["clips"]:
        for key in ("id", "split", "wav_path", "events"):
            if key not in clip:
                raise InputError(f"manifest clip entry missing '{key}': {clip}")
    return manifest


def manifest_events(clip_entry: dict) -> list[Event]:
    return [Event(e["label"], float(e["onset"]), float(e["offset"])) for e in clip_entry["events"]]
