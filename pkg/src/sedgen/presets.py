"""Ready-made run configurations for the two reference experiments.

Both presets use a 4 kHz / 3-second synthetic soundscape with four tonally
distinct classes, small enough that the whole pipeline (rendering, features,
training, autoregressive decoding) runs on a laptop CPU in minutes while
still exercising every component at full fidelity.

``overfit_preset`` memorizes 16 clips — the capability check that training
can drive train-set event-F1 to ~1 within a 2000-step budget.
``desk_preset`` trains on 256 clips and validates on 64 held-out clips — the
generalization check. Returned values are plain JSON-ready dicts so they can
be written to disk and fed back through the config loader unchanged.
"""

from __future__ import annotations

from pathlib import Path

# Four classes with well-separated spectral signatures at a 2 kHz Nyquist:
# a pure tone, an upward chirp, an amplitude-modulated tone, and band noise.
LOW_RATE_CLASSES = [
    {"name": "Beep", "renderer": "sine", "base_hz": 330.0},
    {"name": "Chirp", "renderer": "chirp", "base_hz": 550.0},
    {"name": "Buzz", "renderer": "am", "base_hz": 220.0},
    {"name": "Hiss", "renderer": "noise", "base_hz": 1200.0},
]


def overfit_preset(root) -> dict:
    """16-clip memorization run: windowed-transformer encoder, 2000-step cap."""
    root = Path(root)
    return {
        "data": {
            "classes": LOW_RATE_CLASSES,
            "sample_rate": 4000,
            "clip_seconds": 3.0,
            "train_clips": 16,
            "val_clips": 0,
            "events_per_clip": [1, 2],
            "event_seconds": [0.4, 1.0],
            "out_dir": str(root / "data"),
            "manifest": str(root / "data" / "manifest.json"),
        },
        "features": {"sample_rate": 4000, "clip_seconds": 3.0},
        "encoder": {
            "kind": "htsat_lite", "model_dim": 64, "patch": 4, "window": 4,
            "stages": 2, "heads": 4, "gru_hidden": 64, "out_frames": 19,
            "d_shared": 64, "clip_seconds": 3.0,
        },
        "decoder": {
            "layers": 2, "heads": 4, "d_model": 64, "ffn_dim": 128,
            "dropout": 0.0, "max_len": 32, "mode": "bert",
        },
        "optim": {
            "peak_lr": 1e-3, "floor_lr": 1e-5, "warmup_iters": 200,
            "total_iters": 2000, "weight_decay": 0.0,
            "accumulation": 1, "batch_size": 4,
        },
        "train": {"epochs": 500},
        "decode": {"strategy": "greedy", "constrained": True, "max_len": 32},
        "seed": 0,
        "out_dir": str(root / "run"),
    }


def desk_preset(root) -> dict:
    """256 train / 64 val generalization run with shift augmentation."""
    root = Path(root)
    return {
        "data": {
            "classes": LOW_RATE_CLASSES,
            "sample_rate": 4000,
            "clip_seconds": 3.0,
            "train_clips": 256,
            "val_clips": 64,
            "events_per_clip": [1, 2],
            "event_seconds": [0.4, 1.0],
            "out_dir": str(root / "data"),
            "manifest": str(root / "data" / "manifest.json"),
        },
        "features": {"sample_rate": 4000, "clip_seconds": 3.0},
        "encoder": {
            "kind": "htsat_lite", "model_dim": 64, "patch": 4, "window": 4,
            "stages": 2, "heads": 4, "gru_hidden": 64, "out_frames": 19,
            "d_shared": 64, "clip_seconds": 3.0,
        },
        "decoder": {
            "layers": 2, "heads": 4, "d_model": 64, "ffn_dim": 128,
            "dropout": 0.1, "max_len": 32, "mode": "bert",
        },
        "optim": {
            "peak_lr": 1e-3, "floor_lr": 1e-5, "warmup_iters": 200,
            "total_iters": 4000, "weight_decay": 0.01,
            "accumulation": 1, "batch_size": 8,
        },
        "train": {"epochs": 100, "augment": True, "max_shift_seconds": 0.5,
                  "patience": 10},
        "decode": {"strategy": "greedy", "constrained": True, "max_len": 32},
        "seed": 0,
        "out_dir": str(root / "run"),
    }
