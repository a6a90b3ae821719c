"""AdamW with decoupled weight decay and a warmup + cosine LR schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, TrainingError
from .tensor import Tensor

# parameter-name suffixes exempt from weight decay: biases, norm affines,
# recurrent biases, and the contrastive temperature
NO_DECAY_SUFFIXES = (".b", ".gain", ".shift", "b_ih", "b_hh", "log_tau")


@dataclass
class OptimConfig:
    peak_lr: float = 1e-4
    floor_lr: float = 1e-5
    warmup_iters: int = 6400
    total_iters: int = 64000
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    accumulation: int = 16
    batch_size: int = 8

    def __post_init__(self):
        if self.warmup_iters > self.total_iters:
            raise ConfigError(f"warmup_iters {self.warmup_iters} exceeds total_iters {self.total_iters}")
        for name in ("peak_lr", "floor_lr", "total_iters", "accumulation", "batch_size", "eps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.warmup_iters < 0 or self.weight_decay < 0:
            raise ConfigError("warmup_iters and weight_decay must be >= 0")
        b1, b2 = self.betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ConfigError(f"betas must lie in [0, 1), got {self.betas}")


def lr_at(iteration: int, cfg: OptimConfig) -> float:
    """Linear warmup to peak_lr, then cosine decay to floor_lr at total_iters."""
    it = max(0, int(iteration))
    if cfg.warmup_iters > 0 and it <= cfg.warmup_iters:
        return cfg.peak_lr * it / cfg.warmup_iters
    span = cfg.total_iters - cfg.warmup_iters
    progress = 1.0 if span == 0 else min(1.0, (it - cfg.warmup_iters) / span)
    return cfg.floor_lr + (cfg.peak_lr - cfg.floor_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def decays_weight(name: str) -> bool:
    return not name.endswith(NO_DECAY_SUFFIXES)


@dataclass
class _Slot:
    m: np.ndarray
    v: np.ndarray


class AdamW:
    """Decoupled-weight-decay Adam over named parameters.

    Parameters whose grad is None are skipped entirely for that step (no decay
    either), matching the convention that untouched parameters do not move.
    """

    def __init__(self, named_params: list[tuple[str, Tensor]], cfg: OptimConfig):
        if isinstance(named_params, dict):
            named_params = list(named_params.items())
        self.params = named_params
        self.cfg = cfg
        self.t = 0
        self.slots: dict[str, _Slot] = {
            name: _Slot(np.zeros_like(p.data), np.zeros_like(p.data)) for name, p in named_params
        }

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.cfg.betas
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient in parameter '{name}'")
            slot = self.slots[name]
            slot.m = b1 * slot.m + (1.0 - b1) * g
            slot.v = b2 * slot.v + (1.0 - b2) * g * g
            update = (slot.m / bc1) / (np.sqrt(slot.v / bc2) + self.cfg.eps)
            if self.cfg.weight_decay > 0.0 and decays_weight(name):
                p.data -= lr * self.cfg.weight_decay * p.data
            p.data -= lr * update

    def state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {"adamw.t": np.array(float(self.t))}
        for name, slot in self.slots.items():
            out[f"adamw.m.{name}"] = slot.m
            out[f"adamw.v.{name}"] = slot.v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["adamw.t"])
        for name in self.slots:
            self.slots[name] = _Slot(
                np.asarray(arrays[f"adamw.m.{name}"], dtype=np.float64).copy(),
                np.asarray(arrays[f"adamw.v.{name}"], dtype=np.float64).copy(),
            )
