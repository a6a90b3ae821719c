"""Training objectives: bidirectional contrastive loss, caption CE, joint sum.

The contrastive term averages, over the batch, the negative log-probability of
each matched audio/text pair under both softmax directions (audio-to-text rows
and text-to-audio rows). The caption term is mean negative log-likelihood over
non-PAD target positions, with optional label smoothing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .nn import Module
from .tensor import Tensor, add, as_tensor, div, exp, log_softmax, matmul, mean, mul, stack, sum_, transpose


@dataclass
class LossConfig:
    temperature: float = 0.07
    learnable_temperature: bool = False
    ce_weight: float = 1.0
    con_weight: float = 1.0
    label_smoothing: float = 0.0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.ce_weight < 0 or self.con_weight < 0:
            raise ConfigError(f"loss weights must be >= 0, got {self.ce_weight}, {self.con_weight}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")


class TemperatureParam(Module):
    """Optional learnable temperature, parameterized as log(tau) so tau > 0."""

    def __init__(self, initial: float):
        if initial <= 0:
            raise ConfigError(f"temperature must be > 0, got {initial}")
        self.log_tau = Tensor(np.array(np.log(initial)), requires_grad=True)

    def value(self) -> Tensor:
        return exp(self.log_tau)


def contrastive_loss(audio_pooled: Tensor, text_pooled: Tensor, tau) -> Tensor:
    """Batch-paired InfoNCE in both directions; see module docstring.

    Inputs are (N, D) with unit-norm rows (checked to 1e-6); tau is a float or
    a scalar Tensor (learnable temperature).
    """
    a, t = as_tensor(audio_pooled), as_tensor(text_pooled)
    if a.ndim != 2 or a.shape != t.shape:
        raise ContractError(f"expected matching (N, D) embeddings, got {a.shape} and {t.shape}")
    n = a.shape[0]
    for name, x in (("audio", a), ("text", t)):
        norms = np.linalg.norm(x.data, axis=1)
        worst = float(np.max(np.abs(norms - 1.0)))
        if worst > 1e-6:
            raise ContractError(f"{name} embeddings are not unit-norm (max deviation {worst:.3e})")
    sim = matmul(a, transpose(t, (1, 0)))  # (N, N): row i = audio_i vs all texts
    if isinstance(tau, Tensor):
        sim = div(sim, tau)
    else:
        sim = mul(sim, 1.0 / float(tau))
    eye = Tensor(np.eye(n))
    a2t = sum_(mul(log_softmax(sim, axis=1), eye))  # sum_i log p(text_i | audio_i)
    t2a = sum_(mul(log_softmax(transpose(sim, (1, 0)), axis=1), eye))
    return mul(add(a2t, t2a), -1.0 / n)


def ce_loss(logits: Tensor, targets, pad_id: int, label_smoothing: float = 0.0) -> Tensor:
    """Mean NLL of targets under logits rows, skipping PAD positions.

    With label smoothing s, each position's target distribution is
    (1-s)*one_hot + s/V uniform.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.ndim != 1 or logits.shape[0] != targets.size:
        raise ContractError(f"logits {logits.shape} do not align with targets {targets.shape}")
    n, v = logits.shape
    if np.any((targets < 0) | (targets >= v)):
        raise ContractError("target id outside vocabulary")
    keep = targets != pad_id
    if not keep.any():
        raise ContractError("all target positions are PAD; nothing to supervise")
    onehot = np.zeros((n, v))
    onehot[np.arange(n), targets] = 1.0
    q = (1.0 - label_smoothing) * onehot + label_smoothing / v
    q *= keep[:, None]  # PAD rows contribute zero
    logp = log_softmax(logits, axis=1)
    total = sum_(mul(logp, Tensor(q)))
    return mul(total, -1.0 / float(keep.sum()))


def total_loss(ce: Tensor, con: Tensor, cfg: LossConfig) -> Tensor:
    return add(mul(ce, cfg.ce_weight), mul(con, cfg.con_weight))


def bce_logits_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy with logits (multi-label clip presence).

    Uses the stable form log(1+e^z) - y*z = softplus via log_softmax on
    stacked [0, z] pairs.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.float64)
    if logits.shape != targets.shape:
        raise ContractError(f"logits {logits.shape} do not align with targets {targets.shape}")
    pair = stack([mul(logits, 0.0), logits], axis=-1)  # (..., 2): [0, z]
    logp = log_softmax(pair, axis=-1)  # [..., 0] = -softplus(z), [..., 1] = z - softplus(z)
    picked = add(
        mul(logp[..., 1], Tensor(targets)),
        mul(logp[..., 0], Tensor(1.0 - targets)),
    )
    return mul(mean(picked), -1.0)
