"""AdamW with warmup + cosine schedule and Hadamard gradient masking."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .errors import LayoutMismatchError, TrainingDivergedError, ValidationError
from .params import GradStore, ParamStore, check_layout

SCHEDULES = ("cosine", "constant")


@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float = 1e-2
    weight_decay: float = 0.05
    warmup_ratio: float = 0.03
    schedule: str = "cosine"
    epochs: int = 1
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate: must be > 0")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValidationError("warmup_ratio: must be in [0, 1)")
        if self.batch_size < 1:
            raise ValidationError("batch_size: must be >= 1")
        if self.epochs < 1:
            raise ValidationError("epochs: must be >= 1")
        if self.schedule not in SCHEDULES:
            raise ValidationError(f"schedule: expected one of {SCHEDULES}")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay: must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def with_(self, **kw) -> OptimConfig:
        return replace(self, **kw)


PRESETS = {
    # values from the 8B fine-tuning recipe; stalls desk-scale models
    "paper-scale": OptimConfig(learning_rate=3e-5, weight_decay=0.05, warmup_ratio=0.03, epochs=1, batch_size=12),
    "toy": OptimConfig(learning_rate=1e-2, weight_decay=0.05, warmup_ratio=0.03, epochs=1, batch_size=16),
}


def lr_at(cfg: OptimConfig, step: int, total_steps: int) -> float:
    """Learning rate for 0-based ``step`` of ``total_steps``: linear warmup, then cosine or flat."""
    warm = math.ceil(cfg.warmup_ratio * total_steps)
    if step < warm:
        return cfg.learning_rate * (step + 1) / warm
    if cfg.schedule == "constant":
        return cfg.learning_rate
    span = max(1, total_steps - warm)
    progress = min(1.0, (step - warm) / span)
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


class OptimState:
    """First/second moments plus the update counter."""

    def __init__(self, params: ParamStore, cfg: OptimConfig, total_steps: int, decay: set[str] | None = None):
        self.cfg = cfg
        self.total_steps = max(1, total_steps)
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.decay = set(params.names) if decay is None else set(decay)
        self.t = 0


def apply_update(
    params: ParamStore,
    grads: GradStore,
    state: OptimState,
    step: int,
    mask=None,
) -> None:
    """One AdamW step in place.

    With a mask, gradients are multiplied elementwise by the binary mask; in
    practice only the unfrozen coordinates are touched, so frozen parameters
    and their moments stay bit-identical (no decay, no moment drift).
    """
    check_layout(params, grads, "parameter/gradient layouts")
    if mask is not None:
        mask.check_layout(params)
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingDivergedError(f"non-finite gradient in layer {name!r} at step {step}", step - 1)
    cfg = state.cfg
    lr = lr_at(cfg, step, state.total_steps)
    state.t += 1
    bc1 = 1.0 - cfg.beta1**state.t
    bc2 = 1.0 - cfg.beta2**state.t
    for name, p in params.items():
        idx = None if mask is None else mask.indices(name)
        if idx is not None and idx.size == 0:
            continue
        wd = cfg.weight_decay if name in state.decay else 0.0
        m, v = state.m[name], state.v[name]
        if idx is None:
            g = grads[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            p -= lr * ((m / bc1) / (np.sqrt(v / bc2) + cfg.eps) + wd * p)
        else:
            g = grads[name][idx]
            mi = cfg.beta1 * m[idx] + (1.0 - cfg.beta1) * g
            vi = cfg.beta2 * v[idx] + (1.0 - cfg.beta2) * g * g
            m[idx] = mi
            v[idx] = vi
            pi = p[idx]
            p[idx] = pi - lr * ((mi / bc1) / (np.sqrt(vi / bc2) + cfg.eps) + wd * pi)
    params.bump()


def masked_gradient(grads: GradStore, mask) -> GradStore:
    """Hadamard product of gradients with the binary mask."""
    out = GradStore.zeros_like(grads)
    for name in grads:
        idx = mask.indices(name)
        out[name][idx] = grads[name][idx]
    return out


__all__ = [
    "OptimConfig",
    "OptimState",
    "PRESETS",
    "apply_update",
    "lr_at",
    "masked_gradient",
    "LayoutMismatchError",
]
