"""Low-rank adapter baseline.

Each weight matrix ``W`` (in x out) gets factors ``A`` (in x r) and ``B``
(r x out) with ``W_eff = W + (scale / r) A B``. ``B`` starts at zero so the
adapted model initially equals the base. Only the factors train; the result
is merged back into a plain parameter store.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import TrainingDivergedError, ValidationError
from .models import ModelSpec, backward, forward_loss, layer_shapes, matrix_layers
from .optim import OptimConfig, OptimState, apply_update, lr_at
from .params import GradStore, ParamStore
from .training import TrainLog, steps_per_epoch


def _targets(spec: ModelSpec) -> dict[str, tuple[int, int]]:
    shapes = dict(layer_shapes(spec))
    return {name: shapes[name] for name in matrix_layers(spec)}


def init_factors(spec: ModelSpec, rank: int, seed: int) -> ParamStore:
    if rank < 1:
        raise ValidationError("lora rank must be >= 1")
    targets = _targets(spec)
    if not targets:
        raise ValidationError("model has no 2-D weight layers to adapt")
    rng = np.random.default_rng(seed)
    layers = []
    for name, (fan_in, fan_out) in targets.items():
        layers.append((f"{name}.lora_a", rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, rank)).reshape(-1)))
        layers.append((f"{name}.lora_b", np.zeros(rank * fan_out)))
    return ParamStore(layers)


def merge(base: ParamStore, factors: ParamStore, spec: ModelSpec, rank: int, scale: float) -> ParamStore:
    merged = base.copy()
    for name, (fan_in, fan_out) in _targets(spec).items():
        a = factors[f"{name}.lora_a"].reshape(fan_in, rank)
        b = factors[f"{name}.lora_b"].reshape(rank, fan_out)
        merged[name][...] += ((scale / rank) * (a @ b)).reshape(-1)
    return merged


def train_lora(
    base: ParamStore,
    spec: ModelSpec,
    dataset,
    optim: OptimConfig,
    rank: int,
    seed: int = 0,
    scale: float | None = None,
) -> tuple[ParamStore, TrainLog, ParamStore]:
    """Returns ``(merged params, log, factors)``; ``base`` is not modified."""
    scale = float(rank) if scale is None else scale
    factors = init_factors(spec, rank, seed)
    targets = _targets(spec)
    per_epoch = steps_per_epoch(len(dataset), optim.batch_size)
    total = per_epoch * optim.epochs
    state = OptimState(factors, optim, total)
    rng = np.random.default_rng(seed)
    log = TrainLog(seed=seed, config_hash=optim.digest())
    step = 0
    for _ in range(optim.epochs):
        order = rng.permutation(len(dataset))
        for b in range(per_epoch):
            batch = dataset.batch(order[b * optim.batch_size : (b + 1) * optim.batch_size])
            merged = merge(base, factors, spec, rank, scale)
            loss, cache = forward_loss(merged, spec, batch)
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"loss diverged at step {step}", step - 1 if step else None)
            grads = backward(cache)
            fgrads = GradStore.zeros_like(factors)
            for name, (fan_in, fan_out) in targets.items():
                dw = grads[name].reshape(fan_in, fan_out)
                a = factors[f"{name}.lora_a"].reshape(fan_in, rank)
                bm = factors[f"{name}.lora_b"].reshape(rank, fan_out)
                s = scale / rank
                fgrads[f"{name}.lora_a"][...] = (s * (dw @ bm.T)).reshape(-1)
                fgrads[f"{name}.lora_b"][...] = (s * (a.T @ dw)).reshape(-1)
            apply_update(factors, fgrads, state, step)
            log.records.append({"step": step, "loss": loss, "lr": lr_at(optim, step, state.total_steps)})
            step += 1
    return merge(base, factors, spec, rank, scale), log, factors
