"""Datasets, the deterministic training loop, gradient checking and decoding."""

from __future__ import annotations

import hashlib
import json
import math
import time
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from . import vocab
from .errors import TrainingDivergedError, ValidationError
from .models import Batch, ModelSpec, backward, decay_layers, forward_loss, logits
from .optim import OptimConfig, OptimState, apply_update
from .params import ParamStore


class SeqDataset:
    """Prompt/answer pairs as token sequences; loss covers answer + end token."""

    def __init__(self, examples: Sequence[tuple[np.ndarray, int]]):
        if not examples:
            raise ValidationError("dataset is empty")
        self.examples = list(examples)

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[str, str]], context_len: int | None = None) -> SeqDataset:
        out = []
        for prompt, answer in pairs:
            toks = vocab.encode(prompt + answer) + [vocab.END_ID]
            if context_len is not None and len(toks) - 1 > context_len:
                raise ValidationError(f"example of {len(toks) - 1} tokens exceeds context_len {context_len}")
            out.append((np.asarray(toks, dtype=np.int64), len(prompt)))
        return cls(out)

    @classmethod
    def from_cases(cls, cases, context_len: int | None = None) -> SeqDataset:
        return cls.from_pairs([(c.prompt, c.ground_truth) for c in cases], context_len)

    def __len__(self) -> int:
        return len(self.examples)

    def subset(self, indices) -> SeqDataset:
        return SeqDataset([self.examples[i] for i in indices])

    def batch(self, indices) -> Batch:
        rows = [self.examples[i] for i in indices]
        T = max(len(t) for t, _ in rows) - 1
        inputs = np.full((len(rows), T), vocab.END_ID, dtype=np.int64)
        targets = np.full((len(rows), T), -1, dtype=np.int64)
        for r, (toks, plen) in enumerate(rows):
            n = len(toks) - 1
            inputs[r, :n] = toks[:-1]
            targets[r, plen - 1 : n] = toks[plen:]
        return Batch(inputs, targets)


class ArrayDataset:
    """Dense features with integer labels, for ``mlp_smoke``."""

    def __init__(self, features: np.ndarray, labels: np.ndarray):
        if len(features) == 0:
            raise ValidationError("dataset is empty")
        self.features = np.asarray(features, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.features)

    def subset(self, indices) -> ArrayDataset:
        idx = np.asarray(indices)
        return ArrayDataset(self.features[idx], self.labels[idx])

    def batch(self, indices) -> Batch:
        idx = np.asarray(indices)
        return Batch(self.features[idx], self.labels[idx])


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    wall_time: float = 0.0
    seed: int = 0
    config_hash: str = ""

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.records]

    def to_ndjson(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_ndjson())

    @classmethod
    def load(cls, path) -> TrainLog:
        with open(path, encoding="utf-8") as fh:
            return cls([json.loads(line) for line in fh if line.strip()])


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def train(
    params: ParamStore,
    spec: ModelSpec,
    dataset,
    optim: OptimConfig,
    mask=None,
    seed: int = 0,
    max_steps: int | None = None,
) -> tuple[ParamStore, TrainLog]:
    """Train a copy of ``params``; the input store is never modified.

    Batches come from a per-epoch permutation drawn from ``seed``. With a
    mask, coordinates outside its support are left bit-identical.
    """
    if len(dataset) == 0:
        raise ValidationError("dataset is empty")
    p = params.copy()
    if mask is not None:
        mask.check_layout(p)
    per_epoch = steps_per_epoch(len(dataset), optim.batch_size)
    total = per_epoch * optim.epochs
    if max_steps is not None:
        total = min(total, max_steps)
    state = OptimState(p, optim, total, decay_layers(spec))
    rng = np.random.default_rng(seed)
    log = TrainLog(seed=seed, config_hash=optim.digest())
    started = time.perf_counter()
    step = 0
    for _ in range(optim.epochs):
        order = rng.permutation(len(dataset))
        for b in range(per_epoch):
            if step >= total:
                break
            batch = dataset.batch(order[b * optim.batch_size : (b + 1) * optim.batch_size])
            loss, cache = forward_loss(p, spec, batch)
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"loss diverged at step {step}", step - 1 if step else None)
            grads = backward(cache)
            apply_update(p, grads, state, step, mask)
            log.records.append({"step": step, "loss": loss, "lr": _lr(state, step)})
            step += 1
    if not p.is_finite():
        raise TrainingDivergedError("non-finite parameters after training", step - 1)
    log.wall_time = time.perf_counter() - started
    return p, log


def _lr(state: OptimState, step: int) -> float:
    from .optim import lr_at

    return lr_at(state.cfg, step, state.total_steps)


def grad_check(
    params: ParamStore,
    spec: ModelSpec,
    batch: Batch,
    fd_step: float = 1e-5,
    max_params: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Checks every parameter, or ``max_params`` sampled uniformly without
    replacement. Relative error is ``|a - n| / max(|a|, |n|, 1e-12)``.
    """
    if not fd_step > 0:
        raise ValidationError("fd_step must be > 0")
    p = params.copy()
    _, cache = forward_loss(p, spec, batch)
    analytic = backward(cache)
    coords = [(name, j) for name, size in p.layout() for j in range(size)]
    if max_params is not None and max_params < len(coords):
        pick = np.random.default_rng(seed).choice(len(coords), size=max_params, replace=False)
        coords = [coords[i] for i in np.sort(pick)]
    worst = 0.0
    for name, j in coords:
        orig = p[name][j]
        hi, lo = orig + fd_step, orig - fd_step
        p[name][j] = hi
        lp, _ = forward_loss(p, spec, batch)
        p[name][j] = lo
        lm, _ = forward_loss(p, spec, batch)
        p[name][j] = orig
        if not (math.isfinite(lp) and math.isfinite(lm)):
            raise TrainingDivergedError(f"non-finite loss while perturbing {name}[{j}]")
        # divide by the step actually representable around orig
        num = (lp - lm) / (hi - lo)
        a = analytic[name][j]
        err = abs(a - num) / max(abs(a), abs(num), 1e-12)
        worst = max(worst, err)
    return worst


def decode_greedy(params: ParamStore, spec: ModelSpec, prompt: str | Sequence[int], max_len: int) -> str:
    """Argmax decoding until the end token or ``max_len`` characters."""
    return decode_batch(params, spec, [prompt], max_len)[0]


DECODE_CHUNK = 256


def decode_batch(params: ParamStore, spec: ModelSpec, prompts: Sequence, max_len: int) -> list[str]:
    """Greedy decoding of many prompts in lockstep.

    Sequences are right-padded; causal attention means the padding never
    influences the position being decoded. Ties go to the lowest token id.
    Prompts are processed in fixed-size chunks to bound memory.
    """
    out: list[str] = []
    for i in range(0, len(prompts), DECODE_CHUNK):
        out += _decode_chunk(params, spec, prompts[i : i + DECODE_CHUNK], max_len)
    return out


def _decode_chunk(params: ParamStore, spec: ModelSpec, prompts: Sequence, max_len: int) -> list[str]:
    if not prompts:
        return []
    toks = [vocab.encode(p) if isinstance(p, str) else list(p) for p in prompts]
    for t in toks:
        if len(t) >= spec.context_len:
            raise ValidationError(f"prompt of {len(t)} tokens does not fit context_len {spec.context_len}")
        if not t:
            raise ValidationError("empty prompt")
    n = len(toks)
    lens = np.array([len(t) for t in toks])
    width = min(spec.context_len, int(lens.max()) + max(max_len, 0))
    buf = np.full((n, max(width, int(lens.max()))), vocab.END_ID, dtype=np.int64)
    for i, t in enumerate(toks):
        buf[i, : len(t)] = t
    out: list[list[int]] = [[] for _ in range(n)]
    alive = np.ones(n, dtype=bool)
    cur = lens.copy()
    for _ in range(max(max_len, 0)):
        alive &= cur < spec.context_len
        if not alive.any():
            break
        rows = np.flatnonzero(alive)
        T = int(cur[rows].max())
        z = logits(params, spec, buf[rows, :T])
        nxt = z[np.arange(len(rows)), cur[rows] - 1].argmax(-1)
        for r, tok in zip(rows, nxt):
            if tok == vocab.END_ID:
                alive[r] = False
                continue
            out[r].append(int(tok))
            buf[r, cur[r]] = tok
            cur[r] += 1
    return [vocab.decode(o) for o in out]


def config_hash(*parts) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
