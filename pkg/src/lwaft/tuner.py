"""LW-AFT orchestration, baselines and retention reports.

The pipeline: fully fine-tune a copy of the base on an ``alpha`` fraction of
the target data (the expert), take per-parameter ``|expert - base|``, plan a
layer-budgeted top-k mask from it, then fine-tune the *base* on the full
target data with gradients masked to that plan.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from collections.abc import Sequence
from dataclasses import dataclass, field, replace

import numpy as np

from .delta import DeltaStats, param_delta
from .errors import BudgetError, ValidationError
from .lora import train_lora
from .masks import (
    BudgetConfig,
    MaskPlan,
    build_mask_plan,
    global_topk_plan,
    layer_uniform_plan,
    random_plan_like,
)
from .models import ModelSpec
from .optim import OptimConfig
from .params import ParamStore, check_layout
from .scoring import BenchReport, score_predictions
from .tasks import TaskCase, TaskSuite, gen_suite, TASK_TYPES
from .training import SeqDataset, TrainLog, decode_batch, train

METHODS = ("lwaft", "full", "lora", "random_mask", "global_topk", "layer_uniform")
MASKED_METHODS = ("lwaft", "random_mask", "global_topk", "layer_uniform")


@dataclass(frozen=True)
class FreezeTuneConfig:
    alpha: float = 0.1
    budget: BudgetConfig = field(default_factory=lambda: BudgetConfig(freeze_rate=0.99))
    method: str = "lwaft"
    lora_rank: int = 2
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValidationError("alpha: must be in (0, 1]")
        if self.method not in METHODS:
            raise ValidationError(f"method: expected one of {METHODS}")
        if self.method == "lora" and self.lora_rank < 1:
            raise ValidationError("lora_rank: must be >= 1")

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "budget": self.budget.to_dict(),
            "method": self.method,
            "lora_rank": self.lora_rank,
            "optim": self.optim.to_dict(),
            "seed": self.seed,
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def with_(self, **kw) -> FreezeTuneConfig:
        return replace(self, **kw)


def _derived_seed(seed: int, label: str) -> int:
    h = hashlib.blake2b(f"{seed}:{label}".encode(), digest_size=8).digest()
    return int.from_bytes(h, "little") & ((1 << 63) - 1)


def expert_subset(n: int, alpha: float, seed: int) -> np.ndarray:
    """Seeded shuffle, then the first ``ceil(alpha * n)`` indices (sorted)."""
    if n == 0:
        raise ValidationError("empty expert subset: dataset has no examples")
    if not 0.0 < alpha <= 1.0:
        raise ValidationError("alpha must be in (0, 1]")
    if alpha * n < 1:
        warnings.warn(f"alpha={alpha} of {n} examples rounds up to a single example", stacklevel=2)
    size = math.ceil(alpha * n)
    perm = np.random.default_rng(_derived_seed(seed, "expert-subset")).permutation(n)
    return np.sort(perm[:size])


def train_expert(
    base: ParamStore, spec: ModelSpec, dataset, alpha: float, optim: OptimConfig, seed: int = 0
) -> tuple[ParamStore, TrainLog, np.ndarray]:
    """Full fine-tune of a copy of ``base`` on an ``alpha`` subset."""
    subset = expert_subset(len(dataset), alpha, seed)
    expert, log = train(base, spec, dataset.subset(subset), optim, seed=_derived_seed(seed, "expert"))
    return expert, log, subset


def lwaft_finetune(
    base: ParamStore, spec: ModelSpec, mask: MaskPlan, dataset, optim: OptimConfig, seed: int = 0
) -> tuple[ParamStore, TrainLog]:
    """Masked fine-tune starting from the base parameters."""
    mask.check_layout(base)
    if mask.total_unfrozen == 0:
        raise BudgetError("mask leaves no parameter unfrozen")
    return train(base, spec, dataset, optim, mask=mask, seed=seed)


@dataclass
class TuneResult:
    params: ParamStore
    method: str
    log: TrainLog
    mask: MaskPlan | None = None
    expert: ParamStore | None = None
    stats: DeltaStats | None = None
    expert_log: TrainLog | None = None
    extra: dict = field(default_factory=dict)


def plan_from_expert(
    base: ParamStore, spec: ModelSpec, dataset, cfg: FreezeTuneConfig
) -> tuple[MaskPlan, ParamStore, DeltaStats, TrainLog]:
    expert, elog, subset = train_expert(base, spec, dataset, cfg.alpha, cfg.optim, cfg.seed)
    stats = param_delta(base, expert)
    run_id = f"expert-{expert.digest()[:12]}"
    plan = build_mask_plan(stats, cfg.budget, {"expert_run_id": run_id, "alpha": cfg.alpha,
                                               "expert_subset_size": int(subset.size)})
    return plan, expert, stats, elog


def baseline_finetune(
    base: ParamStore,
    spec: ModelSpec,
    method: str,
    dataset,
    cfg: FreezeTuneConfig,
    stats: DeltaStats | None = None,
    lwaft_plan: MaskPlan | None = None,
) -> TuneResult:
    """Fine-tune with one of the comparison methods.

    ``random_mask`` needs the LW-AFT plan (for its per-layer counts);
    ``global_topk`` and ``layer_uniform`` need expert deltas. Missing inputs
    are computed with an expert run.
    """
    if method == "lwaft" or method not in METHODS:
        raise ValidationError(f"not a baseline method: {method!r}")
    if method == "full":
        params, log = train(base, spec, dataset, cfg.optim, seed=cfg.seed)
        return TuneResult(params, method, log)
    if method == "lora":
        params, log, _ = train_lora(base, spec, dataset, cfg.optim, cfg.lora_rank, seed=cfg.seed)
        return TuneResult(params, method, log, extra={"lora_rank": cfg.lora_rank, "lora_targets": "all 2-D weights"})
    expert = elog = None
    if stats is None or (method == "random_mask" and lwaft_plan is None):
        lwaft_plan, expert, stats, elog = plan_from_expert(base, spec, dataset, cfg)
    if method == "random_mask":
        plan = random_plan_like(lwaft_plan, _derived_seed(cfg.seed, "random-mask"))
    elif method == "global_topk":
        plan = global_topk_plan(stats, cfg.budget)
    else:
        plan = layer_uniform_plan(stats, cfg.budget)
    params, log = train(base, spec, dataset, cfg.optim, mask=plan, seed=cfg.seed)
    return TuneResult(params, method, log, mask=plan, expert=expert, stats=stats, expert_log=elog)


def finetune(base: ParamStore, spec: ModelSpec, dataset, cfg: FreezeTuneConfig) -> TuneResult:
    """Dispatch on ``cfg.method``."""
    if cfg.method == "lwaft":
        plan, expert, stats, elog = plan_from_expert(base, spec, dataset, cfg)
        params, log = lwaft_finetune(base, spec, plan, dataset, cfg.optim, cfg.seed)
        return TuneResult(params, "lwaft", log, mask=plan, expert=expert, stats=stats, expert_log=elog)
    return baseline_finetune(base, spec, cfg.method, dataset, cfg)


# ---------------------------------------------------------------- evaluation


def predict(params: ParamStore, spec: ModelSpec, cases: Sequence[TaskCase], max_len: int = 40) -> dict[str, str]:
    preds = decode_batch(params, spec, [c.prompt for c in cases], max_len)
    return {c.case_id: p for c, p in zip(cases, preds)}


def evaluate_cases(params: ParamStore, spec: ModelSpec, cases: Sequence[TaskCase], max_len: int = 40) -> BenchReport:
    return score_predictions(predict(params, spec, cases, max_len), cases)


@dataclass
class RetentionReport:
    method: str
    config_hash: str
    base_domain: BenchReport
    target_domain: BenchReport
    delta_vs_base: dict[str, float] | None = None
    provenance: dict = field(default_factory=dict)

    @property
    def base_domain_score(self) -> float:
        return self.base_domain.overall

    @property
    def target_domain_score(self) -> float:
        return self.target_domain.overall

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "config_hash": self.config_hash,
            "base_domain_score": self.base_domain_score,
            "target_domain_score": self.target_domain_score,
            "base_domain": self.base_domain.to_dict(),
            "target_domain": self.target_domain.to_dict(),
            "delta_vs_base": self.delta_vs_base,
            "provenance": self.provenance,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> RetentionReport:
        def bench(b: dict) -> BenchReport:
            grid = {(k[:2], k[2:]): (v["mean"], v["count"]) for k, v in b["grid"].items()}
            return BenchReport(b["overall"], b["n"], grid)

        return cls(d["method"], d["config_hash"], bench(d["base_domain"]), bench(d["target_domain"]),
                   d.get("delta_vs_base"), d.get("provenance", {}))


def _check_vocab(spec: ModelSpec, cases: Sequence[TaskCase]) -> None:
    from . import vocab

    if spec.vocab_size != vocab.SIZE:
        raise ValidationError(f"model vocab_size {spec.vocab_size} does not match task vocabulary {vocab.SIZE}")
    for c in cases:
        vocab.encode(c.prompt)


def retention_eval(
    params: ParamStore,
    spec: ModelSpec,
    base_cases: Sequence[TaskCase],
    target_cases: Sequence[TaskCase],
    method: str = "base",
    config_hash: str = "",
    reference: RetentionReport | None = None,
    provenance: dict | None = None,
    max_len: int = 40,
) -> RetentionReport:
    """Scores on the original (base) domain and on the fine-tuning target."""
    _check_vocab(spec, list(base_cases) + list(target_cases))
    base_rep = evaluate_cases(params, spec, base_cases, max_len)
    target_rep = evaluate_cases(params, spec, target_cases, max_len)
    delta = None
    if reference is not None:
        delta = {
            "base_domain": base_rep.overall - reference.base_domain_score,
            "target_domain": target_rep.overall - reference.target_domain_score,
        }
    return RetentionReport(method, config_hash, base_rep, target_rep, delta, provenance or {})


def check_disjoint(train_cases: Sequence[TaskCase], eval_cases: Sequence[TaskCase]) -> None:
    shared = {c.doc_seed for c in train_cases} & {c.doc_seed for c in eval_cases}
    if shared:
        raise ValidationError(f"{len(shared)} documents appear in both training and evaluation cases")


# ---------------------------------------------------------------- cross-domain / cross-task


@dataclass
class CrossEvalResult:
    train_tag: tuple[str, str]
    eval_tag: tuple[str, str]
    method: str
    score: float
    ned: float
    n_eval: int

    def to_dict(self) -> dict:
        return {
            "train_tag": list(self.train_tag),
            "eval_tag": list(self.eval_tag),
            "method": self.method,
            "score_1_minus_ned": self.score,
            "ned": self.ned,
            "n_eval": self.n_eval,
        }


def tag_suite(domain: str, task_type: str, per_cell: int, seed: int, eval_fraction: float = 0.2) -> TaskSuite:
    levels = {t: r for r, t in TASK_TYPES.items()}
    if task_type not in levels:
        raise ValidationError(f"unknown task type {task_type!r}; expected one of {sorted(levels)}")
    r = levels[task_type]
    return gen_suite({f"{r}V{v}": per_cell for v in range(3)}, [domain], seed=seed, eval_fraction=eval_fraction)


def cross_eval(
    base: ParamStore,
    spec: ModelSpec,
    train_tag: tuple[str, str],
    eval_tag: tuple[str, str],
    cfg: FreezeTuneConfig,
    per_cell: int = 100,
    seed: int = 0,
    max_len: int = 40,
) -> CrossEvalResult:
    """Fine-tune on one (domain, task type) and evaluate on another.

    Training and evaluation cases never share a document. When the tags are
    equal, evaluation uses the held-out split of the training suite.
    """
    from .tasks import DOMAINS

    for dom, _ in (train_tag, eval_tag):
        if dom not in DOMAINS:
            raise ValidationError(f"unknown domain tag {dom!r}")
    train_suite = tag_suite(*train_tag, per_cell, _derived_seed(seed, f"cross-train-{train_tag}"))
    if tuple(eval_tag) == tuple(train_tag):
        eval_cases = train_suite.eval_cases()
    else:
        eval_cases = tag_suite(*eval_tag, per_cell, _derived_seed(seed, f"cross-eval-{eval_tag}"), 0.0).cases
    train_cases = train_suite.train_cases()
    check_disjoint(train_cases, eval_cases)
    ds = SeqDataset.from_cases(train_cases, spec.context_len)
    tuned = finetune(base, spec, ds, cfg).params
    rep = evaluate_cases(tuned, spec, eval_cases, max_len)
    return CrossEvalResult(tuple(train_tag), tuple(eval_tag), cfg.method, rep.overall, 1.0 - rep.overall,
                           len(eval_cases))


def check_layouts_match(base: ParamStore, other: ParamStore) -> None:
    check_layout(base, other)
