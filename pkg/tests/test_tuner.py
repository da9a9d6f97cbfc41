import json
import warnings

import numpy as np
import pytest

from lwaft.errors import BudgetError, LayoutMismatchError, ValidationError
from lwaft.masks import BudgetConfig, MaskPlan
from lwaft.models import build_model
from lwaft.optim import OptimConfig
from lwaft.params import changed_indices
from lwaft.tasks import gen_suite, uniform_counts
from lwaft.training import SeqDataset, train
from lwaft.tuner import (
    FreezeTuneConfig,
    RetentionReport,
    baseline_finetune,
    check_disjoint,
    cross_eval,
    expert_subset,
    finetune,
    lwaft_finetune,
    retention_eval,
    train_expert,
)

from helpers import SMOKE, TINY_SEQ, separable

OPT = OptimConfig(learning_rate=1e-2, epochs=2, batch_size=8)


@pytest.fixture(scope="module")
def data():
    suite = gen_suite(uniform_counts(4), ["ledger"], seed=5)
    base_suite = gen_suite(uniform_counts(5), ["gazette"], seed=6)
    from lwaft.models import ModelSpec

    spec = ModelSpec(**{**TINY_SEQ.to_dict(), "context_len": 80})
    return spec, build_model(spec), SeqDataset.from_cases(suite.train_cases(), 80), suite, base_suite


def test_expert_subset_rules():
    a = expert_subset(200, 0.1, seed=3)
    assert a.size == 20 and np.array_equal(a, expert_subset(200, 0.1, seed=3))
    assert not np.array_equal(a, expert_subset(200, 0.1, seed=4))
    assert expert_subset(200, 1.0, 0).tolist() == list(range(200))
    with pytest.warns(UserWarning):
        assert expert_subset(200, 0.001, 0).size == 1
    with pytest.raises(ValidationError):
        expert_subset(0, 0.5, 0)


def test_config_validation():
    with pytest.raises(ValidationError):
        FreezeTuneConfig(alpha=0.0)
    with pytest.raises(ValidationError):
        FreezeTuneConfig(method="lora", lora_rank=0)
    with pytest.raises(ValidationError):
        FreezeTuneConfig(method="ewc")
    assert FreezeTuneConfig().alpha == 0.1
    assert FreezeTuneConfig().budget.freeze_rate == 0.99


def test_expert_leaves_base_untouched(data):
    spec, base, ds, *_ = data
    digest = base.digest()
    expert, _, subset = train_expert(base, spec, ds, 0.5, OPT, seed=1)
    assert base.digest() == digest
    assert subset.size == int(np.ceil(0.5 * len(ds)))
    assert not expert.equals(base)


@pytest.mark.parametrize("method", ["lwaft", "random_mask", "global_topk", "layer_uniform"])
def test_masked_methods_change_at_most_budget(data, method):
    spec, base, ds, *_ = data
    cfg = FreezeTuneConfig(alpha=0.5, budget=BudgetConfig(global_count=40), method=method, optim=OPT, seed=2)
    res = finetune(base, spec, ds, cfg)
    changed = changed_indices(base, res.params)
    assert sum(v.size for v in changed.values()) <= 40
    for name, idx in changed.items():
        assert set(idx.tolist()) <= set(res.mask.indices(name).tolist())
    assert res.mask.total_unfrozen == 40


def test_random_mask_keeps_layer_counts(data):
    spec, base, ds, *_ = data
    cfg = FreezeTuneConfig(alpha=0.5, budget=BudgetConfig(global_count=60), optim=OPT, seed=2)
    lw = finetune(base, spec, ds, cfg)
    rnd = baseline_finetune(base, spec, "random_mask", ds, cfg, stats=lw.stats, lwaft_plan=lw.mask)
    assert rnd.mask.counts == lw.mask.counts
    assert not rnd.mask.equals(lw.mask)


def test_lwaft_rejects_bad_masks(data):
    spec, base, ds, *_ = data
    with pytest.raises(BudgetError):
        lwaft_finetune(base, spec, MaskPlan.empty(base), ds, OPT)
    with pytest.raises(LayoutMismatchError):
        lwaft_finetune(base, spec, MaskPlan.full(build_model(SMOKE)), ds, OPT)


def test_global_topk_full_budget_matches_full_first_step(data):
    spec, base, ds, *_ = data
    one = OPT.with_(epochs=1)
    cfg = FreezeTuneConfig(alpha=0.5, budget=BudgetConfig(global_count=base.total_count), optim=one, seed=2)
    topk = baseline_finetune(base, spec, "global_topk", ds, cfg)
    full, _ = train(base, spec, ds, one, seed=2, max_steps=1)
    topk1, _ = train(base, spec, ds, one, mask=topk.mask, seed=2, max_steps=1)
    assert topk1.equals(full)


def test_lora(data):
    spec, base, ds, *_ = data
    res = finetune(base, spec, ds, FreezeTuneConfig(method="lora", lora_rank=2, optim=OPT))
    from lwaft.models import matrix_layers

    changed = {n for n, idx in changed_indices(base, res.params).items() if idx.size}
    assert changed and changed <= set(matrix_layers(spec))
    assert res.extra["lora_rank"] == 2


def test_lora_needs_matrices():
    from lwaft.lora import init_factors

    with pytest.raises(ValidationError):
        init_factors(SMOKE, 0, 0)


def test_retention_report(data, tmp_path):
    spec, base, _, suite, base_suite = data
    ref = retention_eval(base, spec, base_suite.eval_cases(), suite.eval_cases())
    again = retention_eval(base, spec, base_suite.eval_cases(), suite.eval_cases(), reference=ref)
    assert again.delta_vs_base == {"base_domain": 0.0, "target_domain": 0.0}
    assert 0.0 <= ref.base_domain_score <= 1.0
    back = RetentionReport.from_dict(json.loads(again.to_json()))
    assert back.to_dict()["base_domain"] == again.to_dict()["base_domain"]
    present = {(c.r_level, c.v_level) for c in suite.eval_cases()}
    assert set(again.target_domain.grid) == present


def test_retention_vocab_mismatch(data):
    from lwaft.models import ModelSpec

    spec, _, _, suite, base_suite = data
    small = ModelSpec(**{**spec.to_dict(), "vocab_size": 10})
    with pytest.raises(ValidationError):
        retention_eval(build_model(small), small, base_suite.eval_cases(), suite.eval_cases())


def test_disjointness_check(data):
    *_, suite, _ = data
    check_disjoint(suite.train_cases(), suite.eval_cases())
    with pytest.raises(ValidationError):
        check_disjoint(suite.train_cases(), suite.train_cases()[:1])


def test_cross_eval(data):
    spec, base, *_ = data
    cfg = FreezeTuneConfig(method="full", optim=OPT.with_(epochs=1))
    same = cross_eval(base, spec, ("ledger", "lookup"), ("ledger", "lookup"), cfg, per_cell=5)
    other = cross_eval(base, spec, ("ledger", "lookup"), ("chartnote", "lookup"), cfg, per_cell=5)
    for r in (same, other):
        assert 0 <= r.score <= 1 and r.ned == pytest.approx(1 - r.score)
    assert same.n_eval == 3 and other.n_eval == 15
    with pytest.raises(ValidationError):
        cross_eval(base, spec, ("atlas", "lookup"), ("ledger", "lookup"), cfg)
    with pytest.raises(ValidationError):
        cross_eval(base, spec, ("ledger", "summarize"), ("ledger", "lookup"), cfg)


def test_pipeline_determinism(data):
    spec, base, ds, *_ = data
    cfg = FreezeTuneConfig(alpha=0.5, budget=BudgetConfig(global_count=50), optim=OPT, seed=9)
    a, b = finetune(base, spec, ds, cfg), finetune(base, spec, ds, cfg)
    assert a.params.equals(b.params) and a.mask.equals(b.mask)
