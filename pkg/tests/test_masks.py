import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lwaft.delta import LayerDelta, DeltaStats
from lwaft.errors import BudgetError, FormatError, ValidationError
from lwaft.masks import (
    BudgetConfig,
    MaskPlan,
    allocate_budget,
    build_mask_plan,
    global_topk_plan,
    layer_uniform_plan,
    load_mask,
    proportional_shares,
    random_plan_like,
    save_mask,
    topk_mask,
)
from lwaft.params import ParamStore

from oracles import fullsort_topk


def test_allocation_direct_example():
    # m*w = [2, 3] of 5 -> 20 and 30 of 50
    assert allocate_budget([(0.02, 100), (0.01, 300)], 50) == [20, 30]


def test_allocation_clamp_example():
    # raw [18.18, 1.82]; layer 0 holds only 10, surplus 8.18 goes to layer 1
    assert allocate_budget([(1.0, 10), (0.001, 1000)], 20) == [10, 10]


def test_single_layer():
    assert allocate_budget([(0.3, 100)], 7) == [7]


def test_zero_deltas_fall_back_to_size():
    with pytest.warns(UserWarning, match="zero"):
        assert allocate_budget([(0.0, 10), (0.0, 30)], 8) == [2, 6]


def test_budget_over_capacity_clamps():
    with pytest.warns(UserWarning, match="exceeds"):
        assert allocate_budget([(1.0, 3), (2.0, 4)], 100) == [3, 4]


def test_surplus_to_zero_score_layers():
    # layer 0 saturates; leftover budget must still be placed
    assert allocate_budget([(1.0, 10), (0.0, 100)], 50) == [10, 40]


def test_allocation_errors():
    with pytest.raises(ValidationError):
        allocate_budget([], 5)
    with pytest.raises(BudgetError):
        allocate_budget([(1.0, 5)], 0)


def test_largest_remainder_ties_go_to_earlier_layer():
    assert allocate_budget([(1.0, 10), (1.0, 10), (1.0, 10)], 4) == [2, 1, 1]


profiles = st.lists(
    st.tuples(st.floats(0, 1, allow_nan=False, allow_infinity=False), st.integers(1, 500)), min_size=1, max_size=12
)


@given(profiles, st.integers(1, 3000))
@settings(max_examples=300)
def test_conservation_property(profile, budget):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        h = allocate_budget(profile, budget)
    assert sum(h) == min(budget, sum(w for _, w in profile))
    assert all(0 <= x <= w for x, (_, w) in zip(h, profile))


@given(profiles, st.integers(1, 3000))
@settings(max_examples=300)
def test_proportionality_when_unclamped(profile, budget):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        raw = proportional_shares(profile, min(budget, sum(w for _, w in profile)))
        if any(r > w for r, (_, w) in zip(raw, profile)):
            return
        h = allocate_budget(profile, budget)
    assert all(abs(x - r) < 1 for x, r in zip(h, raw))


@given(profiles, st.integers(1, 3000), st.sampled_from([0.5, 2.0, 3.0, 1e-3, 7.25]))
@settings(max_examples=200)
def test_scale_invariance(profile, budget, scale):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a = allocate_budget(profile, budget)
        b = allocate_budget([(m * scale, w) for m, w in profile], budget)
    assert a == b


def test_topk_examples():
    assert topk_mask(np.array([0.5, 0.1, 0.9, 0.5]), 2).tolist() == [0, 2]
    assert topk_mask(np.array([0.5, 0.1]), 0).tolist() == []
    assert topk_mask(np.array([0.3, 0.1, 0.2]), 3).tolist() == [0, 1, 2]
    with pytest.raises(ValidationError):
        topk_mask(np.array([1.0]), 2)


@given(st.lists(st.integers(0, 5), min_size=1, max_size=60), st.data())
@settings(max_examples=200)
def test_topk_matches_fullsort_with_ties(values, data):
    k = data.draw(st.integers(0, len(values)))
    arr = np.array(values, dtype=float)
    chosen = topk_mask(arr, k)
    assert chosen.tolist() == fullsort_topk(values, k)
    rest = np.setdiff1d(np.arange(arr.size), chosen)
    if chosen.size and rest.size:
        assert arr[chosen].min() >= arr[rest].max()


def _stats(*layers):
    return DeltaStats([LayerDelta(f"L{i}", np.asarray(v, dtype=float)) for i, v in enumerate(layers)])


def test_build_plan_uniform_symmetry():
    plan = build_mask_plan(_stats(np.ones(20), np.ones(20)), BudgetConfig(global_count=10))
    assert plan.counts == [5, 5]
    assert plan.provenance["tie_rule"] == "smaller-index-first"


def test_freeze_rate_underflow_on_tiny_model():
    stats = _stats(np.ones(46))
    with pytest.raises(BudgetError, match="budget underflow"):
        build_mask_plan(stats, BudgetConfig(freeze_rate=0.99))


def test_freeze_rate_on_large_model():
    assert BudgetConfig(freeze_rate=0.99).resolve(100_000) == 1000
    rng = np.random.default_rng(0)
    plan = build_mask_plan(_stats(rng.random(60_000), rng.random(40_000)), BudgetConfig(freeze_rate=0.99))
    assert plan.total_unfrozen == 1000


def test_budget_config_validation():
    with pytest.raises(ValidationError):
        BudgetConfig()
    with pytest.raises(ValidationError):
        BudgetConfig(global_count=3, freeze_rate=0.5)
    with pytest.raises(ValidationError):
        BudgetConfig(freeze_rate=1.0)


def test_plan_invariants_and_monotone_selection():
    rng = np.random.default_rng(3)
    stats = _stats(rng.random(50), rng.random(200) * 0.1, rng.random(7))
    plan = build_mask_plan(stats, BudgetConfig(global_count=40))
    assert plan.total_unfrozen == 40
    for layer, lm in zip(stats, plan.layers):
        assert np.all(np.diff(lm.indices) > 0)
        sel = layer.deltas[lm.indices]
        rest = np.delete(layer.deltas, lm.indices)
        if sel.size and rest.size:
            assert sel.min() >= rest.max()


def test_ablation_plans_respect_budget():
    rng = np.random.default_rng(4)
    stats = _stats(rng.random(30), rng.random(300), rng.random(5))
    budget = BudgetConfig(global_count=25)
    lw = build_mask_plan(stats, budget)
    rnd = random_plan_like(lw, seed=1)
    assert rnd.counts == lw.counts
    g = global_topk_plan(stats, budget)
    assert g.total_unfrozen == 25
    flat = stats.flat()
    chosen = np.concatenate([lm.indices + off for lm, off in zip(g.layers, [0, 30, 330])])
    assert sorted(chosen.tolist()) == fullsort_topk(flat.tolist(), 25)
    u = layer_uniform_plan(stats, budget)
    assert u.counts == [10, 10, 5]
    assert u.total_unfrozen == 25


def _random_plan(seed):
    rng = np.random.default_rng(seed)
    stats = _stats(rng.random(40), rng.random(100), rng.random(3))
    return build_mask_plan(stats, BudgetConfig(global_count=20), {"expert_run_id": "t", "alpha": 0.1})


def test_mask_roundtrip(tmp_path):
    plan = _random_plan(0)
    path = tmp_path / "m.lwmsk"
    digest = save_mask(plan, path)
    back = load_mask(path)
    assert back.equals(plan)
    assert back.digest() == digest


def test_mask_corruption_detected(tmp_path):
    plan = _random_plan(1)
    path = tmp_path / "m.lwmsk"
    save_mask(plan, path)
    data = bytearray(path.read_bytes())
    # flip one byte inside the first layer's index payload
    header = 5 + 6 + 2 + len("L0") + 16
    data[header + 3] ^= 0x01
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError):
        load_mask(path)


def test_mask_truncation_and_version(tmp_path):
    data = _random_plan(2).to_bytes()
    with pytest.raises(FormatError):
        MaskPlan.from_bytes(data[:-10])
    bumped = bytearray(data)
    bumped[5] = 9
    with pytest.raises(FormatError, match="version"):
        MaskPlan.from_bytes(bytes(bumped))
    with pytest.raises(FormatError):
        MaskPlan.from_bytes(b"NOPE" + data)


def test_unsorted_indices_rejected():
    from lwaft.masks import LayerMask

    with pytest.raises(ValidationError):
        MaskPlan([LayerMask("a", 5, np.array([3, 1]))])


def test_plan_layout_check():
    from lwaft.errors import LayoutMismatchError

    plan = _random_plan(0)
    store = ParamStore([("L0", np.zeros(40)), ("L1", np.zeros(100)), ("L2", np.zeros(3))])
    plan.check_layout(store)
    with pytest.raises(LayoutMismatchError):
        plan.check_layout(ParamStore([("L0", np.zeros(40)), ("L1", np.zeros(99)), ("L2", np.zeros(3))]))
