import numpy as np
import pytest

from lwaft import vocab
from lwaft.errors import LayoutMismatchError, TrainingDivergedError, ValidationError
from lwaft.masks import LayerMask, MaskPlan
from lwaft.models import build_model, forward_loss, backward, logits
from lwaft.optim import PRESETS, OptimConfig, OptimState, apply_update, lr_at, masked_gradient
from lwaft.params import GradStore, ParamStore, changed_indices
from lwaft.training import SeqDataset, TrainLog, decode_batch, decode_greedy, train

from helpers import SMOKE, TINY_SEQ, separable, seq_pairs


def _store(v):
    return ParamStore([("w", np.array(v, dtype=float))])


def _grads(v):
    g = GradStore.zeros_like(_store(v))
    g["w"][:] = v
    return g


def test_hadamard_example():
    mask = MaskPlan([LayerMask("w", 3, np.array([0, 2]))])
    assert masked_gradient(_grads([0.3, -0.2, 0.7]), mask)["w"].tolist() == [0.3, 0.0, 0.7]


def test_all_ones_mask_equals_unmasked():
    cfg = OptimConfig(weight_decay=0.1)
    a, b = _store([1.0, -2.0, 0.5]), _store([1.0, -2.0, 0.5])
    sa, sb = OptimState(a, cfg, 10), OptimState(b, cfg, 10)
    full = MaskPlan.full(a)
    rng = np.random.default_rng(0)
    for step in range(10):
        g = rng.normal(size=3)
        apply_update(a, _grads(g), sa, step)
        apply_update(b, _grads(g), sb, step, full)
    assert a.equals(b)
    assert all(np.array_equal(sa.m[k], sb.m[k]) and np.array_equal(sa.v[k], sb.v[k]) for k in sa.m)


def test_all_zeros_mask_freezes_params_and_moments():
    p = build_model(SMOKE)
    before = p.copy()
    cfg = OptimConfig()
    state = OptimState(p, cfg, 100)
    empty = MaskPlan.empty(p)
    rng = np.random.default_rng(1)
    for step in range(100):
        g = GradStore.zeros_like(p)
        for k in g:
            g[k][:] = rng.normal(size=g[k].size)
        apply_update(p, g, state, step, empty)
    assert p.equals(before)
    assert all(not state.m[k].any() and not state.v[k].any() for k in state.m)


def test_partial_mask_touches_only_support():
    p = build_model(SMOKE)
    before = p.copy()
    plan = MaskPlan([LayerMask(n, size, np.array([0]) if n == "mlp.0.w" else np.array([], dtype=np.int64)) for n, size in p.layout()])
    state = OptimState(p, OptimConfig(), 5)
    g = GradStore.zeros_like(p)
    for k in g:
        g[k][:] = 1.0
    for step in range(5):
        apply_update(p, g, state, step, plan)
    changed = changed_indices(before, p)
    assert {k: v.tolist() for k, v in changed.items() if v.size} == {"mlp.0.w": [0]}
    assert state.m["mlp.0.w"][1:].tolist() == [0.0] * (p["mlp.0.w"].size - 1)


def test_update_errors():
    p = _store([1.0, 2.0])
    state = OptimState(p, OptimConfig(), 3)
    with pytest.raises(TrainingDivergedError) as exc:
        apply_update(p, _grads([np.nan, 0.0]), state, 2)
    assert exc.value.last_finite_step == 1
    with pytest.raises(LayoutMismatchError):
        apply_update(p, _grads([1.0, 2.0, 3.0]), state, 0)


def test_schedule_shape():
    cfg = OptimConfig(learning_rate=1.0, warmup_ratio=0.1, schedule="cosine")
    lrs = [lr_at(cfg, s, 100) for s in range(100)]
    assert lrs[0] == pytest.approx(0.1) and lrs[9] == pytest.approx(1.0)
    assert all(a >= b for a, b in zip(lrs[9:], lrs[10:]))
    assert lrs[-1] < 0.01
    flat = OptimConfig(learning_rate=0.5, warmup_ratio=0.0, schedule="constant")
    assert {lr_at(flat, s, 50) for s in range(50)} == {0.5}


def test_optim_validation_and_presets():
    for bad in [dict(learning_rate=0.0), dict(warmup_ratio=1.0), dict(batch_size=0), dict(schedule="step")]:
        with pytest.raises(ValidationError):
            OptimConfig(**bad)
    assert PRESETS["paper-scale"].learning_rate == 3e-5
    assert PRESETS["paper-scale"].weight_decay == 0.05 and PRESETS["paper-scale"].warmup_ratio == 0.03
    assert PRESETS["toy"].learning_rate == 1e-2


def test_separable_reaches_full_accuracy():
    ds = separable()
    cfg = OptimConfig(learning_rate=5e-2, epochs=200, batch_size=64, weight_decay=0.0)
    p, log = train(build_model(SMOKE), SMOKE, ds, cfg, seed=0, max_steps=200)
    assert len(log.records) == 200
    pred = logits(p, SMOKE, ds.features).argmax(-1)
    assert (pred == ds.labels).mean() == 1.0


def test_train_is_deterministic_and_pure():
    ds = SeqDataset.from_pairs(seq_pairs(), TINY_SEQ.context_len)
    base = build_model(TINY_SEQ)
    snapshot = base.copy()
    cfg = OptimConfig(epochs=3, batch_size=2)
    a, la = train(base, TINY_SEQ, ds, cfg, seed=5)
    b, lb = train(base, TINY_SEQ, ds, cfg, seed=5)
    assert base.equals(snapshot)
    assert a.equals(b) and la.losses == lb.losses
    steps = [r["step"] for r in la.records]
    assert steps == sorted(set(steps))


def test_train_with_frozen_mask():
    ds = separable(32)
    base = build_model(SMOKE)
    p, _ = train(base, SMOKE, ds, OptimConfig(epochs=3, batch_size=8), mask=MaskPlan.empty(base))
    assert p.equals(base)


def test_train_rejects_empty():
    with pytest.raises(ValidationError):
        SeqDataset([])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_step():
    ds = separable(32)
    with pytest.raises(TrainingDivergedError):
        train(build_model(SMOKE), SMOKE, ds, OptimConfig(learning_rate=1e300, epochs=5, batch_size=8, warmup_ratio=0.0))


def test_trainlog_roundtrip(tmp_path):
    log = TrainLog([{"step": 0, "loss": 1.5, "lr": 0.1}, {"step": 1, "loss": 1.2, "lr": 0.1}])
    path = tmp_path / "log.ndjson"
    log.save(path)
    assert TrainLog.load(path).records == log.records


def test_decode_edges():
    p = build_model(TINY_SEQ)
    assert decode_greedy(p, TINY_SEQ, "ab#", 0) == ""
    p["head.b"][vocab.END_ID] = 1e6
    assert decode_greedy(p, TINY_SEQ, "ab#", 10) == ""
    with pytest.raises(ValidationError):
        decode_greedy(p, TINY_SEQ, "a" * TINY_SEQ.context_len, 3)


def test_overfit_one_pair_then_decode():
    ds = SeqDataset.from_pairs([("ab#txt>", "ba")], TINY_SEQ.context_len)
    p, _ = train(build_model(TINY_SEQ), TINY_SEQ, ds, OptimConfig(learning_rate=1e-2, epochs=150, batch_size=1, weight_decay=0.0))
    assert decode_greedy(p, TINY_SEQ, "ab#txt>", 10) == "ba"


def test_batch_decode_matches_single():
    ds = SeqDataset.from_pairs(seq_pairs(), TINY_SEQ.context_len)
    p, _ = train(build_model(TINY_SEQ), TINY_SEQ, ds, OptimConfig(epochs=40, batch_size=4))
    prompts = [a for a, _ in seq_pairs()]
    assert decode_batch(p, TINY_SEQ, prompts, 8) == [decode_greedy(p, TINY_SEQ, q, 8) for q in prompts]
