"""Small fixtures shared by several test modules."""

import numpy as np

from lwaft import vocab
from lwaft.models import Batch, ModelSpec
from lwaft.training import ArrayDataset, SeqDataset

SMOKE = ModelSpec(kind="mlp_smoke", input_dim=8, model_dim=4, num_layers=1, num_classes=2, vocab_size=4, num_heads=1)
TINY_SEQ = ModelSpec(vocab_size=vocab.SIZE, model_dim=16, num_layers=2, num_heads=2, context_len=24, seed=3)


def separable(n=64, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 8))
    w = np.arange(1, 9, dtype=float) - 4.5
    y = (x @ w > 0).astype(np.int64)
    return ArrayDataset(x, y)


def seq_pairs():
    return [("ab#txt>", "ab"), ("cd#txt>", "cd"), ("x 12.#key>", "12"), ("yz#max a b>", "B")]


def seq_batch(spec=TINY_SEQ):
    return SeqDataset.from_pairs(seq_pairs(), spec.context_len).batch(range(4))


def smoke_batch():
    ds = separable(16, 1)
    return ds.batch(range(16))


__all__ = ["Batch", "SMOKE", "TINY_SEQ", "separable", "seq_batch", "seq_pairs", "smoke_batch"]
