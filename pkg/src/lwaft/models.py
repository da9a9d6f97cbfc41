"""Desk-scale differentiable models with hand-written reverse mode.

Two kinds are supported:

``seq_transducer``
    A pre-norm causal transformer over characters: token + learned position
    embeddings, bias-free QKV projection (a key bias cannot affect softmax), ``num_layers`` blocks of multi-head attention and a GELU MLP,
    a final layer norm and an untied output head.
``mlp_smoke``
    A tanh MLP classifier on dense features, small enough to finite-difference
    every parameter.

Every weight matrix and bias vector is its own named layer in the
:class:`~lwaft.params.ParamStore`. Everything runs in float64.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import StaleCacheError, ValidationError
from .params import GradStore, ParamStore

KINDS = ("seq_transducer", "mlp_smoke")
LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "seq_transducer"
    vocab_size: int = 54
    model_dim: int = 32
    num_layers: int = 2
    num_heads: int = 4
    context_len: int = 80
    seed: int = 0
    mlp_ratio: int = 4
    # mlp_smoke only: feature width and class count
    input_dim: int = 8
    num_classes: int = 2

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValidationError(f"kind: unknown model kind {self.kind!r}")
        if self.model_dim < 1:
            raise ValidationError("model_dim: must be positive")
        if self.num_layers < 1:
            raise ValidationError("num_layers: must be positive")
        if self.num_heads < 1 or self.model_dim % self.num_heads:
            raise ValidationError(
                f"num_heads: model_dim {self.model_dim} is not divisible by num_heads {self.num_heads}"
            )
        if self.context_len < 2:
            raise ValidationError("context_len: must be at least 2")
        if self.vocab_size < 4:
            raise ValidationError("vocab_size: must be at least 4")
        if self.mlp_ratio < 1:
            raise ValidationError("mlp_ratio: must be positive")
        if self.kind == "mlp_smoke" and (self.input_dim < 1 or self.num_classes < 2):
            raise ValidationError("input_dim/num_classes: invalid for mlp_smoke")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelSpec:
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


def layer_shapes(spec: ModelSpec) -> list[tuple[str, tuple[int, ...]]]:
    d = spec.model_dim
    if spec.kind == "mlp_smoke":
        shapes: list[tuple[str, tuple[int, ...]]] = []
        fan_in = spec.input_dim
        for i in range(spec.num_layers):
            shapes += [(f"mlp.{i}.w", (fan_in, d)), (f"mlp.{i}.b", (d,))]
            fan_in = d
        return shapes + [("head", (d, spec.num_classes)), ("head.b", (spec.num_classes,))]
    f = d * spec.mlp_ratio
    shapes = [("embed", (spec.vocab_size, d)), ("pos", (spec.context_len, d))]
    for i in range(spec.num_layers):
        shapes += [
            (f"ln.{i}.attn.g", (d,)),
            (f"ln.{i}.attn.b", (d,)),
            (f"attn.{i}.qkv", (d, 3 * d)),
            (f"attn.{i}.out", (d, d)),
            (f"attn.{i}.out.b", (d,)),
            (f"ln.{i}.mlp.g", (d,)),
            (f"ln.{i}.mlp.b", (d,)),
            (f"mlp.{i}.w", (d, f)),
            (f"mlp.{i}.b", (f,)),
            (f"mlp.{i}.proj", (f, d)),
            (f"mlp.{i}.proj.b", (d,)),
        ]
    return shapes + [
        ("ln.final.g", (d,)),
        ("ln.final.b", (d,)),
        ("head", (d, spec.vocab_size)),
        ("head.b", (spec.vocab_size,)),
    ]


def matrix_layers(spec: ModelSpec) -> list[str]:
    """Layers used as linear maps (LoRA targets, weight-decay set)."""
    return [n for n, s in layer_shapes(spec) if len(s) == 2 and n not in ("embed", "pos")]


def decay_layers(spec: ModelSpec) -> set[str]:
    return {n for n, s in layer_shapes(spec) if len(s) == 2}


def build_model(spec: ModelSpec) -> ParamStore:
    """Deterministic initialization from ``spec.seed``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    resid_scale = 1.0 / math.sqrt(2 * spec.num_layers)
    layers = []
    for name, shape in layer_shapes(spec):
        if name.endswith(".g"):
            values = np.ones(shape)
        elif len(shape) == 1:
            values = np.zeros(shape)
        elif name in ("embed", "pos"):
            values = rng.normal(0.0, 0.1, shape)
        else:
            std = 1.0 / math.sqrt(shape[0])
            if name.endswith(".out") or name.endswith(".proj"):
                std *= resid_scale
            values = rng.normal(0.0, std, shape)
        layers.append((name, values.reshape(-1)))
    return ParamStore(layers)


@dataclass
class Batch:
    """A training batch.

    For ``seq_transducer`` ``inputs`` are ``(B, T)`` token ids and ``targets``
    the next-token ids with ``-1`` marking positions excluded from the loss.
    For ``mlp_smoke`` ``inputs`` are ``(B, input_dim)`` features and
    ``targets`` ``(B,)`` class ids.
    """

    inputs: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.inputs)

    def repeated(self, times: int) -> Batch:
        return Batch(np.concatenate([self.inputs] * times), np.concatenate([self.targets] * times))


@dataclass
class Cache:
    spec: ModelSpec
    params: ParamStore
    version: int
    saved: dict = field(default_factory=dict)


def _weights(params: ParamStore, spec: ModelSpec) -> dict[str, np.ndarray]:
    return {name: params[name].reshape(shape) for name, shape in layer_shapes(spec)}


def _check_batch(batch: Batch, spec: ModelSpec) -> None:
    if len(batch) == 0:
        raise ValidationError("empty batch")
    if spec.kind == "seq_transducer":
        tok = batch.inputs
        if tok.ndim != 2 or tok.shape != batch.targets.shape:
            raise ValidationError("seq batch needs (B, T) inputs and targets of equal shape")
        if tok.shape[1] > spec.context_len:
            raise ValidationError(f"sequence length {tok.shape[1]} exceeds context_len {spec.context_len}")
        hi = max(int(tok.max()), int(batch.targets.max()))
        if tok.min() < 0 or hi >= spec.vocab_size:
            raise ValidationError(f"token id out of range [0, {spec.vocab_size})")
        if batch.targets.min() < -1:
            raise ValidationError("target ids below -1")
    else:
        if batch.inputs.ndim != 2 or batch.inputs.shape[1] != spec.input_dim:
            raise ValidationError(f"mlp_smoke inputs must be (B, {spec.input_dim})")
        if batch.targets.max() >= spec.num_classes or batch.targets.min() < -1:
            raise ValidationError("class id out of range")
    if not (batch.targets >= 0).any():
        raise ValidationError("empty target: every position is masked")


def _layernorm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layernorm_back(dy, g, saved):
    xhat, inv = saved
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(0)
    db = dy.reshape(-1, xhat.shape[-1]).sum(0)
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dg, db


def _gelu(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * u**3))
    return 0.5 * u * (1.0 + t), t


def _gelu_back(du_out, u, t):
    dt = _GELU_C * (1.0 + 3 * 0.044715 * u * u)
    return du_out * (0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * dt)


def _cross_entropy(logits, targets):
    """Mean CE over targets >= 0; returns (loss, dlogits)."""
    valid = targets >= 0
    n = int(valid.sum())
    z = logits - logits.max(-1, keepdims=True)
    ez = np.exp(z)
    se = ez.sum(-1, keepdims=True)
    logp = z - np.log(se)
    safe = np.where(valid, targets, 0)
    picked = np.take_along_axis(logp, safe[..., None], -1)[..., 0]
    loss = -picked[valid].sum() / n
    dlogits = ez / se
    np.put_along_axis(dlogits, safe[..., None], np.take_along_axis(dlogits, safe[..., None], -1) - 1.0, -1)
    dlogits *= valid[..., None] / n
    return float(loss), dlogits


def _causal_mask(t: int) -> np.ndarray:
    return np.triu(np.full((t, t), -np.inf), 1)


def transformer_logits(w: dict, spec: ModelSpec, tok: np.ndarray, saved: dict | None = None) -> np.ndarray:
    """Forward pass to logits; fills ``saved`` with activations when given."""
    B, T = tok.shape
    d, H = spec.model_dim, spec.num_heads
    dh = d // H
    scale = 1.0 / math.sqrt(dh)
    mask = _causal_mask(T)
    x = w["embed"][tok] + w["pos"][:T]
    for i in range(spec.num_layers):
        h, ln1 = _layernorm(x, w[f"ln.{i}.attn.g"], w[f"ln.{i}.attn.b"])
        qkv = h @ w[f"attn.{i}.qkv"]
        q, k, v = (qkv[..., j * d : (j + 1) * d].reshape(B, T, H, dh).transpose(0, 2, 1, 3) for j in range(3))
        s = q @ k.transpose(0, 1, 3, 2) * scale + mask
        s = np.exp(s - s.max(-1, keepdims=True))
        a = s / s.sum(-1, keepdims=True)
        o = (a @ v).transpose(0, 2, 1, 3).reshape(B, T, d)
        x = x + o @ w[f"attn.{i}.out"] + w[f"attn.{i}.out.b"]
        h2, ln2 = _layernorm(x, w[f"ln.{i}.mlp.g"], w[f"ln.{i}.mlp.b"])
        u = h2 @ w[f"mlp.{i}.w"] + w[f"mlp.{i}.b"]
        gu, t = _gelu(u)
        x = x + gu @ w[f"mlp.{i}.proj"] + w[f"mlp.{i}.proj.b"]
        if saved is not None:
            saved[i] = (h, ln1, q, k, v, a, o, h2, ln2, u, gu, t)
    hf, lnf = _layernorm(x, w["ln.final.g"], w["ln.final.b"])
    if saved is not None:
        saved["final"] = (hf, lnf)
    return hf @ w["head"] + w["head.b"]


def _mlp_logits(w: dict, spec: ModelSpec, feats: np.ndarray, saved: dict | None = None) -> np.ndarray:
    h = feats
    acts = [h]
    for i in range(spec.num_layers):
        h = np.tanh(h @ w[f"mlp.{i}.w"] + w[f"mlp.{i}.b"])
        acts.append(h)
    if saved is not None:
        saved["acts"] = acts
    return h @ w["head"] + w["head.b"]


def logits(params: ParamStore, spec: ModelSpec, inputs: np.ndarray) -> np.ndarray:
    w = _weights(params, spec)
    if spec.kind == "mlp_smoke":
        return _mlp_logits(w, spec, inputs)
    return transformer_logits(w, spec, inputs)


def forward_loss(params: ParamStore, spec: ModelSpec, batch: Batch) -> tuple[float, Cache]:
    """Mean token-level cross-entropy over non-padding targets."""
    _check_batch(batch, spec)
    w = _weights(params, spec)
    saved: dict = {}
    if spec.kind == "mlp_smoke":
        out = _mlp_logits(w, spec, batch.inputs, saved)
    else:
        out = transformer_logits(w, spec, batch.inputs, saved)
    loss, dlogits = _cross_entropy(out, batch.targets)
    saved["dlogits"] = dlogits
    saved["inputs"] = batch.inputs
    return loss, Cache(spec, params, params.version, saved)


def backward(cache: Cache) -> GradStore:
    """Exact gradients of the cached loss with respect to every parameter."""
    if cache.params.version != cache.version:
        raise StaleCacheError("parameters changed since forward_loss; recompute the forward pass")
    spec = cache.spec
    w = _weights(cache.params, spec)
    grads = GradStore.zeros_like(cache.params)
    g = {name: grads[name].reshape(shape) for name, shape in layer_shapes(spec)}
    if spec.kind == "mlp_smoke":
        _mlp_backward(w, g, spec, cache.saved)
    else:
        _transformer_backward(w, g, spec, cache.saved)
    return grads


def _mlp_backward(w, g, spec, saved):
    acts = saved["acts"]
    dz = saved["dlogits"]
    g["head"][...] = acts[-1].T @ dz
    g["head.b"][...] = dz.sum(0)
    dh = dz @ w["head"].T
    for i in reversed(range(spec.num_layers)):
        du = dh * (1.0 - acts[i + 1] ** 2)
        g[f"mlp.{i}.w"][...] = acts[i].T @ du
        g[f"mlp.{i}.b"][...] = du.sum(0)
        dh = du @ w[f"mlp.{i}.w"].T


def _transformer_backward(w, g, spec, saved):
    tok = saved["inputs"]
    B, T = tok.shape
    d, H = spec.model_dim, spec.num_heads
    dh_ = d // H
    scale = 1.0 / math.sqrt(dh_)
    dz = saved["dlogits"]
    hf, lnf = saved["final"]
    V = spec.vocab_size
    g["head"][...] = hf.reshape(-1, d).T @ dz.reshape(-1, V)
    g["head.b"][...] = dz.reshape(-1, V).sum(0)
    dx, dgf, dbf = _layernorm_back(dz @ w["head"].T, w["ln.final.g"], lnf)
    g["ln.final.g"][...] = dgf
    g["ln.final.b"][...] = dbf
    for i in reversed(range(spec.num_layers)):
        h, ln1, q, k, v, a, o, h2, ln2, u, gu, t = saved[i]
        # MLP branch
        g[f"mlp.{i}.proj"][...] = gu.reshape(-1, gu.shape[-1]).T @ dx.reshape(-1, d)
        g[f"mlp.{i}.proj.b"][...] = dx.reshape(-1, d).sum(0)
        du = _gelu_back(dx @ w[f"mlp.{i}.proj"].T, u, t)
        g[f"mlp.{i}.w"][...] = h2.reshape(-1, d).T @ du.reshape(-1, du.shape[-1])
        g[f"mlp.{i}.b"][...] = du.reshape(-1, du.shape[-1]).sum(0)
        dln2, dg2, db2 = _layernorm_back(du @ w[f"mlp.{i}.w"].T, w[f"ln.{i}.mlp.g"], ln2)
        g[f"ln.{i}.mlp.g"][...] = dg2
        g[f"ln.{i}.mlp.b"][...] = db2
        dx = dx + dln2
        # attention branch
        g[f"attn.{i}.out"][...] = o.reshape(-1, d).T @ dx.reshape(-1, d)
        g[f"attn.{i}.out.b"][...] = dx.reshape(-1, d).sum(0)
        do = (dx @ w[f"attn.{i}.out"].T).reshape(B, T, H, dh_).transpose(0, 2, 1, 3)
        da = do @ v.transpose(0, 1, 3, 2)
        dv = a.transpose(0, 1, 3, 2) @ do
        ds = a * (da - (da * a).sum(-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dqkv = np.concatenate([m.transpose(0, 2, 1, 3).reshape(B, T, d) for m in (dq, dk, dv)], axis=-1)
        g[f"attn.{i}.qkv"][...] = h.reshape(-1, d).T @ dqkv.reshape(-1, 3 * d)
        dln1, dg1, db1 = _layernorm_back(dqkv @ w[f"attn.{i}.qkv"].T, w[f"ln.{i}.attn.g"], ln1)
        g[f"ln.{i}.attn.g"][...] = dg1
        g[f"ln.{i}.attn.b"][...] = db1
        dx = dx + dln1
    g["pos"][:T] = dx.sum(0)
    np.add.at(g["embed"], tok, dx)
