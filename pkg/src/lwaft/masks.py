"""Layer budget allocation, per-layer top-k selection and mask files.

The global budget ``H`` is split over layers in proportion to
``mean |delta| * layer size``. Fractional shares are integerized by
floor + largest remainder (ties to the earlier layer) so the total is exact,
and shares larger than a layer are clamped with the surplus redistributed
until nothing overflows. Within a layer the ``h`` largest deltas are kept,
ties going to the smaller index.

Mask file layout (little-endian)::

    b"LWMSK"  u16 version  u32 n_layers
    n_layers x [u16 name_len, name, u64 width, u64 count, count x u64 index]
    u32 provenance_len, provenance JSON (UTF-8)
    32-byte SHA-256 of everything above
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import warnings
from collections.abc import Sequence
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .delta import DeltaStats
from .errors import BudgetError, FormatError, LayoutMismatchError, ValidationError
from .params import ParamStore

MAGIC = b"LWMSK"
VERSION = 1
TIE_RULE = "smaller-index-first"


@dataclass(frozen=True)
class BudgetConfig:
    global_count: int | None = None
    freeze_rate: float | None = None

    def __post_init__(self):
        if (self.global_count is None) == (self.freeze_rate is None):
            raise ValidationError("budget: give exactly one of global_count or freeze_rate")
        if self.freeze_rate is not None and not 0.0 <= self.freeze_rate < 1.0:
            raise ValidationError("budget: freeze_rate must be in [0, 1)")
        if self.global_count is not None and self.global_count < 0:
            raise ValidationError("budget: global_count must be >= 0")

    def resolve(self, total_count: int) -> int:
        if self.global_count is not None:
            h = self.global_count
        else:
            h = math.floor((1.0 - self.freeze_rate) * total_count + 0.5)
        if h <= 0:
            raise BudgetError(
                f"budget underflow: {self.describe()} leaves 0 of {total_count} parameters unfrozen; "
                "specify global_count"
            )
        return h

    def describe(self) -> str:
        if self.global_count is not None:
            return f"global_count={self.global_count}"
        return f"freeze_rate={self.freeze_rate}"

    def to_dict(self) -> dict:
        return {"global_count": self.global_count, "freeze_rate": self.freeze_rate}


def _largest_remainder(raw: Sequence[Fraction], total: int) -> list[int]:
    base = [math.floor(r) for r in raw]
    rest = total - sum(base)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[:rest]:
        base[i] += 1
    return base


def proportional_shares(profile: Sequence[tuple[float, int]], budget: int) -> list[Fraction]:
    """Unclamped fractional shares ``m*w / sum(m*w) * H`` (exact arithmetic)."""
    scores = [Fraction(m) * w for m, w in profile]
    total = sum(scores)
    if total == 0:
        scores = [Fraction(w) for _, w in profile]
        total = sum(scores)
    return [s / total * budget for s in scores]


def allocate_budget(profile: Sequence[tuple[float, int]], budget: int) -> list[int]:
    """Integer unfrozen counts per layer from ``(mean_abs, count)`` pairs.

    Sum of the result equals ``min(budget, total count)``.
    """
    if not profile:
        raise ValidationError("empty layer profile")
    if budget < 1:
        raise BudgetError("budget must be >= 1")
    for m, w in profile:
        if w < 1:
            raise ValidationError("layer sizes must be >= 1")
        if not (m >= 0 and math.isfinite(m)):
            raise ValidationError("mean deltas must be finite and >= 0")
    sizes = [int(w) for _, w in profile]
    capacity = sum(sizes)
    if budget > capacity:
        warnings.warn(f"budget {budget} exceeds parameter count {capacity}; clamping", stacklevel=2)
        budget = capacity
    scores = [Fraction(m) * w for m, w in profile]
    if sum(scores) == 0:
        warnings.warn("all layer deltas are zero; allocating by layer size", stacklevel=2)
        scores = [Fraction(w) for w in sizes]
    h = [0] * len(sizes)
    active = list(range(len(sizes)))
    remaining = budget
    while True:
        weight = sum(scores[i] for i in active)
        if weight == 0:
            # surplus left only for zero-score layers: spread by size
            local = {i: Fraction(sizes[i]) for i in active}
            weight = sum(local.values())
        else:
            local = {i: scores[i] for i in active}
        raw = {i: local[i] / weight * remaining for i in active}
        over = [i for i in active if raw[i] > sizes[i]]
        if not over:
            for i, share in zip(active, _largest_remainder([raw[i] for i in active], remaining)):
                h[i] = share
            return h
        for i in over:
            h[i] = sizes[i]
            remaining -= sizes[i]
        active = [i for i in active if i not in over]


def topk_mask(deltas: np.ndarray, k: int) -> np.ndarray:
    """Sorted indices of the ``k`` largest values; ties go to the smaller index."""
    deltas = np.asarray(deltas)
    if k < 0 or k > deltas.size:
        raise ValidationError(f"k={k} outside [0, {deltas.size}]")
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-deltas, kind="stable")
    return np.sort(order[:k]).astype(np.int64)


@dataclass
class LayerMask:
    name: str
    width: int
    indices: np.ndarray

    @property
    def count(self) -> int:
        return int(self.indices.size)


@dataclass
class MaskPlan:
    layers: list[LayerMask]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for layer in self.layers:
            idx = np.asarray(layer.indices, dtype=np.int64)
            if idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 0 or idx[-1] >= layer.width):
                raise ValidationError(f"mask indices for {layer.name!r} must be strictly increasing and < width")
            layer.indices = idx
        self._by_name = {layer.name: layer for layer in self.layers}

    @property
    def total_unfrozen(self) -> int:
        return sum(layer.count for layer in self.layers)

    @property
    def counts(self) -> list[int]:
        return [layer.count for layer in self.layers]

    def indices(self, name: str) -> np.ndarray:
        return self._by_name[name].indices

    def check_layout(self, params: ParamStore) -> None:
        mine = [(layer.name, layer.width) for layer in self.layers]
        if mine != params.layout():
            for (a, wa), (b, wb) in zip(mine, params.layout()):
                if (a, wa) != (b, wb):
                    raise LayoutMismatchError(f"mask/parameter layouts differ at {a!r} ({wa}) vs {b!r} ({wb})")
            raise LayoutMismatchError("mask/parameter layouts differ in layer count")

    def as_bool(self, name: str) -> np.ndarray:
        layer = self._by_name[name]
        out = np.zeros(layer.width, dtype=bool)
        out[layer.indices] = True
        return out

    def equals(self, other: MaskPlan) -> bool:
        return (
            [(l.name, l.width) for l in self.layers] == [(l.name, l.width) for l in other.layers]
            and all(np.array_equal(a.indices, b.indices) for a, b in zip(self.layers, other.layers))
            and self.provenance == other.provenance
        )

    @classmethod
    def full(cls, params: ParamStore) -> MaskPlan:
        return cls([LayerMask(n, w, np.arange(w)) for n, w in params.layout()], {"kind": "all"})

    @classmethod
    def empty(cls, params: ParamStore) -> MaskPlan:
        return cls([LayerMask(n, w, np.zeros(0, dtype=np.int64)) for n, w in params.layout()], {"kind": "none"})

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<HI", VERSION, len(self.layers))]
        for layer in self.layers:
            raw = layer.name.encode("utf-8")
            parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<QQ", layer.width, layer.count))
            parts.append(layer.indices.astype("<u8").tobytes())
        prov = json.dumps(self.provenance, sort_keys=True).encode("utf-8")
        parts.append(struct.pack("<I", len(prov)) + prov)
        body = b"".join(parts)
        return body + hashlib.sha256(body).digest()

    @classmethod
    def from_bytes(cls, data: bytes) -> MaskPlan:
        if not data.startswith(MAGIC):
            raise FormatError("not a mask file: bad magic")
        if len(data) < len(MAGIC) + 6 + 4 + 32:
            raise FormatError("truncated mask file")
        body, digest = data[:-32], data[-32:]
        try:
            version, n = struct.unpack_from("<HI", body, len(MAGIC))
            if version != VERSION:
                raise FormatError(f"unsupported mask version {version}")
            if hashlib.sha256(body).digest() != digest:
                raise FormatError("mask checksum mismatch (corrupt or truncated file)")
            pos = len(MAGIC) + 6
            layers = []
            for _ in range(n):
                (nlen,) = struct.unpack_from("<H", body, pos)
                pos += 2
                name = body[pos : pos + nlen].decode("utf-8")
                pos += nlen
                width, count = struct.unpack_from("<QQ", body, pos)
                pos += 16
                if pos + 8 * count > len(body):
                    raise FormatError(f"truncated index list for {name!r}")
                idx = np.frombuffer(body, dtype="<u8", count=count, offset=pos).astype(np.int64)
                pos += 8 * count
                if idx.size and (np.any(np.diff(idx) <= 0) or idx[-1] >= width):
                    raise FormatError(f"unsorted or out-of-range indices for {name!r}")
                layers.append(LayerMask(name, int(width), idx))
            (plen,) = struct.unpack_from("<I", body, pos)
            prov = json.loads(body[pos + 4 : pos + 4 + plen].decode("utf-8"))
            if pos + 4 + plen != len(body):
                raise FormatError("trailing bytes in mask file")
        except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"malformed mask file: {exc}") from None
        return cls(layers, prov)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def save_mask(plan: MaskPlan, path) -> str:
    data = plan.to_bytes()
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_mask(path) -> MaskPlan:
    return MaskPlan.from_bytes(Path(path).read_bytes())


def build_mask_plan(stats: DeltaStats, budget: BudgetConfig, provenance: dict | None = None) -> MaskPlan:
    """Proportional allocation followed by per-layer top-k."""
    total = stats.total_count
    h_total = budget.resolve(total)
    counts = allocate_budget([(layer.mean_abs, layer.count) for layer in stats.layers], h_total)
    layers = [LayerMask(layer.name, layer.count, topk_mask(layer.deltas, h)) for layer, h in zip(stats.layers, counts)]
    prov = {
        "method": "lwaft",
        "budget": budget.to_dict(),
        "budget_resolved": min(h_total, total),
        "delta_hash": stats.digest(),
        "tie_rule": TIE_RULE,
        "allocation": "proportional mean_abs*count, floor+largest-remainder, clamp-redistribute",
    }
    prov.update(provenance or {})
    return MaskPlan(layers, prov)


def global_topk_plan(stats: DeltaStats, budget: BudgetConfig, provenance: dict | None = None) -> MaskPlan:
    """Top-H deltas network-wide, ignoring layer structure."""
    h_total = min(budget.resolve(stats.total_count), stats.total_count)
    chosen = topk_mask(stats.flat(), h_total)
    layers, start = [], 0
    for layer in stats.layers:
        end = start + layer.count
        sel = chosen[(chosen >= start) & (chosen < end)] - start
        layers.append(LayerMask(layer.name, layer.count, sel))
        start = end
    prov = {"method": "global_topk", "budget": budget.to_dict(), "delta_hash": stats.digest(), "tie_rule": TIE_RULE}
    prov.update(provenance or {})
    return MaskPlan(layers, prov)


def layer_uniform_plan(stats: DeltaStats, budget: BudgetConfig, provenance: dict | None = None) -> MaskPlan:
    """Equal share per layer (clamped to layer size), top-k within each layer."""
    h_total = budget.resolve(stats.total_count)
    counts = allocate_budget([(1.0 / layer.count, layer.count) for layer in stats.layers], h_total)
    layers = [LayerMask(layer.name, layer.count, topk_mask(layer.deltas, h)) for layer, h in zip(stats.layers, counts)]
    prov = {"method": "layer_uniform", "budget": budget.to_dict(), "delta_hash": stats.digest(), "tie_rule": TIE_RULE}
    prov.update(provenance or {})
    return MaskPlan(layers, prov)


def random_plan_like(plan: MaskPlan, seed: int, provenance: dict | None = None) -> MaskPlan:
    """Same per-layer counts as ``plan`` with uniformly random indices."""
    rng = np.random.default_rng(seed)
    layers = [
        LayerMask(layer.name, layer.width, np.sort(rng.choice(layer.width, size=layer.count, replace=False)))
        for layer in plan.layers
    ]
    prov = {"method": "random_mask", "seed": seed, "counts_from": plan.provenance.get("delta_hash", "")}
    prov.update(provenance or {})
    return MaskPlan(layers, prov)
