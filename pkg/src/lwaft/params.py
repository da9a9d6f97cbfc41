"""Named flat parameter storage and the binary checkpoint format.

Checkpoint layout (all integers little-endian)::

    b"LWAFT\\0"  u16 version  u32 n_layers
    n_layers x [u16 name_len, name (UTF-8), u64 offset, u64 count]
    payload: float64 values of every layer, contiguous, in table order

Offsets count float64 elements from the start of the payload.
"""

from __future__ import annotations

import hashlib
import struct
from collections.abc import Iterable, Iterator
from pathlib import Path

import numpy as np

from .errors import FormatError, LayoutMismatchError, ValidationError

MAGIC = b"LWAFT\0"
VERSION = 1


class ParamStore:
    """Ordered mapping of layer name to a flat float64 vector.

    ``version`` increments on every in-place update so activation caches can
    detect that they were computed against older values.
    """

    def __init__(self, layers: Iterable[tuple[str, np.ndarray]] = ()):
        self._layers: dict[str, np.ndarray] = {}
        for name, values in layers:
            if name in self._layers:
                raise ValidationError(f"duplicate layer name {name!r}")
            arr = np.ascontiguousarray(values, dtype=np.float64).reshape(-1)
            if arr.size == 0:
                raise ValidationError(f"layer {name!r} is empty")
            self._layers[name] = arr
        self.version = 0

    def __getitem__(self, name: str) -> np.ndarray:
        return self._layers[name]

    def __contains__(self, name: object) -> bool:
        return name in self._layers

    def __iter__(self) -> Iterator[str]:
        return iter(self._layers)

    def __len__(self) -> int:
        return len(self._layers)

    def items(self):
        return self._layers.items()

    @property
    def names(self) -> list[str]:
        return list(self._layers)

    @property
    def total_count(self) -> int:
        return sum(v.size for v in self._layers.values())

    def layout(self) -> list[tuple[str, int]]:
        return [(k, v.size) for k, v in self._layers.items()]

    def copy(self) -> ParamStore:
        return type(self)((k, v.copy()) for k, v in self._layers.items())

    def bump(self) -> None:
        self.version += 1

    def is_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self._layers.values())

    def flat(self) -> np.ndarray:
        return np.concatenate(list(self._layers.values()))

    def equals(self, other: ParamStore) -> bool:
        """Bit-level equality, including layout."""
        if self.layout() != other.layout():
            return False
        return all(np.array_equal(self[k].view(np.uint64), other[k].view(np.uint64)) for k in self)

    def to_bytes(self) -> bytes:
        header = [MAGIC, struct.pack("<HI", VERSION, len(self._layers))]
        offset = 0
        for name, values in self._layers.items():
            raw = name.encode("utf-8")
            header.append(struct.pack("<H", len(raw)) + raw + struct.pack("<QQ", offset, values.size))
            offset += values.size
        payload = [v.astype("<f8", copy=False).tobytes() for v in self._layers.values()]
        return b"".join(header + payload)

    @classmethod
    def from_bytes(cls, data: bytes) -> ParamStore:
        if not data.startswith(MAGIC):
            raise FormatError("not a checkpoint: bad magic")
        pos = len(MAGIC)
        try:
            version, n = struct.unpack_from("<HI", data, pos)
            pos += 6
            if version != VERSION:
                raise FormatError(f"unsupported checkpoint version {version}")
            table = []
            for _ in range(n):
                (nlen,) = struct.unpack_from("<H", data, pos)
                pos += 2
                name = data[pos : pos + nlen].decode("utf-8")
                pos += nlen
                offset, count = struct.unpack_from("<QQ", data, pos)
                pos += 16
                table.append((name, offset, count))
        except struct.error as exc:
            raise FormatError(f"truncated checkpoint header: {exc}") from None
        if (len(data) - pos) % 8:
            raise FormatError("checkpoint payload is not a whole number of float64 values")
        payload = np.frombuffer(data, dtype="<f8", offset=pos) if len(data) > pos else np.zeros(0)
        layers = []
        for name, offset, count in table:
            if offset + count > payload.size:
                raise FormatError(f"truncated payload for layer {name!r}")
            layers.append((name, payload[offset : offset + count].astype(np.float64)))
        return cls(layers)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> ParamStore:
        return cls.from_bytes(Path(path).read_bytes())

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def __repr__(self) -> str:
        return f"{type(self).__name__}({len(self)} layers, {self.total_count} values)"


class GradStore(ParamStore):
    """Gradients laid out exactly like their parameter store."""

    @classmethod
    def zeros_like(cls, params: ParamStore) -> GradStore:
        return cls((k, np.zeros_like(v)) for k, v in params.items())


def check_layout(a: ParamStore, b: ParamStore, what: str = "layouts") -> None:
    """Raise naming the first divergent layer if the two layouts differ."""
    la, lb = a.layout(), b.layout()
    for (na, ca), (nb, cb) in zip(la, lb):
        if na != nb or ca != cb:
            raise LayoutMismatchError(f"{what} differ at layer {na!r} ({ca}) vs {nb!r} ({cb})")
    if len(la) != len(lb):
        extra = la[len(lb)][0] if len(la) > len(lb) else lb[len(la)][0]
        raise LayoutMismatchError(f"{what} differ: layer count {len(la)} vs {len(lb)} (first extra {extra!r})")


def changed_indices(before: ParamStore, after: ParamStore) -> dict[str, np.ndarray]:
    """Per-layer indices whose bit patterns differ."""
    check_layout(before, after)
    return {k: np.flatnonzero(before[k].view(np.uint64) != after[k].view(np.uint64)) for k in before}
