"""Per-parameter absolute change between a base and an expert checkpoint."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .params import ParamStore, check_layout

MARKER = 0.005


def default_edges() -> np.ndarray:
    """25 log-spaced bins over [1e-8, 1] with the 0.005 marker added as an edge."""
    return np.unique(np.concatenate([np.logspace(-8, 0, 26), [MARKER]]))


@dataclass
class LayerDelta:
    name: str
    deltas: np.ndarray

    @property
    def mean_abs(self) -> float:
        return float(self.deltas.mean())

    @property
    def count(self) -> int:
        return int(self.deltas.size)


class DeltaStats:
    def __init__(self, layers: list[LayerDelta]):
        self.layers = layers

    def __iter__(self):
        return iter(self.layers)

    def __getitem__(self, name: str) -> LayerDelta:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    @property
    def total_count(self) -> int:
        return sum(layer.count for layer in self.layers)

    def flat(self) -> np.ndarray:
        return np.concatenate([layer.deltas for layer in self.layers])

    def fraction_above(self, threshold: float = MARKER) -> float:
        return float((self.flat() > threshold).sum()) / self.total_count

    def digest(self) -> str:
        h = hashlib.sha256()
        for layer in self.layers:
            h.update(layer.name.encode())
            h.update(layer.deltas.astype("<f8").tobytes())
        return h.hexdigest()


def param_delta(base: ParamStore, expert: ParamStore) -> DeltaStats:
    check_layout(base, expert, "base/expert layouts")
    return DeltaStats([LayerDelta(name, np.abs(expert[name] - base[name])) for name in base])


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray  # len(edges) + 1: underflow, interior bins, overflow
    fraction_above: float
    threshold: float

    def rows(self) -> list[tuple[float, float, int]]:
        lows = np.concatenate([[-np.inf], self.edges])
        highs = np.concatenate([self.edges, [np.inf]])
        return [(float(lo), float(hi), int(c)) for lo, hi, c in zip(lows, highs, self.counts)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_low", "bin_high", "count"])
            for lo, hi, c in self.rows():
                w.writerow([repr(lo), repr(hi), c])


def delta_histogram(stats: DeltaStats, edges=None, threshold: float = MARKER) -> Histogram:
    """Counts per ``[edge_i, edge_i+1)`` bin plus explicit underflow/overflow bins."""
    edges = default_edges() if edges is None else np.asarray(edges, dtype=float)
    if edges.size == 0:
        raise ValidationError("histogram edges are empty")
    if np.any(np.diff(edges) <= 0):
        raise ValidationError("histogram edges must be strictly increasing")
    flat = stats.flat()
    counts = np.bincount(np.searchsorted(edges, flat, side="right"), minlength=edges.size + 1)
    return Histogram(edges, counts, stats.fraction_above(threshold), threshold)


def layer_profile(stats: DeltaStats) -> list[tuple[str, float, int]]:
    """``(layer_name, mean |delta|, parameter count)`` in checkpoint order."""
    return [(layer.name, layer.mean_abs, layer.count) for layer in stats.layers]


def write_profile_csv(profile, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer_name", "mean_abs", "count"])
        for name, mean, count in profile:
            w.writerow([name, repr(mean), count])
