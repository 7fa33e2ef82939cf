"""Activation bookkeeping: per-server expert-usage counts, entropy, coverage bounds.

Counts live in a windowed accumulator with one writer (the event loop);
readers take :meth:`ActivationStats.copy` snapshots. Layers that have seen
no traffic fall back to the uniform distribution so downstream allocation
stays well defined during cold start.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

__all__ = [
    "ActivationEvent",
    "ActivationStats",
    "CoverageBound",
    "coverage_lower_bound",
    "shannon_bits",
]


@dataclass(frozen=True)
class ActivationEvent:
    """One logged gating decision: a token batch activating top-k experts."""

    virtual_time: float
    server: int
    layer: int
    expert_ids: tuple[int, ...]
    token_count: int = 1

    def __post_init__(self) -> None:
        ids = tuple(sorted(set(int(e) for e in self.expert_ids)))
        if len(ids) != len(self.expert_ids):
            raise ValueError(f"duplicate expert ids in event: {self.expert_ids}")
        if not ids:
            raise ValueError("event must activate at least one expert")
        object.__setattr__(self, "expert_ids", ids)
        if self.token_count < 1:
            raise ValueError(f"token_count must be >= 1, got {self.token_count}")


class ActivationStats:
    """Empirical activation counts per (server, layer, expert)."""

    def __init__(
        self,
        num_servers: int,
        experts_per_layer: Sequence[int],
        *,
        window_start: float = 0.0,
        token_weighted: bool = True,
    ):
        if num_servers < 1:
            raise ValueError("need at least one server")
        self.num_servers = num_servers
        self.experts_per_layer = tuple(int(e) for e in experts_per_layer)
        self.num_layers = len(self.experts_per_layer)
        self.counts = np.zeros((num_servers, self.num_layers, max(self.experts_per_layer)), dtype=float)
        self.window_start = window_start
        self.window_end = window_start
        self.token_weighted = token_weighted

    @classmethod
    def from_counts(cls, counts, experts_per_layer: Sequence[int] | None = None, **kw) -> "ActivationStats":
        arr = np.asarray(counts, dtype=float)
        if arr.ndim != 3:
            raise ValueError(f"counts must be (servers, layers, experts), got shape {arr.shape}")
        if np.any(arr < 0):
            raise ValueError("counts must be non-negative")
        epl = tuple(experts_per_layer) if experts_per_layer is not None else (arr.shape[2],) * arr.shape[1]
        stats = cls(arr.shape[0], epl, **kw)
        stats.counts[:, :, : arr.shape[2]] = arr
        for layer, e in enumerate(epl):
            if np.any(stats.counts[:, layer, e:] != 0):
                raise ValueError(f"layer {layer} has counts beyond its {e} experts")
        return stats

    def ingest(self, event: ActivationEvent) -> "ActivationStats":
        """Fold one event into the window; rejects out-of-range indices."""
        if not 0 <= event.server < self.num_servers:
            raise ValueError(f"server index out of range in event: {event}")
        if not 0 <= event.layer < self.num_layers:
            raise ValueError(f"layer index out of range in event: {event}")
        limit = self.experts_per_layer[event.layer]
        if any(e >= limit for e in event.expert_ids):
            raise ValueError(f"expert id out of range (layer has {limit}) in event: {event}")
        weight = event.token_count if self.token_weighted else 1
        for e in event.expert_ids:
            self.counts[event.server, event.layer, e] += weight
        if event.virtual_time > self.window_end:
            self.window_end = event.virtual_time
        return self

    def frequency(self, server: int, layer: int) -> np.ndarray:
        """Normalized activation frequencies; uniform when the layer is empty."""
        e = self.experts_per_layer[layer]
        row = self.counts[server, layer, :e]
        total = row.sum()
        if total <= 0:
            return np.full(e, 1.0 / e)
        return row / total

    def entropy(self, server: int, layer: int, *, normalized: bool = False) -> float:
        """Shannon entropy in bits of the layer's frequency vector.

        With ``normalized=True`` the value is divided by log2 of the layer's
        expert count (0.0 for single-expert layers), squashing it into [0, 1].
        """
        h = shannon_bits(self.frequency(server, layer))
        if normalized:
            e = self.experts_per_layer[layer]
            return h / np.log2(e) if e > 1 else 0.0
        return h

    def layer_volume(self, server: int, layer: int) -> float:
        return float(self.counts[server, layer].sum())

    def total_volume(self) -> float:
        return float(self.counts.sum())

    def copy(self) -> "ActivationStats":
        dup = ActivationStats(
            self.num_servers,
            self.experts_per_layer,
            window_start=self.window_start,
            token_weighted=self.token_weighted,
        )
        dup.counts = self.counts.copy()
        dup.window_end = self.window_end
        return dup

    def reset_window(self, start: float) -> None:
        """Drop all counts; called when a new placement takes effect."""
        self.counts[:] = 0.0
        self.window_start = start
        self.window_end = start

    def __repr__(self) -> str:
        return (
            f"ActivationStats(servers={self.num_servers}, layers={self.num_layers}, "
            f"volume={self.total_volume():.6g}, window=[{self.window_start:.6g}, {self.window_end:.6g}])"
        )


def shannon_bits(dist: Iterable[float]) -> float:
    """Entropy in bits with 0 * log2(0) taken as 0."""
    p = np.asarray(list(dist) if not isinstance(dist, np.ndarray) else dist, dtype=float)
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum())


class CoverageBound(NamedTuple):
    k_delta: int
    bound: float
    holds: bool


def coverage_lower_bound(dist: Sequence[float], delta: float) -> CoverageBound:
    """Experts needed to cover 1-delta of the mass, with its entropy bound.

    ``k_delta`` counts experts taken in descending probability until the
    cumulative mass reaches 1-delta; ``bound`` is 2**(H - delta * log2 E).
    The bound is asymptotic and can fail for tiny expert counts, so the
    comparison is reported in ``holds`` rather than enforced.
    """
    if not 0 < delta < 1:
        raise ValueError(f"delta must be in (0, 1), got {delta}")
    p = np.asarray(dist, dtype=float)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("dist must be a non-empty vector")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("dist must be non-negative and sum to 1")
    ordered = np.sort(p)[::-1]
    cum = np.cumsum(ordered)
    k = int(np.searchsorted(cum, 1.0 - delta - 1e-12) + 1)
    bound = float(2.0 ** (shannon_bits(p) - delta * np.log2(p.size)))
    return CoverageBound(k, bound, k >= bound)
