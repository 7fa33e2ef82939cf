"""Latency and cost arithmetic for placements.

Covers the frequency-weighted remote-invocation objective, the linear
communication/computation estimators the simulator timestamps with, expert
migration costing, and the migrate-or-stay decision rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .domain import ClusterSpec, ModelSpec, Placement
from .stats import ActivationStats

__all__ = [
    "CostSnapshot",
    "ExpertInvocation",
    "TimeModel",
    "UnplacedExpertError",
    "comm_time",
    "comp_time",
    "layer_latency",
    "migration_cost",
    "proxy_cost",
    "remote_indicator",
    "remote_volume",
    "should_migrate",
]


class UnplacedExpertError(RuntimeError):
    """An invocation targets a server that holds no copy of the expert."""


@dataclass
class TimeModel:
    """Linear per-server compute estimator plus the cluster's link matrices.

    Compute for a token batch is ``(comp_base + comp_per_token * tokens) *
    load_multiplier``; multipliers start at 1 and are refreshed by the
    simulator between events from observed concurrency.
    """

    comp_base: np.ndarray        # (N,) seconds
    comp_per_token: np.ndarray   # (N,) seconds per token
    link_bandwidth: np.ndarray   # (N, N) bytes/s
    link_latency: np.ndarray     # (N, N) seconds
    load_multiplier: np.ndarray = field(default=None)

    def __post_init__(self) -> None:
        self.comp_base = np.array(self.comp_base, dtype=float)
        self.comp_per_token = np.array(self.comp_per_token, dtype=float)
        n = self.comp_base.size
        if self.comp_per_token.size != n:
            raise ValueError("comp_base and comp_per_token must have one entry per server")
        if np.any(self.comp_base < 0) or np.any(self.comp_per_token < 0):
            raise ValueError("compute coefficients must be non-negative")
        if self.load_multiplier is None:
            self.load_multiplier = np.ones(n)
        else:
            self.load_multiplier = np.array(self.load_multiplier, dtype=float)
            if np.any(self.load_multiplier < 1):
                raise ValueError("load multipliers must be >= 1")

    @classmethod
    def from_cluster(
        cls,
        cluster: ClusterSpec,
        comp_base: float | Sequence[float] = 2e-3,
        comp_per_token: float | Sequence[float] = 5e-5,
    ) -> "TimeModel":
        n = cluster.num_servers
        base = np.full(n, comp_base) if np.isscalar(comp_base) else np.asarray(comp_base, dtype=float)
        per_tok = np.full(n, comp_per_token) if np.isscalar(comp_per_token) else np.asarray(comp_per_token, dtype=float)
        return cls(base, per_tok, cluster.link_bandwidth.copy(), cluster.link_latency.copy())

    def copy(self) -> "TimeModel":
        return TimeModel(
            self.comp_base.copy(), self.comp_per_token.copy(),
            self.link_bandwidth.copy(), self.link_latency.copy(),
            self.load_multiplier.copy(),
        )


@dataclass(frozen=True)
class ExpertInvocation:
    """One routed token batch: origin server calling an expert on a target GPU."""

    origin_server: int
    target_server: int
    target_gpu: int
    layer: int
    expert: int
    token_count: int

    def __post_init__(self) -> None:
        if self.token_count < 1:
            raise ValueError(f"token_count must be >= 1, got {self.token_count}")


def remote_indicator(placement: Placement, server: int, layer: int, expert: int) -> int:
    """1 when the expert is absent from every GPU of the server, else 0."""
    return 0 if placement.has_local(server, layer, expert) else 1


def proxy_cost(placement: Placement, stats: ActivationStats) -> float:
    """Expected frequency mass served remotely, summed over servers and layers."""
    total = 0.0
    for n in range(placement.num_servers):
        for layer in range(placement.num_layers):
            freq = stats.frequency(n, layer)
            local = placement.server_experts(n, layer)
            total += float(freq.sum() - sum(freq[e] for e in local))
    return total


def remote_volume(placement: Placement, stats: ActivationStats) -> float:
    """Token-weighted count of window activations that would go remote."""
    total = 0.0
    for n in range(stats.num_servers):
        for layer in range(stats.num_layers):
            e = stats.experts_per_layer[layer]
            row = stats.counts[n, layer, :e]
            local = placement.server_experts(n, layer)
            total += float(row.sum() - sum(row[i] for i in local))
    return total


def comp_time(model: TimeModel, server: int, tokens: int) -> float:
    """Load-scaled linear compute estimate for a token batch on a server."""
    tokens = max(1, int(tokens))
    return float((model.comp_base[server] + model.comp_per_token[server] * tokens)
                 * model.load_multiplier[server])


def comm_time(model: TimeModel, src: int, dst: int, tokens: int, model_spec: ModelSpec) -> float:
    """Round-trip transfer time for a remote call; zero for local calls.

    The payload crosses the link twice (activations out, results back), so
    the bandwidth term carries a factor of two on top of the one-way
    message latency.
    """
    if src == dst:
        return 0.0
    payload = model_spec.token_payload_bytes(max(1, int(tokens)))
    return float(model.link_latency[src, dst] + 2.0 * payload / model.link_bandwidth[src, dst])


def layer_latency(
    invocations: Iterable[ExpertInvocation],
    placement: Placement,
    time_model: TimeModel,
    model_spec: ModelSpec,
) -> float:
    """Slowest invocation of the layer: max over comm plus target compute."""
    worst = 0.0
    for inv in invocations:
        if not placement.has_local(inv.target_server, inv.layer, inv.expert):
            raise UnplacedExpertError(
                f"expert {inv.expert} of layer {inv.layer} is not on server {inv.target_server}")
        t = comm_time(time_model, inv.origin_server, inv.target_server, inv.token_count, model_spec) \
            + comp_time(time_model, inv.target_server, inv.token_count)
        if t > worst:
            worst = t
    return worst


def migration_cost(
    old: Placement,
    new: Placement,
    cluster: ClusterSpec,
    model_spec: ModelSpec,
    mode: str = "literal",
) -> float:
    """Weight-transfer seconds for switching placements.

    ``literal`` charges every differing (server, gpu, expert) slot at
    expert_size / gpu load bandwidth; ``loads-only`` charges only slots
    being added.
    """
    if mode not in ("literal", "loads-only"):
        raise ValueError(f"unknown migration cost mode {mode!r}")
    added = new.slots - old.slots
    changed = added if mode == "loads-only" else added | (old.slots - new.slots)
    total = 0.0
    for n, g, _layer, _expert in changed:
        total += model_spec.expert_size / cluster.gpu(n, g).load_bandwidth
    return total


@dataclass(frozen=True)
class CostSnapshot:
    """Window observations needed to price a placement in seconds.

    ``avg_remote_penalty_seconds`` is the mean extra time a remote
    invocation cost over serving it locally, per token-weighted activation
    unit, observed since the window opened.
    """

    stats: ActivationStats
    avg_remote_penalty_seconds: float
    window_start: float
    window_end: float

    def __post_init__(self) -> None:
        if self.avg_remote_penalty_seconds < 0:
            raise ValueError("remote penalty must be non-negative")

    def expected_cost_seconds(self, placement: Placement) -> float:
        """Projected remote-invocation cost if the window's traffic repeats."""
        return self.avg_remote_penalty_seconds * remote_volume(placement, self.stats)


def should_migrate(
    old: Placement,
    candidate: Placement,
    snapshot: CostSnapshot,
    cluster: ClusterSpec,
    model_spec: ModelSpec,
    cost_mode: str = "literal",
) -> tuple[bool, dict]:
    """Adopt the candidate only when its cost plus transfer strictly undercuts.

    Returns the decision plus an audit record carrying every quantity that
    entered it.
    """
    cost_old = snapshot.expected_cost_seconds(old)
    cost_new = snapshot.expected_cost_seconds(candidate)
    transfer = migration_cost(old, candidate, cluster, model_spec, cost_mode)
    decision = cost_new + transfer < cost_old
    ledger = {
        "decision": "adopted" if decision else "rejected",
        "cost_current_seconds": cost_old,
        "cost_candidate_seconds": cost_new,
        "migration_seconds": transfer,
        "proxy_current": proxy_cost(old, snapshot.stats),
        "proxy_candidate": proxy_cost(candidate, snapshot.stats),
        "remote_volume_current": remote_volume(old, snapshot.stats),
        "remote_volume_candidate": remote_volume(candidate, snapshot.stats),
        "avg_remote_penalty_seconds": snapshot.avg_remote_penalty_seconds,
        "window_start": snapshot.window_start,
        "window_end": snapshot.window_end,
        "cost_mode": cost_mode,
    }
    return decision, ledger
