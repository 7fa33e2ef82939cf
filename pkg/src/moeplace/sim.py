"""Deterministic event-driven simulator for distributed MoE serving.

Requests arrive per server on seeded Poisson processes, walk the model's
layers in order, and fan each layer out to the experts their trace selected.
Local experts run on the origin server; missing ones are invoked remotely on
the cheapest holder. The loop also drives periodic load-multiplier updates,
migration checks, and the audit trail those decisions leave behind.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .cost import CostSnapshot, TimeModel, comm_time, comp_time, should_migrate
from .domain import ClusterSpec, ModelSpec, Placement, validate_placement
from .placement import build_placement
from .stats import ActivationEvent, ActivationStats

__all__ = [
    "EVENT_KINDS",
    "Metrics",
    "RequestRecord",
    "InvocationRecord",
    "SchedulerPolicy",
    "ServerWorkload",
    "WorkloadSpec",
    "RequestTrace",
    "format_sig",
    "generate_workload",
    "local_compute_ratio",
    "replay_shift",
    "round_sig",
    "run",
    "stats_from_requests",
]

EVENT_KINDS = (
    "arrival",
    "layer_dispatch",
    "expert_complete",
    "layer_complete",
    "request_complete",
    "stats_tick",
    "migration_check",
    "migration_complete",
)
_KIND = {name: i for i, name in enumerate(EVENT_KINDS)}

# Strategies that re-run their placement at migration checks; the two
# static baselines keep their initial layout for the whole run.
_MIGRATABLE = ("ours", "smartmoe", "eplb", "oracle")


def format_sig(value: float) -> str:
    """Fixed 6-significant-digit rendering used by every numeric output."""
    return f"{value:.6g}"


def round_sig(tree):
    """Recursively round floats in a JSON-ish tree to 6 significant digits."""
    if isinstance(tree, float):
        return float(format_sig(tree))
    if isinstance(tree, dict):
        return {k: round_sig(v) for k, v in tree.items()}
    if isinstance(tree, (list, tuple)):
        return [round_sig(v) for v in tree]
    return tree


@dataclass(frozen=True)
class ServerWorkload:
    """Arrival process and expert-selection source for one server's requests.

    Expert sets are sampled without replacement from per-layer probability
    vectors: either explicit ones (``expert_dists``, e.g. frequencies
    replayed from a recorded trace) or fresh Dirichlet draws with
    concentration ``dirichlet_alpha``.
    """

    mean_interarrival: float
    num_requests: int
    tokens: int | tuple[int, ...] = 64
    dirichlet_alpha: float | None = None
    expert_dists: tuple | None = None  # per-layer probability vectors
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mean_interarrival <= 0:
            raise ValueError("mean_interarrival must be positive")
        if self.num_requests < 1:
            raise ValueError("num_requests must be >= 1")
        if isinstance(self.tokens, int):
            if self.tokens < 1:
                raise ValueError("token count must be >= 1")
        else:
            toks = tuple(int(t) for t in self.tokens)
            if not toks or any(t < 1 for t in toks):
                raise ValueError("empirical token list must be non-empty positive ints")
            object.__setattr__(self, "tokens", toks)
        if (self.dirichlet_alpha is None) == (self.expert_dists is None):
            raise ValueError("provide exactly one of dirichlet_alpha or expert_dists")
        if self.dirichlet_alpha is not None and self.dirichlet_alpha <= 0:
            raise ValueError("dirichlet_alpha must be positive")
        if self.expert_dists is not None:
            object.__setattr__(self, "expert_dists",
                               tuple(np.asarray(d, dtype=float) for d in self.expert_dists))


@dataclass(frozen=True)
class WorkloadSpec:
    per_server: tuple[ServerWorkload, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "per_server", tuple(self.per_server))
        if not self.per_server:
            raise ValueError("workload needs at least one server entry")

    @classmethod
    def synthetic(
        cls,
        num_servers: int,
        mean_interarrival: float,
        num_requests: int,
        tokens: int | tuple[int, ...] = 64,
        dirichlet_alpha: float = 0.3,
        seed: int = 0,
    ) -> "WorkloadSpec":
        """Skewed synthetic workload with per-server seeds derived from one base."""
        return cls(tuple(
            ServerWorkload(mean_interarrival, num_requests, tokens,
                           dirichlet_alpha=dirichlet_alpha, seed=seed + n)
            for n in range(num_servers)
        ))


@dataclass(frozen=True)
class RequestTrace:
    """One generated request: arrival plus the expert set of every layer."""

    request_id: int
    server: int
    arrival: float
    tokens: int
    layer_experts: tuple[tuple[int, ...], ...]
    phase: int = 0


def _selection_dists(sw: ServerWorkload, model: ModelSpec, rng: np.random.Generator) -> list[np.ndarray]:
    dists = []
    for layer in range(model.num_layers):
        e = model.experts_per_layer[layer]
        if sw.expert_dists is not None:
            p = np.asarray(sw.expert_dists[layer], dtype=float)[:e]
            p = p / p.sum() if p.sum() > 0 else np.full(e, 1.0 / e)
        else:
            p = rng.dirichlet(np.full(e, sw.dirichlet_alpha))
        # tiny uniform floor so top-k sampling never runs out of support
        p = p * (1.0 - 1e-9) + 1e-9 / e
        dists.append(p / p.sum())
    return dists


def generate_workload(spec: WorkloadSpec, model: ModelSpec) -> list[RequestTrace]:
    """Seeded, reproducible request traces sorted by arrival time."""
    raw: list[tuple] = []
    for n, sw in enumerate(spec.per_server):
        rng = np.random.default_rng([n, sw.seed])
        dists = _selection_dists(sw, model, rng)
        t = 0.0
        for i in range(sw.num_requests):
            t += float(rng.exponential(sw.mean_interarrival))
            if isinstance(sw.tokens, int):
                tokens = sw.tokens
            else:
                tokens = int(sw.tokens[rng.integers(len(sw.tokens))])
            sets = tuple(
                tuple(sorted(int(e) for e in rng.choice(
                    model.experts_per_layer[layer], size=model.top_k, replace=False, p=dists[layer])))
                for layer in range(model.num_layers)
            )
            raw.append((t, n, i, tokens, sets))
    raw.sort(key=lambda r: (r[0], r[1], r[2]))
    return [
        RequestTrace(rid, server, arrival, tokens, sets)
        for rid, (arrival, server, _i, tokens, sets) in enumerate(raw)
    ]


def stats_from_requests(
    requests: Sequence[RequestTrace],
    model: ModelSpec,
    num_servers: int,
    token_weighted: bool = True,
) -> ActivationStats:
    """Fold a request trace into activation counts, as the scheduler would log it."""
    stats = ActivationStats(num_servers, model.experts_per_layer, token_weighted=token_weighted)
    for req in requests:
        for layer, experts in enumerate(req.layer_experts):
            stats.ingest(ActivationEvent(req.arrival, req.server, layer, experts, req.tokens))
    return stats


@dataclass(frozen=True)
class SchedulerPolicy:
    """Everything the event loop needs beyond cluster, model, and workload."""

    migration_enabled: bool = True
    migration_interval: float = 300.0
    stats_tick_seconds: float = 30.0
    cost_mode: str = "literal"
    non_moe_seconds: float = 0.0   # per-layer constant for attention/gating
    ratio_window: float = 30.0

    def __post_init__(self) -> None:
        if self.migration_interval <= 0 or self.stats_tick_seconds <= 0 or self.ratio_window <= 0:
            raise ValueError("intervals must be positive")
        if self.non_moe_seconds < 0:
            raise ValueError("non_moe_seconds must be non-negative")


@dataclass(frozen=True)
class RequestRecord:
    request_id: int
    server: int
    arrival: float
    completion: float
    tokens: int
    remote_invocations: int
    phase: int = 0

    @property
    def latency(self) -> float:
        return self.completion - self.arrival


@dataclass(frozen=True)
class InvocationRecord:
    time: float
    origin: int
    target: int
    layer: int
    expert: int
    tokens: int
    phase: int = 0

    @property
    def local(self) -> bool:
        return self.origin == self.target


@dataclass(frozen=True)
class Metrics:
    """Everything a run produced, with serialization that is byte-stable."""

    requests: tuple[RequestRecord, ...]
    invocations: tuple[InvocationRecord, ...]
    migration_checks: tuple[dict, ...]
    migrations: tuple[dict, ...]
    remote_bytes: float
    num_servers: int
    final_placement: Placement

    @property
    def makespan(self) -> float:
        return max((r.completion for r in self.requests), default=0.0)

    def latencies(self, server: int | None = None, phase: int | None = None) -> np.ndarray:
        vals = [r.latency for r in self.requests
                if (server is None or r.server == server) and (phase is None or r.phase == phase)]
        return np.asarray(vals, dtype=float)

    def mean_latency(self, server: int | None = None, phase: int | None = None) -> float:
        lat = self.latencies(server, phase)
        return float(lat.mean()) if lat.size else 0.0

    def local_ratio(
        self,
        phase: int | None = None,
        t_min: float | None = None,
        t_max: float | None = None,
    ) -> float:
        """Token-weighted share of invocations served without leaving the origin."""
        local = total = 0.0
        for inv in self.invocations:
            if phase is not None and inv.phase != phase:
                continue
            if t_min is not None and inv.time < t_min:
                continue
            if t_max is not None and inv.time >= t_max:
                continue
            total += inv.tokens
            if inv.local:
                local += inv.tokens
        return local / total if total > 0 else 0.0

    def final_local_ratio(self, fraction: float = 0.25) -> float:
        """Local ratio over the trailing fraction of the invocation time span."""
        if not self.invocations:
            return 0.0
        end = max(inv.time for inv in self.invocations)
        return self.local_ratio(t_min=end * (1.0 - fraction) if end > 0 else None)

    def requests_csv(self) -> str:
        lines = ["id,server,arrival,completion,latency,remote_invocations"]
        for r in self.requests:
            lines.append(
                f"{r.request_id},{r.server},{format_sig(r.arrival)},{format_sig(r.completion)},"
                f"{format_sig(r.latency)},{r.remote_invocations}")
        return "\n".join(lines) + "\n"

    def summary_dict(self) -> dict:
        lat = self.latencies()
        per_server = []
        for n in range(self.num_servers):
            srv = self.latencies(server=n)
            per_server.append({
                "server": n,
                "requests": int(srv.size),
                "mean_latency": float(srv.mean()) if srv.size else 0.0,
                "median_latency": float(np.median(srv)) if srv.size else 0.0,
                "p95_latency": float(np.percentile(srv, 95)) if srv.size else 0.0,
            })
        doc = {
            "requests": len(self.requests),
            "mean_latency": float(lat.mean()) if lat.size else 0.0,
            "median_latency": float(np.median(lat)) if lat.size else 0.0,
            "p95_latency": float(np.percentile(lat, 95)) if lat.size else 0.0,
            "per_server": per_server,
            "local_ratio_overall": self.local_ratio(),
            "local_ratio_final": self.final_local_ratio(),
            "remote_bytes": self.remote_bytes,
            "migrations": len(self.migrations),
            "makespan": self.makespan,
        }
        phases = sorted({r.phase for r in self.requests})
        if len(phases) > 1:
            doc["phases"] = [
                {
                    "phase": p,
                    "requests": int(self.latencies(phase=p).size),
                    "mean_latency": self.mean_latency(phase=p),
                    "local_ratio": self.local_ratio(phase=p),
                }
                for p in phases
            ]
        return doc

    def summary_json(self) -> str:
        return json.dumps(round_sig(self.summary_dict()), indent=2, sort_keys=True) + "\n"

    def migrations_jsonl(self) -> str:
        return "".join(json.dumps(round_sig(entry), sort_keys=True) + "\n"
                       for entry in self.migration_checks)


def local_compute_ratio(metrics: Metrics, window: float) -> tuple[np.ndarray, np.ndarray]:
    """Windowed local-compute ratio time series over the run.

    Returns window start times and the token-weighted local share within
    each window; windows with no traffic are dropped.
    """
    if window <= 0:
        raise ValueError("window must be positive")
    local: dict[int, float] = {}
    total: dict[int, float] = {}
    for inv in metrics.invocations:
        b = int(inv.time // window)
        total[b] = total.get(b, 0.0) + inv.tokens
        if inv.local:
            local[b] = local.get(b, 0.0) + inv.tokens
    buckets = sorted(total)
    starts = np.asarray([b * window for b in buckets])
    ratios = np.asarray([local.get(b, 0.0) / total[b] for b in buckets])
    return starts, ratios


class _EventLoop:
    def __init__(
        self,
        cluster: ClusterSpec,
        model: ModelSpec,
        strategy: str,
        requests: Sequence[RequestTrace],
        time_model: TimeModel,
        policy: SchedulerPolicy,
        initial_stats: ActivationStats,
        seed: int,
    ):
        self.cluster = cluster
        self.model = model
        self.strategy = strategy
        self.requests = list(requests)
        self.tm = time_model.copy()
        self.policy = policy
        self.seed = seed

        self.placement = build_placement(strategy, cluster, model, initial_stats, seed)
        report = validate_placement(self.placement, cluster, model)
        if not report.ok:
            raise RuntimeError(f"initial placement invalid: {report}")

        self.window_stats = ActivationStats(cluster.num_servers, model.experts_per_layer)
        self.migration_on = policy.migration_enabled and strategy in _MIGRATABLE
        self.pending: Placement | None = None

        self.heap: list = []
        self.seq = 0
        self.completed = 0
        self.active = np.zeros(cluster.num_servers, dtype=int)
        self.penalty_seconds = 0.0
        self.penalty_volume = 0.0

        self.records: list[RequestRecord] = []
        self.inv_log: list[InvocationRecord] = []
        self.checks: list[dict] = []
        self.migrations: list[dict] = []
        self.remote_bytes = 0.0
        self.remote_per_request = {r.request_id: 0 for r in self.requests}
        self.by_id = {r.request_id: r for r in self.requests}

    def push(self, time: float, kind: str, rid: int = -1, payload=None) -> None:
        heapq.heappush(self.heap, (time, _KIND[kind], rid, self.seq, payload))
        self.seq += 1

    def _work_remaining(self) -> bool:
        return self.completed < len(self.requests) or self.pending is not None

    def _choose_target(self, origin: int, layer: int, expert: int, tokens: int) -> int:
        if self.placement.has_local(origin, layer, expert):
            return origin
        holders = self.placement.holders(layer, expert)
        if not holders:
            raise RuntimeError(f"expert {expert} of layer {layer} is placed nowhere")
        return min(holders, key=lambda n: (comm_time(self.tm, origin, n, tokens, self.model), n))

    def _dispatch_layer(self, t: float, rid: int, layer: int) -> None:
        req = self.by_id[rid]
        experts = req.layer_experts[layer]
        self.window_stats.ingest(ActivationEvent(t, req.server, layer, experts, req.tokens))

        finish: dict[int, float] = {}
        for e in experts:
            target = self._choose_target(req.server, layer, e, req.tokens)
            comm = comm_time(self.tm, req.server, target, req.tokens, self.model)
            comp = comp_time(self.tm, target, req.tokens)
            self.inv_log.append(InvocationRecord(t, req.server, target, layer, e, req.tokens, req.phase))
            if target != req.server:
                self.remote_per_request[rid] += 1
                self.remote_bytes += 2.0 * self.model.token_payload_bytes(req.tokens)
                self.penalty_seconds += comm + comp - comp_time(self.tm, req.server, req.tokens)
                self.penalty_volume += req.tokens
            finish[target] = max(finish.get(target, 0.0), comm + comp)

        base = t + self.policy.non_moe_seconds
        for target, dt in sorted(finish.items()):
            self.active[target] += 1
            self.push(base + dt, "expert_complete", rid, target)
        self.push(base + max(finish.values()), "layer_complete", rid, layer)

    def _migration_check(self, t: float) -> None:
        if self.pending is not None:
            self.checks.append({"time": t, "decision": "deferred_migration_in_progress"})
            return
        penalty = max(0.0, self.penalty_seconds / self.penalty_volume) if self.penalty_volume > 0 else 0.0
        snapshot = CostSnapshot(self.window_stats.copy(), penalty, self.window_stats.window_start, t)
        candidate = build_placement(self.strategy, self.cluster, self.model, snapshot.stats, self.seed)
        decision, ledger = should_migrate(
            self.placement, candidate, snapshot, self.cluster, self.model, self.policy.cost_mode)
        ledger["time"] = t
        if decision:
            done = t + ledger["migration_seconds"]
            ledger["completes_at"] = done
            self.pending = candidate
            self.push(done, "migration_complete")
            self.migrations.append(ledger)
        self.checks.append(ledger)

    def run(self) -> Metrics:
        for req in self.requests:
            self.push(req.arrival, "arrival", req.request_id)
        if self.requests:
            self.push(self.policy.stats_tick_seconds, "stats_tick")
            if self.migration_on:
                self.push(self.policy.migration_interval, "migration_check")

        while self.heap:
            t, kind_idx, rid, _seq, payload = heapq.heappop(self.heap)
            kind = EVENT_KINDS[kind_idx]
            if kind == "arrival":
                self.push(t, "layer_dispatch", rid, 0)
            elif kind == "layer_dispatch":
                self._dispatch_layer(t, rid, payload)
            elif kind == "expert_complete":
                self.active[payload] -= 1
            elif kind == "layer_complete":
                nxt = payload + 1
                if nxt < self.model.num_layers:
                    self.push(t, "layer_dispatch", rid, nxt)
                else:
                    self.push(t, "request_complete", rid)
            elif kind == "request_complete":
                req = self.by_id[rid]
                self.records.append(RequestRecord(
                    rid, req.server, req.arrival, t, req.tokens,
                    self.remote_per_request[rid], req.phase))
                self.completed += 1
            elif kind == "stats_tick":
                self.tm.load_multiplier = np.maximum(1, self.active).astype(float)
                if self._work_remaining():
                    self.push(t + self.policy.stats_tick_seconds, "stats_tick")
            elif kind == "migration_check":
                if self.completed < len(self.requests):
                    self._migration_check(t)
                    self.push(t + self.policy.migration_interval, "migration_check")
            elif kind == "migration_complete":
                self.placement = self.pending
                self.pending = None
                self.window_stats.reset_window(t)
                self.penalty_seconds = 0.0
                self.penalty_volume = 0.0

        if self.completed != len(self.requests):
            raise RuntimeError(
                f"event loop lost requests: {self.completed} completed of {len(self.requests)}")
        self.records.sort(key=lambda r: r.request_id)
        return Metrics(
            requests=tuple(self.records),
            invocations=tuple(self.inv_log),
            migration_checks=tuple(self.checks),
            migrations=tuple(self.migrations),
            remote_bytes=self.remote_bytes,
            num_servers=self.cluster.num_servers,
            final_placement=self.placement,
        )


def run(
    cluster: ClusterSpec,
    model: ModelSpec,
    strategy: str,
    workload: WorkloadSpec | Sequence[RequestTrace],
    time_model: TimeModel,
    policy: SchedulerPolicy | None = None,
    *,
    initial_stats: ActivationStats | None = None,
    seed: int = 0,
) -> Metrics:
    """Simulate a workload end to end under one placement strategy.

    ``workload`` is either a :class:`WorkloadSpec` to generate or an already
    generated request list. Without ``initial_stats`` the placement is fit to
    the workload's own activations, the scheduler's idealized warm start.
    """
    policy = policy or SchedulerPolicy()
    if isinstance(workload, WorkloadSpec):
        requests = generate_workload(workload, model)
    else:
        requests = list(workload)
    if initial_stats is None:
        initial_stats = stats_from_requests(requests, model, cluster.num_servers)
    loop = _EventLoop(cluster, model, strategy, requests, time_model, policy, initial_stats, seed)
    return loop.run()


def replay_shift(
    cluster: ClusterSpec,
    model: ModelSpec,
    strategy: str,
    workload_a: WorkloadSpec,
    workload_b: WorkloadSpec,
    time_model: TimeModel,
    policy: SchedulerPolicy | None = None,
    *,
    seed: int = 0,
) -> Metrics:
    """Two-phase run: placement fit to phase A, then phase B's traffic arrives.

    Phase B arrivals start one mean inter-arrival after phase A's last
    request; records carry phase tags so recovery can be read per phase.
    """
    reqs_a = generate_workload(workload_a, model)
    reqs_b = generate_workload(workload_b, model)
    offset = max(r.arrival for r in reqs_a) + max(sw.mean_interarrival for sw in workload_b.per_server)
    base = len(reqs_a)
    shifted = [replace(r, request_id=base + r.request_id, arrival=r.arrival + offset, phase=1)
               for r in reqs_b]
    initial = stats_from_requests(reqs_a, model, cluster.num_servers)
    return run(cluster, model, strategy, reqs_a + shifted, time_model, policy,
               initial_stats=initial, seed=seed)
