"""Placement strategies for distributed MoE serving.

The activation-aware pipeline runs in two stages: :func:`allocate_counts`
splits each server's slot budget across layers in proportion to activation
entropy, then :func:`assign_experts` fills the slots with each server's
most-activated experts and repairs coverage by swapping out duplicates.
Four reference strategies (uniform, redundant, load-balanced, replica
load-balanced) and an exact enumeration oracle round out the module.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .domain import (
    ClusterSpec,
    GpuSpec,
    InfeasibleError,
    ModelSpec,
    Placement,
    ServerSpec,
    packable_capacity,
    placement_from_server_sets,
)
from .stats import ActivationStats

__all__ = [
    "ExpertCounts",
    "InstanceTooLarge",
    "STRATEGIES",
    "ServerUtility",
    "UtilityReport",
    "allocate_counts",
    "assign_experts",
    "brute_force_optimal",
    "build_placement",
    "compare_with_oracle",
    "local_utility",
    "place_activation_aware",
    "place_balanced",
    "place_eplb",
    "place_redundant",
    "place_uniform",
    "preference_list",
]

STRATEGIES = ("ours", "uniform", "redundance", "smartmoe", "eplb", "oracle")

# Instance caps for the exact oracle's exhaustive search.
_ORACLE_MAX_SERVERS = 3
_ORACLE_MAX_LAYERS = 3
_ORACLE_MAX_EXPERTS = 6
_ORACLE_MAX_BUDGET = 8


class InstanceTooLarge(ValueError):
    """The exact oracle only accepts instances small enough to enumerate."""


@dataclass(frozen=True)
class ExpertCounts:
    """Per-(server, layer) expert slot counts."""

    counts: np.ndarray  # (servers, layers) ints

    def __post_init__(self) -> None:
        arr = np.array(self.counts, dtype=int)
        if arr.ndim != 2:
            raise ValueError(f"counts must be (servers, layers), got shape {arr.shape}")
        if np.any(arr < 0):
            raise ValueError("counts must be non-negative")
        arr.setflags(write=False)
        object.__setattr__(self, "counts", arr)

    def budget(self, server: int) -> int:
        """Total slots the server received across layers."""
        return int(self.counts[server].sum())

    def layer_total(self, layer: int) -> int:
        return int(self.counts[:, layer].sum())

    def validate(self, cluster: ClusterSpec, model: ModelSpec) -> None:
        for n in range(cluster.num_servers):
            cap = packable_capacity(cluster, n, model)
            if self.budget(n) > cap:
                raise ValueError(f"server {n}: {self.budget(n)} slots exceed capacity {cap}")
        for layer, e in enumerate(model.experts_per_layer):
            if self.layer_total(layer) < e:
                raise ValueError(f"layer {layer}: {self.layer_total(layer)} slots cannot cover {e} experts")


def allocate_counts(
    cluster: ClusterSpec,
    model: ModelSpec,
    stats: ActivationStats,
    *,
    normalize_entropy: bool = False,
) -> ExpertCounts:
    """Split each server's slot budget across layers by activation entropy.

    Three passes:

    1. Seed ``N[n][l] = floor(capacity_n * v[n][l] / sum_l v[n][l])``, capped
       at the layer's expert count. Servers whose entropies are all zero fall
       back to an even split.
    2. Hand each server's floor remainder to the layers with the largest
       system-wide deficit (ties to the lowest layer index), so no capacity
       is stranded by flooring.
    3. While some layer's total is below its expert count, move slots into it
       from the over-provisioned layer with the largest total (ties to the
       lowest index), sweeping servers in descending memory order; a donor
       layer is never drained below its own expert count.

    Raises :class:`InfeasibleError`, naming the uncoverable layer, when the
    cluster lacks the slots to cover every expert.
    """
    num_servers, num_layers = cluster.num_servers, model.num_layers
    experts = model.experts_per_layer
    caps = [packable_capacity(cluster, n, model) for n in range(num_servers)]

    entropy = np.zeros((num_servers, num_layers))
    for n in range(num_servers):
        for layer in range(num_layers):
            entropy[n, layer] = stats.entropy(n, layer, normalized=normalize_entropy)

    counts = np.zeros((num_servers, num_layers), dtype=int)
    for n in range(num_servers):
        weights = entropy[n]
        total = weights.sum()
        if total <= 0:
            weights = np.ones(num_layers)
            total = float(num_layers)
        for layer in range(num_layers):
            counts[n, layer] = min(int(caps[n] * weights[layer] / total), experts[layer])

    totals = counts.sum(axis=0)
    for n in range(num_servers):
        leftover = caps[n] - int(counts[n].sum())
        for _ in range(leftover):
            open_layers = [l for l in range(num_layers) if counts[n, l] < experts[l]]
            if not open_layers:
                break
            layer = max(open_layers, key=lambda l: (experts[l] - totals[l], -l))
            counts[n, layer] += 1
            totals[layer] += 1

    order = sorted(range(num_servers), key=lambda n: (-cluster.servers[n].total_memory, n))
    for layer in range(num_layers):
        while totals[layer] < experts[layer]:
            donors = [l for l in range(num_layers) if totals[l] > experts[l]]
            if not donors:
                raise InfeasibleError(
                    f"cannot cover layer {layer}: only {totals[layer]} of {experts[layer]} "
                    f"expert slots available cluster-wide")
            donor = max(donors, key=lambda l: (totals[l], -l))
            moved = False
            for n in order:
                if totals[layer] >= experts[layer] or totals[donor] <= experts[donor]:
                    break
                if counts[n, donor] > 0 and counts[n, layer] < experts[layer]:
                    counts[n, donor] -= 1
                    counts[n, layer] += 1
                    totals[donor] -= 1
                    totals[layer] += 1
                    moved = True
            if not moved:
                raise InfeasibleError(
                    f"cannot cover layer {layer}: rebalancing stalled at "
                    f"{totals[layer]} of {experts[layer]} slots")
    return ExpertCounts(counts)


def preference_list(stats: ActivationStats, server: int, layer: int) -> np.ndarray:
    """Expert ids sorted by descending activation frequency, ties ascending id."""
    freq = stats.frequency(server, layer)
    ids = np.arange(freq.size)
    return ids[np.lexsort((ids, -freq))]


def assign_experts(
    counts: ExpertCounts,
    stats: ActivationStats,
    model: ModelSpec,
    cluster: ClusterSpec,
) -> Placement:
    """Fill per-server slots with top-frequency experts, then repair coverage.

    Initialization takes each server's top ``N[n][l]`` experts per layer.
    While a layer has unassigned experts, servers ordered by ascending
    duplicate count (ties ascending id) each evict their least-used
    duplicate (a duplicate is an expert another server also holds; ties to
    the largest id) in favor of the most-frequent unassigned expert under
    their own frequencies (ties to the smallest id). Duplicate status and
    the unassigned set are refreshed after every single replacement, which
    guarantees no expert ever loses its last copy.
    """
    counts.validate(cluster, model)
    num_servers, num_layers = cluster.num_servers, model.num_layers
    server_sets: list[list[set]] = [[set() for _ in range(num_layers)] for _ in range(num_servers)]

    for layer in range(num_layers):
        freqs = [stats.frequency(n, layer) for n in range(num_servers)]
        assigned = [server_sets[n][layer] for n in range(num_servers)]
        holder_count = np.zeros(model.experts_per_layer[layer], dtype=int)
        for n in range(num_servers):
            picks = preference_list(stats, n, layer)[: counts.counts[n, layer]]
            assigned[n].update(int(e) for e in picks)
            holder_count[picks] += 1

        unassigned = {e for e in range(model.experts_per_layer[layer]) if holder_count[e] == 0}
        while unassigned:
            def dup_count(n: int) -> int:
                return sum(1 for e in assigned[n] if holder_count[e] >= 2)

            progressed = False
            for n in sorted(range(num_servers), key=lambda n: (dup_count(n), n)):
                if not unassigned:
                    break
                duplicates = [e for e in assigned[n] if holder_count[e] >= 2]
                if not duplicates:
                    continue
                freq = freqs[n]
                incoming = max(unassigned, key=lambda e: (freq[e], -e))
                evicted = min(duplicates, key=lambda e: (freq[e], -e))
                assigned[n].remove(evicted)
                assigned[n].add(incoming)
                holder_count[evicted] -= 1
                holder_count[incoming] += 1
                unassigned.remove(incoming)
                progressed = True
            if not progressed:
                raise RuntimeError(
                    f"coverage repair stalled on layer {layer} with {len(unassigned)} experts unassigned")

    return placement_from_server_sets(server_sets, cluster, model)


def place_activation_aware(cluster: ClusterSpec, model: ModelSpec, stats: ActivationStats) -> Placement:
    """The full two-stage pipeline: entropy-guided counts, then greedy assignment."""
    return assign_experts(allocate_counts(cluster, model, stats), stats, model, cluster)


def local_utility(placement: Placement, stats: ActivationStats, server: int) -> float:
    """Sum over layers of the locally placed activation mass (normalized per layer)."""
    total = 0.0
    for layer in range(placement.num_layers):
        freq = stats.frequency(server, layer)
        local = placement.server_experts(server, layer)
        total += float(sum(freq[e] for e in local))
    return total


@dataclass(frozen=True)
class ServerUtility:
    server: int
    budget: int
    utility: float
    cost: float
    optimal_utility: float | None = None
    optimal_cost: float | None = None
    gap: float | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}


@dataclass(frozen=True)
class UtilityReport:
    servers: tuple[ServerUtility, ...]

    @property
    def total_utility(self) -> float:
        return sum(s.utility for s in self.servers)

    @property
    def total_optimal_utility(self) -> float | None:
        if any(s.optimal_utility is None for s in self.servers):
            return None
        return sum(s.optimal_utility for s in self.servers)

    def to_dict(self) -> dict:
        doc = {"servers": [s.to_dict() for s in self.servers], "total_utility": self.total_utility}
        opt = self.total_optimal_utility
        if opt is not None:
            doc["total_optimal_utility"] = opt
        return doc


def _report_rows(placement: Placement, budgets, stats, num_layers, optimal=None) -> UtilityReport:
    rows = []
    for n in range(placement.num_servers):
        util = local_utility(placement, stats, n)
        row = ServerUtility(n, int(budgets[n]), util, num_layers - util)
        if optimal is not None:
            opt = optimal[n]
            row = ServerUtility(n, int(budgets[n]), util, num_layers - util,
                                optimal_utility=opt, optimal_cost=num_layers - opt, gap=opt - util)
        rows.append(row)
    return UtilityReport(tuple(rows))


def _synthetic_cluster(budgets, model: ModelSpec) -> ClusterSpec:
    servers = tuple(
        ServerSpec(n, (GpuSpec(max(b, 1) * model.expert_size, 1.0),))
        for n, b in enumerate(budgets)
    )
    n = len(budgets)
    bw = np.full((n, n), 1.0)
    lat = np.zeros((n, n))
    return ClusterSpec(servers, bw, lat)


def brute_force_optimal(
    counts_budget,
    stats: ActivationStats,
    model: ModelSpec,
    cluster: ClusterSpec | None = None,
) -> tuple[Placement, UtilityReport]:
    """Exact maximizer of total local utility under budgets and coverage.

    Enumerates, per expert, every non-empty subset of servers that could
    hold a copy, memoized on remaining budgets, so the search is exhaustive
    over coverage-feasible assignments. Guarded to instances of at most
    3 servers, 3 layers, 6 experts per layer, and budget 8 per server.
    """
    budgets = tuple(int(b) for b in counts_budget)
    num_servers = len(budgets)
    if num_servers > _ORACLE_MAX_SERVERS or model.num_layers > _ORACLE_MAX_LAYERS \
            or model.max_experts > _ORACLE_MAX_EXPERTS or any(b > _ORACLE_MAX_BUDGET for b in budgets):
        raise InstanceTooLarge(
            f"oracle accepts at most {_ORACLE_MAX_SERVERS} servers, {_ORACLE_MAX_LAYERS} layers, "
            f"{_ORACLE_MAX_EXPERTS} experts/layer, budget {_ORACLE_MAX_BUDGET}")
    experts = [(layer, e) for layer in range(model.num_layers)
               for e in range(model.experts_per_layer[layer])]
    if sum(budgets) < len(experts):
        raise InfeasibleError(
            f"budgets total {sum(budgets)} slots, coverage needs {len(experts)}")

    weights = np.zeros((num_servers, len(experts)))
    for n in range(num_servers):
        for i, (layer, e) in enumerate(experts):
            weights[n, i] = stats.frequency(n, layer)[e]

    masks = list(range(1, 1 << num_servers))
    mask_servers = {m: [n for n in range(num_servers) if m >> n & 1] for m in masks}

    @lru_cache(maxsize=None)
    def best(i: int, remaining: tuple) -> float:
        if i == len(experts):
            return 0.0
        if sum(remaining) < len(experts) - i:
            return -np.inf
        top = -np.inf
        for m in masks:
            chosen = mask_servers[m]
            if any(remaining[n] == 0 for n in chosen):
                continue
            nxt = tuple(r - (1 if m >> n & 1 else 0) for n, r in enumerate(remaining))
            val = sum(weights[n, i] for n in chosen) + best(i + 1, nxt)
            if val > top:
                top = val
        return top

    total = best(0, budgets)
    if not np.isfinite(total):
        raise InfeasibleError("budgets cannot cover every expert")

    assignment: list[list[set]] = [[set() for _ in range(model.num_layers)] for _ in range(num_servers)]
    remaining = budgets
    for i, (layer, e) in enumerate(experts):
        target = best(i, remaining)
        for m in masks:
            chosen = mask_servers[m]
            if any(remaining[n] == 0 for n in chosen):
                continue
            nxt = tuple(r - (1 if m >> n & 1 else 0) for n, r in enumerate(remaining))
            val = sum(weights[n, i] for n in chosen) + best(i + 1, nxt)
            if val >= target - 1e-12:
                for n in chosen:
                    assignment[n][layer].add(e)
                remaining = nxt
                break
    best.cache_clear()

    pack_cluster = cluster if cluster is not None else _synthetic_cluster(budgets, model)
    placement = placement_from_server_sets(assignment, pack_cluster, model)
    report = _report_rows(placement, budgets, stats, model.num_layers,
                          optimal=[local_utility(placement, stats, n) for n in range(num_servers)])
    return placement, report


def compare_with_oracle(
    placement: Placement,
    counts_budget,
    stats: ActivationStats,
    model: ModelSpec,
) -> UtilityReport:
    """Utility report for a placement with oracle optima filled in."""
    _, oracle_report = brute_force_optimal(counts_budget, stats, model)
    optimal = [row.optimal_utility for row in oracle_report.servers]
    return _report_rows(placement, counts_budget, stats, model.num_layers, optimal=optimal)


def place_uniform(cluster: ClusterSpec, model: ModelSpec, seed: int = 0) -> Placement:
    """Round-robin partition of each layer's experts over all GPUs; no replication."""
    del seed  # partition order is fixed, kept for a uniform strategy signature
    gpus = cluster.all_gpus()
    cells: list[list[set]] = [[set() for _ in srv.gpus] for srv in cluster.servers]
    for layer in range(model.num_layers):
        for e in range(model.experts_per_layer[layer]):
            n, g = gpus[e % len(gpus)]
            cells[n][g].add((layer, e))
    for n, srv in enumerate(cluster.servers):
        for g, gpu in enumerate(srv.gpus):
            need = len(cells[n][g]) * model.expert_size
            if need > gpu.memory:
                raise InfeasibleError(
                    f"uniform share of server {n} gpu {g} needs {need:.6g} bytes, has {gpu.memory:.6g}")
    return Placement(tuple(tuple(frozenset(c) for c in srv) for srv in cells), model.num_layers)


def place_redundant(cluster: ClusterSpec, model: ModelSpec, seed: int = 0) -> Placement:
    """Uniform partition for coverage, then random distinct experts fill spare slots."""
    base = place_uniform(cluster, model)
    rng = np.random.default_rng(seed)
    cells = [[set(gpu) for gpu in srv] for srv in base.gpu_sets]
    universe = [(layer, e) for layer in range(model.num_layers)
                for e in range(model.experts_per_layer[layer])]
    for n, g in cluster.all_gpus():
        spare = int(cluster.gpu(n, g).memory // model.expert_size) - len(cells[n][g])
        if spare <= 0:
            continue
        candidates = [slot for slot in universe if slot not in cells[n][g]]
        take = min(spare, len(candidates))
        picks = rng.choice(len(candidates), size=take, replace=False)
        cells[n][g].update(candidates[i] for i in picks)
    return Placement(tuple(tuple(frozenset(c) for c in srv) for srv in cells), model.num_layers)


def _layer_loads(stats: ActivationStats, layer: int, experts: int) -> np.ndarray:
    return stats.counts[:, layer, :experts].sum(axis=0)


def place_balanced(cluster: ClusterSpec, model: ModelSpec, stats: ActivationStats) -> Placement:
    """Even expert spread: heaviest experts first onto the least-loaded GPU.

    Per layer, GPU expert counts stay within one of each other and nothing
    is replicated; accumulated load carries across layers so hot layers do
    not pile onto one device.
    """
    gpus = cluster.all_gpus()
    num_gpus = len(gpus)
    free_slots = [int(cluster.gpu(n, g).memory // model.expert_size) for n, g in gpus]
    load = np.zeros(num_gpus)
    cells: list[list[set]] = [[set() for _ in srv.gpus] for srv in cluster.servers]

    for layer in range(model.num_layers):
        e_count = model.experts_per_layer[layer]
        loads = _layer_loads(stats, layer, e_count)
        order = sorted(range(e_count), key=lambda e: (-loads[e], e))
        floor_q, ceil_q = e_count // num_gpus, -(-e_count // num_gpus)
        taken = np.zeros(num_gpus, dtype=int)
        for idx, e in enumerate(order):
            remaining = e_count - idx
            below_floor = [i for i in range(num_gpus) if taken[i] < floor_q and free_slots[i] > 0]
            must_fill = sum(floor_q - taken[i] for i in below_floor)
            if must_fill >= remaining and below_floor:
                eligible = below_floor
            else:
                eligible = [i for i in range(num_gpus) if taken[i] < ceil_q and free_slots[i] > 0]
            if not eligible:
                raise InfeasibleError(
                    f"balanced placement cannot fit expert {e} of layer {layer}")
            i = min(eligible, key=lambda i: (load[i], taken[i], i))
            n, g = gpus[i]
            cells[n][g].add((layer, e))
            load[i] += loads[e]
            taken[i] += 1
            free_slots[i] -= 1
    return Placement(tuple(tuple(frozenset(c) for c in srv) for srv in cells), model.num_layers)


def place_eplb(cluster: ClusterSpec, model: ModelSpec, stats: ActivationStats) -> Placement:
    """Replicate the hottest experts and spread replicas for GPU load balance.

    Spare slots beyond coverage are split evenly across layers (earlier
    layers take the remainder). Within a layer, extra replicas go to experts
    in descending load order, cycling when there are more spares than
    experts; an expert never gets more replicas than there are GPUs. Each
    expert's load divides evenly over its replicas and replicas land on the
    least-loaded GPU that has a free slot and no copy of that expert yet.
    """
    gpus = cluster.all_gpus()
    num_gpus = len(gpus)
    free_slots = [int(cluster.gpu(n, g).memory // model.expert_size) for n, g in gpus]
    spare = sum(free_slots) - model.total_experts
    if spare < 0:
        raise InfeasibleError(
            f"cluster has {sum(free_slots)} slots, coverage needs {model.total_experts}")
    extra = [spare // model.num_layers + (1 if layer < spare % model.num_layers else 0)
             for layer in range(model.num_layers)]

    load = np.zeros(num_gpus)
    cells: list[list[set]] = [[set() for _ in srv.gpus] for srv in cluster.servers]
    for layer in range(model.num_layers):
        e_count = model.experts_per_layer[layer]
        loads = _layer_loads(stats, layer, e_count)
        order = sorted(range(e_count), key=lambda e: (-loads[e], e))
        replicas = np.ones(e_count, dtype=int)
        granted = 0
        cursor = 0
        while granted < extra[layer]:
            candidates = [e for e in order if replicas[e] < num_gpus]
            if not candidates:
                break
            e = candidates[cursor % len(candidates)]
            replicas[e] += 1
            granted += 1
            cursor += 1

        instances = [(e, r) for e in order for r in range(replicas[e])]
        instances.sort(key=lambda item: (-loads[item[0]] / replicas[item[0]], item[0], item[1]))
        for e, r in instances:
            eligible = [i for i in range(num_gpus)
                        if free_slots[i] > 0 and (layer, e) not in cells[gpus[i][0]][gpus[i][1]]]
            if not eligible:
                if r == 0:
                    raise InfeasibleError(f"no GPU can take expert {e} of layer {layer}")
                continue  # surplus replica dropped; coverage already holds
            i = min(eligible, key=lambda i: (load[i], i))
            n, g = gpus[i]
            cells[n][g].add((layer, e))
            load[i] += loads[e] / replicas[e]
            free_slots[i] -= 1
    return Placement(tuple(tuple(frozenset(c) for c in srv) for srv in cells), model.num_layers)


def build_placement(
    strategy: str,
    cluster: ClusterSpec,
    model: ModelSpec,
    stats: ActivationStats | None = None,
    seed: int = 0,
) -> Placement:
    """Dispatch on a strategy selector string; see :data:`STRATEGIES`."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if strategy in ("ours", "smartmoe", "eplb", "oracle") and stats is None:
        raise ValueError(f"strategy {strategy!r} needs activation stats")
    if strategy == "ours":
        return place_activation_aware(cluster, model, stats)
    if strategy == "uniform":
        return place_uniform(cluster, model, seed)
    if strategy == "redundance":
        return place_redundant(cluster, model, seed)
    if strategy == "smartmoe":
        return place_balanced(cluster, model, stats)
    if strategy == "eplb":
        return place_eplb(cluster, model, stats)
    counts = allocate_counts(cluster, model, stats)
    budgets = [counts.budget(n) for n in range(cluster.num_servers)]
    placement, _ = brute_force_optimal(budgets, stats, model, cluster)
    return placement
