"""Core data model: cluster topology, model geometry, and expert placements.

All types here are immutable value objects; strategies construct placements
through :func:`placement_from_server_sets`, which packs per-server expert
sets onto individual GPUs by first-fit on descending free memory.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "ClusterSpec",
    "DimensionMismatch",
    "GpuSpec",
    "InfeasibleError",
    "ModelSpec",
    "Placement",
    "ServerSpec",
    "ValidationReport",
    "packable_capacity",
    "placement_from_server_sets",
    "server_capacity",
    "validate_placement",
]


class DimensionMismatch(ValueError):
    """A placement's shape disagrees with the cluster or model geometry."""


class InfeasibleError(RuntimeError):
    """The requested configuration cannot satisfy coverage within memory."""


@dataclass(frozen=True)
class GpuSpec:
    """One GPU: byte budget for expert weights and weight-load speed."""

    memory: float          # bytes available for expert weights
    load_bandwidth: float  # bytes/s sustained when loading expert weights

    def __post_init__(self) -> None:
        if self.memory <= 0:
            raise ValueError(f"gpu memory must be positive, got {self.memory}")
        if self.load_bandwidth <= 0:
            raise ValueError(f"gpu load_bandwidth must be positive, got {self.load_bandwidth}")


@dataclass(frozen=True)
class ServerSpec:
    server_id: int
    gpus: tuple[GpuSpec, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "gpus", tuple(self.gpus))
        if not self.gpus:
            raise ValueError(f"server {self.server_id} has no GPUs")

    @property
    def num_gpus(self) -> int:
        return len(self.gpus)

    @property
    def total_memory(self) -> float:
        return float(sum(g.memory for g in self.gpus))


@dataclass(frozen=True)
class ClusterSpec:
    """Edge cluster: heterogeneous servers plus pairwise network links.

    ``link_bandwidth[i][j]`` is bytes/s on the i -> j link and
    ``link_latency[i][j]`` is seconds per message; diagonals are ignored
    (local calls are free).
    """

    servers: tuple[ServerSpec, ...]
    link_bandwidth: np.ndarray
    link_latency: np.ndarray

    def __post_init__(self) -> None:
        servers = tuple(self.servers)
        if not servers:
            raise ValueError("cluster needs at least one server")
        for pos, srv in enumerate(servers):
            if srv.server_id != pos:
                raise ValueError(f"server_id {srv.server_id} at position {pos}; ids must be 0..N-1 in order")
        bw = np.array(self.link_bandwidth, dtype=float)
        lat = np.array(self.link_latency, dtype=float)
        n = len(servers)
        if bw.shape != (n, n) or lat.shape != (n, n):
            raise ValueError(f"link matrices must be {n}x{n}, got {bw.shape} and {lat.shape}")
        off = ~np.eye(n, dtype=bool)
        if n > 1 and not np.all(bw[off] > 0):
            raise ValueError("off-diagonal link bandwidth entries must be positive")
        if not np.all(lat >= 0):
            raise ValueError("link latency entries must be non-negative")
        bw.setflags(write=False)
        lat.setflags(write=False)
        object.__setattr__(self, "servers", servers)
        object.__setattr__(self, "link_bandwidth", bw)
        object.__setattr__(self, "link_latency", lat)

    @property
    def num_servers(self) -> int:
        return len(self.servers)

    def gpu(self, server: int, gpu: int) -> GpuSpec:
        return self.servers[server].gpus[gpu]

    def all_gpus(self) -> list[tuple[int, int]]:
        """(server, gpu) pairs in fixed scan order."""
        return [(n, g) for n, srv in enumerate(self.servers) for g in range(srv.num_gpus)]

    @classmethod
    def homogeneous(
        cls,
        num_servers: int,
        gpus_per_server: int,
        gpu_memory: float,
        load_bandwidth: float = 5e8,
        bandwidth: float = 62.5e6,
        latency: float = 1e-3,
    ) -> "ClusterSpec":
        servers = tuple(
            ServerSpec(n, tuple(GpuSpec(gpu_memory, load_bandwidth) for _ in range(gpus_per_server)))
            for n in range(num_servers)
        )
        bw = np.full((num_servers, num_servers), bandwidth)
        lat = np.full((num_servers, num_servers), latency)
        np.fill_diagonal(lat, 0.0)
        return cls(servers, bw, lat)

    def to_dict(self) -> dict:
        return {
            "servers": [
                {"gpus": [{"memory": g.memory, "load_bandwidth": g.load_bandwidth} for g in srv.gpus]}
                for srv in self.servers
            ],
            "link_bandwidth": self.link_bandwidth.tolist(),
            "link_latency": self.link_latency.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ClusterSpec":
        servers = tuple(
            ServerSpec(n, tuple(GpuSpec(g["memory"], g["load_bandwidth"]) for g in entry["gpus"]))
            for n, entry in enumerate(doc["servers"])
        )
        return cls(servers, np.array(doc["link_bandwidth"], dtype=float), np.array(doc["link_latency"], dtype=float))


@dataclass(frozen=True)
class ModelSpec:
    """MoE model geometry; expert weights share one uniform byte size."""

    num_layers: int
    experts_per_layer: tuple[int, ...]
    top_k: int
    expert_size: float      # bytes per expert
    hidden_width: int       # elements per token crossing the wire
    bytes_per_element: int = 2

    def __post_init__(self) -> None:
        epl = tuple(int(e) for e in self.experts_per_layer)
        object.__setattr__(self, "experts_per_layer", epl)
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if len(epl) != self.num_layers:
            raise ValueError(f"experts_per_layer has {len(epl)} entries for {self.num_layers} layers")
        if any(e < 1 for e in epl):
            raise ValueError("every layer needs at least one expert")
        if not 1 <= self.top_k <= min(epl):
            raise ValueError(f"top_k {self.top_k} out of range [1, {min(epl)}]")
        if self.expert_size <= 0:
            raise ValueError("expert_size must be positive")
        if self.hidden_width < 1 or self.bytes_per_element < 1:
            raise ValueError("hidden_width and bytes_per_element must be >= 1")

    @property
    def max_experts(self) -> int:
        return max(self.experts_per_layer)

    @property
    def total_experts(self) -> int:
        return sum(self.experts_per_layer)

    def token_payload_bytes(self, tokens: int) -> float:
        return float(tokens) * self.hidden_width * self.bytes_per_element

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "experts_per_layer": list(self.experts_per_layer),
            "top_k": self.top_k,
            "expert_size": self.expert_size,
            "hidden_width": self.hidden_width,
            "bytes_per_element": self.bytes_per_element,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelSpec":
        epl = doc["experts_per_layer"]
        layers = int(doc["num_layers"])
        if isinstance(epl, int):
            epl = [epl] * layers
        return cls(
            num_layers=layers,
            experts_per_layer=tuple(int(e) for e in epl),
            top_k=int(doc["top_k"]),
            expert_size=float(doc["expert_size"]),
            hidden_width=int(doc["hidden_width"]),
            bytes_per_element=int(doc.get("bytes_per_element", 2)),
        )


@dataclass(frozen=True)
class Placement:
    """Expert occupancy for every GPU, as frozensets of (layer, expert)."""

    gpu_sets: tuple[tuple[frozenset, ...], ...]  # [server][gpu] -> {(layer, expert)}
    num_layers: int

    def __post_init__(self) -> None:
        norm = tuple(tuple(frozenset(g) for g in srv) for srv in self.gpu_sets)
        object.__setattr__(self, "gpu_sets", norm)

    @property
    def num_servers(self) -> int:
        return len(self.gpu_sets)

    @cached_property
    def server_sets(self) -> tuple[tuple[frozenset, ...], ...]:
        """Per-server, per-layer expert sets (union over the server's GPUs)."""
        out = []
        for srv in self.gpu_sets:
            layers: list[set] = [set() for _ in range(self.num_layers)]
            for gpu in srv:
                for layer, expert in gpu:
                    layers[layer].add(expert)
            out.append(tuple(frozenset(s) for s in layers))
        return tuple(out)

    def server_experts(self, server: int, layer: int) -> frozenset:
        return self.server_sets[server][layer]

    def has_local(self, server: int, layer: int, expert: int) -> bool:
        return expert in self.server_sets[server][layer]

    @cached_property
    def holder_map(self) -> dict:
        """(layer, expert) -> tuple of server ids holding a copy, ascending."""
        holders: dict[tuple[int, int], list[int]] = {}
        for n, layers in enumerate(self.server_sets):
            for layer, experts in enumerate(layers):
                for e in experts:
                    holders.setdefault((layer, e), []).append(n)
        return {k: tuple(v) for k, v in holders.items()}

    def holders(self, layer: int, expert: int) -> tuple[int, ...]:
        return self.holder_map.get((layer, expert), ())

    @cached_property
    def slots(self) -> frozenset:
        """Occupied (server, gpu, layer, expert) cells."""
        out = set()
        for n, srv in enumerate(self.gpu_sets):
            for g, gpu in enumerate(srv):
                for layer, expert in gpu:
                    out.add((n, g, layer, expert))
        return frozenset(out)

    def gpu_bytes(self, server: int, gpu: int, model: ModelSpec) -> float:
        return len(self.gpu_sets[server][gpu]) * model.expert_size

    def to_dict(self) -> dict:
        layers = []
        for layer in range(self.num_layers):
            servers = []
            for n, srv in enumerate(self.gpu_sets):
                gpus = [sorted(e for (l, e) in gpu if l == layer) for gpu in srv]
                servers.append({"server": n, "gpus": gpus})
            layers.append({"layer": layer, "servers": servers})
        return {"layers": layers}

    @classmethod
    def from_dict(cls, doc: dict, cluster: ClusterSpec, model: ModelSpec) -> "Placement":
        layers = doc.get("layers")
        if not isinstance(layers, list) or len(layers) != model.num_layers:
            raise DimensionMismatch("placement document must list every layer exactly once")
        cells: list[list[set]] = [[set() for _ in srv.gpus] for srv in cluster.servers]
        seen_layers = set()
        for entry in layers:
            layer = entry["layer"]
            if not 0 <= layer < model.num_layers or layer in seen_layers:
                raise DimensionMismatch(f"bad or repeated layer index {layer}")
            seen_layers.add(layer)
            if len(entry["servers"]) != cluster.num_servers:
                raise DimensionMismatch(f"layer {layer} lists {len(entry['servers'])} servers, cluster has {cluster.num_servers}")
            for srv_entry in entry["servers"]:
                n = srv_entry["server"]
                if not 0 <= n < cluster.num_servers:
                    raise DimensionMismatch(f"bad server index {n}")
                gpus = srv_entry["gpus"]
                if len(gpus) != cluster.servers[n].num_gpus:
                    raise DimensionMismatch(f"server {n} lists {len(gpus)} GPUs, spec has {cluster.servers[n].num_gpus}")
                for g, experts in enumerate(gpus):
                    for e in experts:
                        if not 0 <= e < model.experts_per_layer[layer]:
                            raise DimensionMismatch(f"expert {e} out of range for layer {layer}")
                        if (layer, e) in cells[n][g]:
                            raise DimensionMismatch(f"expert {e} listed twice on server {n} gpu {g} layer {layer}")
                        cells[n][g].add((layer, e))
        return cls(tuple(tuple(frozenset(g) for g in srv) for srv in cells), model.num_layers)


@dataclass(frozen=True)
class ValidationReport:
    """Constraint-check outcome: empty violation list means the placement is valid.

    Violations are tagged tuples: ``("coverage", layer, expert)`` for an
    expert placed nowhere, ``("memory", server, gpu, bytes_over)`` for an
    oversubscribed GPU.
    """

    violations: tuple

    @property
    def ok(self) -> bool:
        return not self.violations

    def coverage_violations(self) -> list:
        return [v for v in self.violations if v[0] == "coverage"]

    def memory_violations(self) -> list:
        return [v for v in self.violations if v[0] == "memory"]

    def __str__(self) -> str:
        if self.ok:
            return "ok"
        return "; ".join(
            f"coverage: layer {v[1]} expert {v[2]} unplaced" if v[0] == "coverage"
            else f"memory: server {v[1]} gpu {v[2]} over by {v[3]:.6g} bytes"
            for v in self.violations
        )


def validate_placement(placement: Placement, cluster: ClusterSpec, model: ModelSpec) -> ValidationReport:
    """Check system-wide coverage and per-GPU memory for a placement.

    Raises :class:`DimensionMismatch` when the placement's shape does not
    match the cluster/model; constraint violations are returned, not raised.
    """
    if placement.num_servers != cluster.num_servers:
        raise DimensionMismatch(
            f"placement has {placement.num_servers} servers, cluster has {cluster.num_servers}")
    if placement.num_layers != model.num_layers:
        raise DimensionMismatch(
            f"placement has {placement.num_layers} layers, model has {model.num_layers}")
    for n, srv in enumerate(placement.gpu_sets):
        if len(srv) != cluster.servers[n].num_gpus:
            raise DimensionMismatch(
                f"server {n}: placement has {len(srv)} GPUs, spec has {cluster.servers[n].num_gpus}")
        for g, gpu in enumerate(srv):
            for layer, expert in gpu:
                if not 0 <= layer < model.num_layers:
                    raise DimensionMismatch(f"layer {layer} out of range on server {n} gpu {g}")
                if not 0 <= expert < model.experts_per_layer[layer]:
                    raise DimensionMismatch(f"expert {expert} out of range for layer {layer}")

    violations: list = []
    for layer in range(model.num_layers):
        for expert in range(model.experts_per_layer[layer]):
            if not placement.holders(layer, expert):
                violations.append(("coverage", layer, expert))
    for n, srv in enumerate(placement.gpu_sets):
        for g, gpu in enumerate(srv):
            used = len(gpu) * model.expert_size
            limit = cluster.gpu(n, g).memory
            if used > limit:
                violations.append(("memory", n, g, used - limit))
    return ValidationReport(tuple(violations))


def server_capacity(cluster: ClusterSpec, server: int, model: ModelSpec) -> int:
    """Whole-server expert slot budget: floor of pooled memory over expert size."""
    return int(cluster.servers[server].total_memory // model.expert_size)


def packable_capacity(cluster: ClusterSpec, server: int, model: ModelSpec) -> int:
    """Slot count actually packable onto the server's GPUs.

    Sums per-GPU floors, so it never exceeds :func:`server_capacity`; the two
    differ only when GPU memories are not multiples of the expert size.
    """
    return int(sum(g.memory // model.expert_size for g in cluster.servers[server].gpus))


def placement_from_server_sets(
    server_sets: Sequence[Sequence[Iterable[int]]],
    cluster: ClusterSpec,
    model: ModelSpec,
) -> Placement:
    """Pack per-server, per-layer expert sets onto GPUs.

    Slots are placed in (layer, expert) order, each onto the GPU with the
    most free memory (ties to the lowest GPU index).
    """
    gpu_cells: list[tuple[frozenset, ...]] = []
    for n, layers in enumerate(server_sets):
        srv = cluster.servers[n]
        free = [g.memory for g in srv.gpus]
        cells: list[set] = [set() for _ in srv.gpus]
        for layer, experts in enumerate(layers):
            for expert in sorted(experts):
                g = max(range(srv.num_gpus), key=lambda i: (free[i], -i))
                if free[g] < model.expert_size:
                    raise InfeasibleError(
                        f"server {n} cannot pack {sum(len(s) for s in layers)} experts into its GPUs")
                cells[g].add((layer, expert))
                free[g] -= model.expert_size
        gpu_cells.append(tuple(frozenset(c) for c in cells))
    return Placement(tuple(gpu_cells), model.num_layers)
