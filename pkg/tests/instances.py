"""Seeded random instance generators shared by unit and acceptance tests."""

from __future__ import annotations

import numpy as np

from moeplace import ActivationStats, ClusterSpec, GpuSpec, ModelSpec, ServerSpec

ALPHAS = (0.5, 1.0, 3.0)


def cluster_from_slots(slot_counts, expert_size, load_bandwidth=2e9,
                       bandwidth=62.5e6, latency=1e-3) -> ClusterSpec:
    """One server per entry; each entry lists per-GPU slot capacities."""
    servers = tuple(
        ServerSpec(n, tuple(GpuSpec(slots * expert_size, load_bandwidth) for slots in gpu_slots))
        for n, gpu_slots in enumerate(slot_counts)
    )
    n = len(slot_counts)
    bw = np.full((n, n), bandwidth)
    lat = np.full((n, n), latency)
    np.fill_diagonal(lat, 0.0)
    return ClusterSpec(servers, bw, lat)


def random_stats(rng, num_servers, experts_per_layer, volume=1000.0,
                 alpha=None, cold_prob=0.0) -> ActivationStats:
    layers = len(experts_per_layer)
    counts = np.zeros((num_servers, layers, max(experts_per_layer)))
    for n in range(num_servers):
        for l, e in enumerate(experts_per_layer):
            a = alpha if alpha is not None else ALPHAS[int(rng.integers(len(ALPHAS)))]
            if cold_prob and rng.random() < cold_prob:
                continue
            counts[n, l, :e] = np.round(rng.dirichlet(np.full(e, a)) * volume)
    return ActivationStats.from_counts(counts, experts_per_layer)


def random_instance(rng, expert_size=1e8):
    """Feasible instance for every strategy, including the uniform partition.

    Per-GPU memory always covers the GPU's round-robin share, so all five
    strategies can satisfy coverage and memory.
    """
    num_servers = int(rng.integers(1, 5))
    num_layers = int(rng.integers(1, 9))
    experts = tuple(int(rng.integers(4, 17)) for _ in range(num_layers))
    gpu_counts = [int(rng.integers(1, 4)) for _ in range(num_servers)]
    total_gpus = sum(gpu_counts)
    base_need = sum(-(-e // total_gpus) for e in experts)  # uniform's worst per-GPU share
    slot_counts = [
        [base_need + int(rng.integers(0, base_need + 1)) for _ in range(g)]
        for g in gpu_counts
    ]
    cluster = cluster_from_slots(slot_counts, expert_size)
    top_k = int(rng.integers(1, min(experts) + 1))
    model = ModelSpec(num_layers, experts, top_k, expert_size, hidden_width=2048)
    stats = random_stats(rng, num_servers, experts, cold_prob=0.1)
    return cluster, model, stats


def oracle_instance(rng, expert_size=1e8):
    """Instance small enough for the exact oracle, with mixed slack levels."""
    while True:
        num_servers = int(rng.integers(1, 4))
        num_layers = int(rng.integers(1, 4))
        experts = tuple(int(rng.integers(4, 7)) for _ in range(num_layers))
        if sum(experts) <= 8 * num_servers:
            break
    needed = sum(experts)
    while True:
        caps = [int(rng.integers(2, 9)) for _ in range(num_servers)]
        if sum(caps) >= needed:
            break
    if rng.random() < 0.4:  # trim toward a tight instance
        surplus = sum(caps) - needed
        for n in range(num_servers):
            if surplus <= 0:
                break
            give = min(surplus, caps[n] - 2)
            caps[n] -= give
            surplus -= give
    cluster = cluster_from_slots([[c] for c in caps], expert_size)
    model = ModelSpec(num_layers, experts, 1, expert_size, hidden_width=2048)
    stats = random_stats(rng, num_servers, experts)
    return cluster, model, stats
