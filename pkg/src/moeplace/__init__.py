"""Activation-aware expert placement and simulation for distributed MoE serving.

The library models a cluster of heterogeneous GPU servers jointly serving a
mixture-of-experts model. Placement strategies decide which experts live
where under coverage and memory constraints; a deterministic event-driven
simulator prices those decisions in end-to-end latency, cross-server
traffic, and migration behavior.
"""

from .domain import (
    ClusterSpec,
    DimensionMismatch,
    GpuSpec,
    InfeasibleError,
    ModelSpec,
    Placement,
    ServerSpec,
    ValidationReport,
    packable_capacity,
    placement_from_server_sets,
    server_capacity,
    validate_placement,
)
from .stats import (
    ActivationEvent,
    ActivationStats,
    CoverageBound,
    coverage_lower_bound,
    shannon_bits,
)
from .placement import (
    ExpertCounts,
    InstanceTooLarge,
    STRATEGIES,
    ServerUtility,
    UtilityReport,
    allocate_counts,
    assign_experts,
    brute_force_optimal,
    build_placement,
    compare_with_oracle,
    local_utility,
    place_activation_aware,
    place_balanced,
    place_eplb,
    place_redundant,
    place_uniform,
    preference_list,
)
from .cost import (
    CostSnapshot,
    ExpertInvocation,
    TimeModel,
    UnplacedExpertError,
    comm_time,
    comp_time,
    layer_latency,
    migration_cost,
    proxy_cost,
    remote_indicator,
    remote_volume,
    should_migrate,
)
from .sim import (
    Metrics,
    RequestRecord,
    InvocationRecord,
    RequestTrace,
    SchedulerPolicy,
    ServerWorkload,
    WorkloadSpec,
    generate_workload,
    local_compute_ratio,
    replay_shift,
    run,
    stats_from_requests,
)

__version__ = "0.1.0"
