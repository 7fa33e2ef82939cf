import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moeplace import (
    ClusterSpec,
    DimensionMismatch,
    GpuSpec,
    InfeasibleError,
    ModelSpec,
    Placement,
    ServerSpec,
    packable_capacity,
    placement_from_server_sets,
    server_capacity,
    validate_placement,
)
from instances import cluster_from_slots, random_instance

ME = 1e8


def small_model(layers=1, experts=4, top_k=1):
    return ModelSpec(layers, (experts,) * layers, top_k, ME, hidden_width=2048)


class TestSpecValidation:
    def test_gpu_spec_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            GpuSpec(0.0, 1e9)
        with pytest.raises(ValueError):
            GpuSpec(1e9, -1.0)

    def test_server_needs_gpus(self):
        with pytest.raises(ValueError):
            ServerSpec(0, ())

    def test_cluster_link_matrix_shape(self):
        servers = (ServerSpec(0, (GpuSpec(1e9, 1e9),)),)
        with pytest.raises(ValueError):
            ClusterSpec(servers, np.ones((2, 2)), np.zeros((2, 2)))

    def test_cluster_rejects_negative_bandwidth(self):
        servers = tuple(ServerSpec(n, (GpuSpec(1e9, 1e9),)) for n in range(2))
        bw = np.array([[1.0, -5.0], [5.0, 1.0]])
        with pytest.raises(ValueError, match="bandwidth"):
            ClusterSpec(servers, bw, np.zeros((2, 2)))

    def test_cluster_rejects_negative_latency(self):
        servers = tuple(ServerSpec(n, (GpuSpec(1e9, 1e9),)) for n in range(2))
        lat = np.array([[0.0, -1e-3], [1e-3, 0.0]])
        with pytest.raises(ValueError, match="latency"):
            ClusterSpec(servers, np.ones((2, 2)), lat)

    def test_model_top_k_range(self):
        with pytest.raises(ValueError):
            ModelSpec(2, (8, 4), 5, ME, hidden_width=1024)
        with pytest.raises(ValueError):
            ModelSpec(1, (8,), 0, ME, hidden_width=1024)

    def test_model_layer_count_consistency(self):
        with pytest.raises(ValueError):
            ModelSpec(3, (8, 8), 2, ME, hidden_width=1024)


class TestServerCapacity:
    def test_exact_multiple(self):
        cluster = cluster_from_slots([[10]], ME)
        assert server_capacity(cluster, 0, small_model()) == 10

    def test_floor(self):
        cluster = ClusterSpec(
            (ServerSpec(0, (GpuSpec(10.9 * ME, 1e9),)),), np.ones((1, 1)), np.zeros((1, 1)))
        assert server_capacity(cluster, 0, small_model()) == 10

    def test_too_small_for_any_expert(self):
        cluster = ClusterSpec(
            (ServerSpec(0, (GpuSpec(0.5 * ME, 1e9),)),), np.ones((1, 1)), np.zeros((1, 1)))
        assert server_capacity(cluster, 0, small_model()) == 0

    def test_monotone_in_memory_and_expert_size(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            mem = float(rng.uniform(0.3, 30.0)) * ME
            extra = float(rng.uniform(0.0, 5.0)) * ME
            m1 = small_model()
            cl_small = ClusterSpec((ServerSpec(0, (GpuSpec(mem, 1e9),)),), np.ones((1, 1)), np.zeros((1, 1)))
            cl_big = ClusterSpec((ServerSpec(0, (GpuSpec(mem + extra, 1e9),)),), np.ones((1, 1)), np.zeros((1, 1)))
            assert server_capacity(cl_big, 0, m1) >= server_capacity(cl_small, 0, m1)
            m2 = ModelSpec(1, (4,), 1, 2 * ME, hidden_width=2048)
            assert server_capacity(cl_small, 0, m2) <= server_capacity(cl_small, 0, m1)

    def test_packable_never_exceeds_pooled(self):
        # two GPUs of 1.5 expert sizes each pool to 3 slots but pack only 2
        cluster = ClusterSpec(
            (ServerSpec(0, (GpuSpec(1.5 * ME, 1e9), GpuSpec(1.5 * ME, 1e9))),),
            np.ones((1, 1)), np.zeros((1, 1)))
        model = small_model()
        assert server_capacity(cluster, 0, model) == 3
        assert packable_capacity(cluster, 0, model) == 2


class TestValidatePlacement:
    def test_full_replication_ok(self):
        cluster = cluster_from_slots([[8], [8]], ME)
        model = small_model(layers=2, experts=4)
        sets = [[range(4), range(4)], [range(4), range(4)]]
        placement = placement_from_server_sets(sets, cluster, model)
        assert validate_placement(placement, cluster, model).ok

    def test_missing_expert_reported(self):
        cluster = cluster_from_slots([[8]], ME)
        model = small_model(experts=4)
        placement = placement_from_server_sets([[{0, 1, 2}]], cluster, model)
        report = validate_placement(placement, cluster, model)
        assert not report.ok
        assert ("coverage", 0, 3) in report.violations

    def test_memory_overrun_reported(self):
        cluster = cluster_from_slots([[3]], ME)
        model = small_model(experts=4)
        gpu_sets = ((frozenset((0, e) for e in range(4)),),)
        placement = Placement(gpu_sets, 1)
        report = validate_placement(placement, cluster, model)
        overruns = report.memory_violations()
        assert len(overruns) == 1
        _, server, gpu, over = overruns[0]
        assert (server, gpu) == (0, 0)
        assert over == pytest.approx(ME)

    def test_dimension_mismatch_is_structural(self):
        cluster = cluster_from_slots([[8], [8]], ME)
        model = small_model(experts=4)
        one_server = Placement(((frozenset({(0, 0)}),),), 1)
        with pytest.raises(DimensionMismatch):
            validate_placement(one_server, cluster, model)
        bad_expert = Placement(((frozenset({(0, 9)}),), (frozenset(),)), 1)
        with pytest.raises(DimensionMismatch):
            validate_placement(bad_expert, cluster, model)


class TestPacking:
    def test_first_fit_prefers_most_free_memory(self):
        cluster = ClusterSpec(
            (ServerSpec(0, (GpuSpec(2 * ME, 1e9), GpuSpec(4 * ME, 1e9))),),
            np.ones((1, 1)), np.zeros((1, 1)))
        model = small_model(experts=4)
        placement = placement_from_server_sets([[{0, 1, 2, 3}]], cluster, model)
        # free-memory trace: gpu1(4), gpu1(3), tie at 2 -> gpu0, gpu1(2)
        assert placement.gpu_sets[0][0] == frozenset({(0, 2)})
        assert placement.gpu_sets[0][1] == frozenset({(0, 0), (0, 1), (0, 3)})

    def test_packing_overflow_raises(self):
        cluster = cluster_from_slots([[2]], ME)
        model = small_model(experts=4)
        with pytest.raises(InfeasibleError):
            placement_from_server_sets([[{0, 1, 2, 3}]], cluster, model)


class TestSerialization:
    def test_round_trip_bit_exact(self):
        rng = np.random.default_rng(42)
        for _ in range(25):
            cluster, model, _stats = random_instance(rng)
            sets = [
                [
                    {int(e) for e in rng.choice(model.experts_per_layer[l],
                                                size=rng.integers(0, model.experts_per_layer[l] + 1),
                                                replace=False)}
                    for l in range(model.num_layers)
                ]
                for _ in range(cluster.num_servers)
            ]
            try:
                placement = placement_from_server_sets(sets, cluster, model)
            except InfeasibleError:
                continue
            doc = placement.to_dict()
            restored = Placement.from_dict(doc, cluster, model)
            assert restored == placement
            assert restored.to_dict() == doc

    def test_from_dict_rejects_duplicates(self):
        cluster = cluster_from_slots([[4]], ME)
        model = small_model(experts=4)
        doc = {"layers": [{"layer": 0, "servers": [{"server": 0, "gpus": [[1, 1]]}]}]}
        with pytest.raises(DimensionMismatch):
            Placement.from_dict(doc, cluster, model)

    @given(st.integers(min_value=1, max_value=6), st.integers(min_value=1, max_value=4))
    @settings(max_examples=25, deadline=None)
    def test_holders_match_server_sets(self, experts, servers):
        cluster = cluster_from_slots([[experts]] * servers, ME)
        model = small_model(experts=experts)
        sets = [[set(range(n % experts + 1))] for n in range(servers)]
        placement = placement_from_server_sets(sets, cluster, model)
        for e in range(experts):
            holders = placement.holders(0, e)
            assert holders == tuple(n for n in range(servers) if e in placement.server_experts(n, 0))
