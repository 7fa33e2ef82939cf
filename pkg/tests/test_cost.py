import numpy as np
import pytest

from moeplace import (
    ActivationStats,
    CostSnapshot,
    ExpertCounts,
    ExpertInvocation,
    ModelSpec,
    Placement,
    TimeModel,
    UnplacedExpertError,
    assign_experts,
    build_placement,
    comm_time,
    comp_time,
    layer_latency,
    local_utility,
    migration_cost,
    proxy_cost,
    remote_indicator,
    remote_volume,
    should_migrate,
)
from instances import cluster_from_slots, random_instance, random_stats

ME = 1e8


def two_server_setup():
    cluster = cluster_from_slots([[2], [2]], ME)
    model = ModelSpec(1, (4,), 2, ME, hidden_width=2048)
    stats = ActivationStats.from_counts(
        np.array([[[50, 40, 5, 5]], [[45, 35, 10, 10]]], dtype=float))
    greedy = assign_experts(ExpertCounts(np.array([[2], [2]])), stats, model, cluster)
    return cluster, model, stats, greedy


def placement_from_sets(server_sets, num_layers=1):
    return Placement(tuple((frozenset((l, e) for l, layer in enumerate(srv) for e in layer),)
                           for srv in server_sets), num_layers)


class TestRemoteIndicator:
    def test_local_on_first_gpu(self):
        p = Placement(((frozenset({(0, 1)}), frozenset()),), 1)
        assert remote_indicator(p, 0, 0, 1) == 0

    def test_only_elsewhere(self):
        p = Placement(((frozenset(),), (frozenset({(0, 1)}),)), 1)
        assert remote_indicator(p, 0, 0, 1) == 1
        assert remote_indicator(p, 1, 0, 1) == 0

    def test_two_gpus_same_server(self):
        p = Placement(((frozenset({(0, 1)}), frozenset({(0, 1)})),), 1)
        assert remote_indicator(p, 0, 0, 1) == 0


class TestProxyCost:
    def test_full_replication_is_zero(self):
        cluster = cluster_from_slots([[8], [8]], ME)
        model = ModelSpec(2, (4, 4), 1, ME, hidden_width=2048)
        stats = random_stats(np.random.default_rng(0), 2, (4, 4))
        full = placement_from_sets([[range(4), range(4)], [range(4), range(4)]], 2)
        assert proxy_cost(full, stats) == 0.0

    def test_repair_example_masses(self):
        _cluster, _model, stats, greedy = two_server_setup()
        assert proxy_cost(greedy, stats) == pytest.approx(1.0)

    def test_server_with_nothing_contributes_layer_count(self):
        stats = random_stats(np.random.default_rng(1), 2, (4,))
        p = placement_from_sets([[()], [range(4)]])
        # bare server contributes full mass per layer; the full one contributes nothing
        assert proxy_cost(p, stats) == pytest.approx(1.0)

    def test_monotone_under_enlargement(self):
        rng = np.random.default_rng(2)
        for _ in range(25):
            e = int(rng.integers(2, 9))
            stats = random_stats(rng, 2, (e,))
            held = {int(x) for x in rng.choice(e, size=rng.integers(0, e), replace=False)}
            p = placement_from_sets([[held], [range(e)]])
            base = proxy_cost(p, stats)
            missing = [x for x in range(e) if x not in held]
            if not missing:
                continue
            bigger = placement_from_sets([[held | {missing[0]}], [range(e)]])
            assert proxy_cost(bigger, stats) <= base + 1e-12

    def test_identity_with_local_utility(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            cluster, model, stats = random_instance(rng)
            p = build_placement("ours", cluster, model, stats)
            rewrite = sum(
                model.num_layers - local_utility(p, stats, n)
                for n in range(cluster.num_servers))
            assert proxy_cost(p, stats) == pytest.approx(rewrite, abs=1e-9)

    def test_activation_aware_dominates_uniform_on_skew(self):
        rng = np.random.default_rng(4)
        for _ in range(30):
            cluster, model, stats = random_instance(rng)
            skewed = random_stats(rng, cluster.num_servers, model.experts_per_layer, alpha=0.3)
            ours = build_placement("ours", cluster, model, skewed)
            uniform = build_placement("uniform", cluster, model)
            assert proxy_cost(ours, skewed) <= proxy_cost(uniform, skewed) + 1e-12


class TestTimeEstimators:
    def make_tm(self, cluster, base=2e-3, per_token=5e-5):
        return TimeModel.from_cluster(cluster, base, per_token)

    def test_comp_linear(self):
        cluster = cluster_from_slots([[4]], ME)
        tm = self.make_tm(cluster, 2e-3, 5e-5)
        assert comp_time(tm, 0, 100) == pytest.approx(7e-3)

    def test_comp_clamps_to_one_token(self):
        cluster = cluster_from_slots([[4]], ME)
        tm = self.make_tm(cluster, 2e-3, 5e-5)
        assert comp_time(tm, 0, 0) == comp_time(tm, 0, 1)

    def test_comp_multiplier_scales(self):
        cluster = cluster_from_slots([[4]], ME)
        tm = self.make_tm(cluster, 2e-3, 5e-5)
        tm.load_multiplier[0] = 2.0
        assert comp_time(tm, 0, 100) == pytest.approx(14e-3)

    def test_comm_local_is_free(self):
        cluster = cluster_from_slots([[4], [4]], ME)
        tm = self.make_tm(cluster)
        model = ModelSpec(1, (4,), 1, ME, hidden_width=2048)
        assert comm_time(tm, 0, 0, 64, model) == 0.0

    def test_comm_round_trip_payload(self):
        cluster = cluster_from_slots([[4], [4]], ME, bandwidth=62.5e6, latency=1e-3)
        tm = self.make_tm(cluster)
        model = ModelSpec(1, (4,), 1, ME, hidden_width=2048, bytes_per_element=2)
        expected = 1e-3 + 2 * (64 * 2048 * 2) / 62.5e6
        got = comm_time(tm, 0, 1, 64, model)
        assert got == pytest.approx(expected)
        assert got == pytest.approx(9.388608e-3, rel=1e-6)

    def test_comm_bandwidth_term_linear_in_tokens(self):
        cluster = cluster_from_slots([[4], [4]], ME, bandwidth=62.5e6, latency=1e-3)
        tm = self.make_tm(cluster)
        model = ModelSpec(1, (4,), 1, ME, hidden_width=2048)
        one = comm_time(tm, 0, 1, 64, model) - 1e-3
        two = comm_time(tm, 0, 1, 128, model) - 1e-3
        assert two == pytest.approx(2 * one)


class TestLayerLatency:
    def setup_method(self):
        self.cluster = cluster_from_slots([[4], [4]], ME, bandwidth=62.5e6, latency=1e-3)
        self.model = ModelSpec(1, (4,), 2, ME, hidden_width=2048)
        self.tm = TimeModel.from_cluster(self.cluster, 10e-3, 0.0)
        self.placement = placement_from_sets([[{0, 1}], [{2, 3}]])

    def test_single_local_invocation(self):
        inv = [ExpertInvocation(0, 0, 0, 0, 0, 64)]
        assert layer_latency(inv, self.placement, self.tm, self.model) == pytest.approx(10e-3)

    def test_remote_max_dominates(self):
        invs = [ExpertInvocation(0, 0, 0, 0, 0, 64), ExpertInvocation(0, 1, 0, 0, 2, 64)]
        expected = 9.388608e-3 + 10e-3
        assert layer_latency(invs, self.placement, self.tm, self.model) == pytest.approx(expected)

    def test_equal_locals_collapse_to_comp(self):
        invs = [ExpertInvocation(0, 0, 0, 0, 0, 64), ExpertInvocation(0, 0, 0, 0, 1, 64)]
        assert layer_latency(invs, self.placement, self.tm, self.model) == pytest.approx(10e-3)

    def test_unplaced_expert_is_hard_error(self):
        invs = [ExpertInvocation(0, 0, 0, 0, 2, 64)]  # expert 2 lives on server 1
        with pytest.raises(UnplacedExpertError):
            layer_latency(invs, self.placement, self.tm, self.model)


class TestMigrationCost:
    def setup_method(self):
        self.cluster = cluster_from_slots([[4], [4]], 1e9, load_bandwidth=5e8)
        self.model = ModelSpec(1, (4,), 1, 1e9, hidden_width=2048)

    def test_identity_is_free(self):
        p = placement_from_sets([[{0, 1}], [{2, 3}]])
        assert migration_cost(p, p, self.cluster, self.model) == 0.0

    def test_single_move_literal_and_loads_only(self):
        old = placement_from_sets([[{0, 1}], [{2, 3}]])
        new = placement_from_sets([[{1}], [{0, 2, 3}]])
        assert migration_cost(old, new, self.cluster, self.model, "literal") == pytest.approx(4.0)
        assert migration_cost(old, new, self.cluster, self.model, "loads-only") == pytest.approx(2.0)

    def test_linear_in_changed_slots(self):
        old = placement_from_sets([[()], [range(4)]])
        new = placement_from_sets([[range(3)], [range(4)]])
        assert migration_cost(old, new, self.cluster, self.model) == pytest.approx(3 * 2.0)

    def test_literal_mode_symmetric(self):
        old = placement_from_sets([[{0, 1}], [{2, 3}]])
        new = placement_from_sets([[{2, 3}], [{0, 1}]])
        fwd = migration_cost(old, new, self.cluster, self.model, "literal")
        back = migration_cost(new, old, self.cluster, self.model, "literal")
        assert fwd == pytest.approx(back)

    def test_unknown_mode_rejected(self):
        p = placement_from_sets([[{0}], [range(4)]])
        with pytest.raises(ValueError):
            migration_cost(p, p, self.cluster, self.model, "both")


class TestShouldMigrate:
    def make_decision(self, load_bandwidth):
        # old placement leaves 14 token-units remote, candidate leaves 10;
        # the swap changes two slots, each expert_size / load_bandwidth seconds
        cluster = cluster_from_slots([[1], [2]], 1.5e9, load_bandwidth=load_bandwidth)
        model = ModelSpec(1, (2,), 1, 1.5e9, hidden_width=2048)
        stats = ActivationStats.from_counts(np.array([[[14, 10]], [[0, 0]]], dtype=float))
        old = placement_from_sets([[{1}], [{0, 1}]])
        cand = placement_from_sets([[{0}], [{0, 1}]])
        snapshot = CostSnapshot(stats, avg_remote_penalty_seconds=1.0,
                                window_start=0.0, window_end=100.0)
        assert snapshot.expected_cost_seconds(old) == pytest.approx(14.0)
        assert snapshot.expected_cost_seconds(cand) == pytest.approx(10.0)
        return should_migrate(old, cand, snapshot, cluster, model)

    def test_migrates_when_saving_beats_transfer(self):
        decision, ledger = self.make_decision(load_bandwidth=1e9)  # transfer 3s
        assert decision
        assert ledger["decision"] == "adopted"
        assert ledger["migration_seconds"] == pytest.approx(3.0)
        assert ledger["cost_candidate_seconds"] + ledger["migration_seconds"] < ledger["cost_current_seconds"]

    def test_stays_when_transfer_too_expensive(self):
        decision, ledger = self.make_decision(load_bandwidth=0.75e9)  # transfer 4s
        assert not decision
        assert ledger["cost_candidate_seconds"] + ledger["migration_seconds"] >= ledger["cost_current_seconds"]

    def test_identical_candidate_stays(self):
        cluster = cluster_from_slots([[2], [2]], ME)
        model = ModelSpec(1, (4,), 1, ME, hidden_width=2048)
        stats = random_stats(np.random.default_rng(5), 2, (4,))
        p = placement_from_sets([[{0, 1}], [{2, 3}]])
        snapshot = CostSnapshot(stats, 1.0, 0.0, 10.0)
        decision, ledger = should_migrate(p, p, snapshot, cluster, model)
        assert not decision
        assert ledger["migration_seconds"] == 0.0

    def test_snapshot_rejects_negative_penalty(self):
        stats = random_stats(np.random.default_rng(6), 1, (4,))
        with pytest.raises(ValueError):
            CostSnapshot(stats, -0.1, 0.0, 1.0)


def test_remote_volume_matches_counts():
    stats = ActivationStats.from_counts(np.array([[[6, 4, 0, 0]], [[1, 2, 3, 4]]], dtype=float))
    p = placement_from_sets([[{0}], [{2, 3}]])
    assert remote_volume(p, stats) == pytest.approx(4 + (1 + 2))
