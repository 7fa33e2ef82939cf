"""Experiment runner: config ingestion, strategy dispatch, sweeps, validation.

Commands: ``place``, ``simulate``, ``sweep``, ``validate``. One JSON config
document describes an experiment; flags override individual fields so sweeps
stay reproducible. Exit codes: 0 success, 1 usage/config error,
2 infeasibility, 3 internal invariant breach.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, replace as dc_replace

import numpy as np

from .cost import TimeModel, UnplacedExpertError
from .domain import (
    ClusterSpec,
    DimensionMismatch,
    InfeasibleError,
    ModelSpec,
    Placement,
    validate_placement,
)
from .placement import (
    STRATEGIES,
    InstanceTooLarge,
    build_placement,
    local_utility,
)
from .cost import proxy_cost
from .sim import (
    Metrics,
    SchedulerPolicy,
    ServerWorkload,
    WorkloadSpec,
    format_sig,
    generate_workload,
    replay_shift,
    round_sig,
    run,
    stats_from_requests,
)
from .stats import ActivationEvent, ActivationStats

__all__ = ["ConfigError", "ExperimentConfig", "cmd_place", "cmd_simulate", "cmd_sweep", "cmd_validate", "main"]

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_INTERNAL = 0, 1, 2, 3


class ConfigError(Exception):
    """Bad usage, malformed config, or missing/invalid referenced file."""

    def __init__(self, message: str, location: str = ""):
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)


def _load_json(path: str, location: str = "") -> dict:
    loc = location or path
    if not os.path.exists(path):
        raise ConfigError(f"file not found: {path}", loc)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}", loc)


def _parse_cluster(doc: dict, location: str) -> ClusterSpec:
    try:
        return ClusterSpec.from_dict(doc)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"missing or malformed field {exc}", location)
    except ValueError as exc:
        raise ConfigError(str(exc), location)


def _parse_model(doc: dict, location: str) -> ModelSpec:
    try:
        return ModelSpec.from_dict(doc)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"missing or malformed field {exc}", location)
    except ValueError as exc:
        raise ConfigError(str(exc), location)


def parse_trace(
    path: str,
    model: ModelSpec | None = None,
    num_servers: int | None = None,
) -> list[ActivationEvent]:
    """JSON-lines activation trace: fields t, server, layer, experts, tokens.

    Index ranges are enforced when model/cluster context is supplied; errors
    point at the offending line.
    """
    if not os.path.exists(path):
        raise ConfigError(f"trace file not found: {path}", path)
    events = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            loc = f"{path}:{lineno}"
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"invalid JSON: {exc}", loc)
            try:
                event = ActivationEvent(
                    virtual_time=float(rec["t"]),
                    server=int(rec["server"]),
                    layer=int(rec["layer"]),
                    expert_ids=tuple(int(e) for e in rec["experts"]),
                    token_count=int(rec.get("tokens", 1)),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"bad trace event: {exc}", loc)
            if event.server < 0 or event.layer < 0 or any(e < 0 for e in event.expert_ids):
                raise ConfigError("negative index in trace event", loc)
            if num_servers is not None and event.server >= num_servers:
                raise ConfigError(f"server {event.server} out of range (cluster has {num_servers})", loc)
            if model is not None:
                if event.layer >= model.num_layers:
                    raise ConfigError(f"layer {event.layer} out of range (model has {model.num_layers})", loc)
                limit = model.experts_per_layer[event.layer]
                if any(e >= limit for e in event.expert_ids):
                    raise ConfigError(f"expert id out of range (layer {event.layer} has {limit})", loc)
            events.append(event)
    return events


def _stats_from_trace(path: str, cluster: ClusterSpec, model: ModelSpec) -> ActivationStats:
    events = parse_trace(path, model, cluster.num_servers)
    stats = ActivationStats(cluster.num_servers, model.experts_per_layer)
    for ev in events:
        stats.ingest(ev)
    return stats


def _parse_workload(doc: dict, cluster: ClusterSpec, model: ModelSpec,
                    base_dir: str, seed: int, location: str) -> WorkloadSpec:
    entries = doc.get("servers")
    if entries is None:
        raise ConfigError("workload needs a 'servers' entry", location)
    if isinstance(entries, dict):
        entries = [dict(entries) for _ in range(cluster.num_servers)]
    if len(entries) != cluster.num_servers:
        raise ConfigError(
            f"workload lists {len(entries)} servers, cluster has {cluster.num_servers}", location)
    per_server = []
    for n, entry in enumerate(entries):
        loc = f"{location}.servers[{n}]"
        try:
            selection = entry.get("selection", "dirichlet")
            kwargs = dict(
                mean_interarrival=float(entry["mean_interarrival"]),
                num_requests=int(entry["requests"]),
                tokens=entry.get("tokens", 64),
                seed=int(entry.get("seed", seed + n)),
            )
            if isinstance(kwargs["tokens"], list):
                kwargs["tokens"] = tuple(int(t) for t in kwargs["tokens"])
            if selection == "dirichlet":
                kwargs["dirichlet_alpha"] = float(entry.get("dirichlet_alpha", 0.3))
            elif selection == "trace":
                trace_path = os.path.join(base_dir, entry["trace_path"])
                stats = _stats_from_trace(trace_path, cluster, model)
                kwargs["expert_dists"] = tuple(
                    stats.frequency(n, layer) for layer in range(model.num_layers))
            else:
                raise ConfigError(f"unknown selection {selection!r}", loc)
            per_server.append(ServerWorkload(**kwargs))
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad workload entry: {exc}", loc)
    return WorkloadSpec(tuple(per_server))


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment, fully resolved: specs loaded and paths checked."""

    cluster: ClusterSpec
    model: ModelSpec
    strategy: str
    seed: int
    output_dir: str
    workloads: tuple[WorkloadSpec, ...]  # one entry, or two for a phase shift
    time_model: TimeModel
    policy: SchedulerPolicy
    initial_stats_source: str            # "workload" | "trace" | "uniform"
    initial_stats: ActivationStats | None


def load_config(path: str, *, strategy: str | None = None, seed: int | None = None,
                out: str | None = None, no_migration: bool = False) -> ExperimentConfig:
    doc = _load_json(path)
    base_dir = os.path.dirname(os.path.abspath(path))

    for key in ("cluster_path", "model_path"):
        if key not in doc:
            raise ConfigError(f"missing required field '{key}'", path)
    cluster_path = os.path.join(base_dir, doc["cluster_path"])
    model_path = os.path.join(base_dir, doc["model_path"])
    cluster = _parse_cluster(_load_json(cluster_path), cluster_path)
    model = _parse_model(_load_json(model_path), model_path)

    strategy = strategy or doc.get("strategy", "ours")
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}", path)
    seed = seed if seed is not None else int(doc.get("seed", 0))
    output_dir = out or doc.get("output_dir", "out")

    wdoc = doc.get("workload")
    if wdoc is None and "workload_path" in doc:
        wdoc = _load_json(os.path.join(base_dir, doc["workload_path"]))
    if wdoc is None:
        raise ConfigError("missing 'workload' (inline) or 'workload_path'", path)
    if "phases" in wdoc:
        phases = wdoc["phases"]
        if not isinstance(phases, list) or len(phases) != 2:
            raise ConfigError("'workload.phases' must list exactly two phases", path)
        workloads = tuple(
            _parse_workload(p, cluster, model, base_dir, seed + 1000 * i, f"{path}: workload.phases[{i}]")
            for i, p in enumerate(phases)
        )
    else:
        workloads = (_parse_workload(wdoc, cluster, model, base_dir, seed, f"{path}: workload"),)

    tm_doc = doc.get("time_model", {})
    time_model = TimeModel.from_cluster(
        cluster,
        comp_base=tm_doc.get("comp_base", 2e-3),
        comp_per_token=tm_doc.get("comp_per_token", 5e-5),
    )

    mig = doc.get("migration", {})
    interval = float(mig.get("interval_seconds", 300.0))
    if interval <= 0:
        raise ConfigError("migration.interval_seconds must be positive", path)
    cost_mode = mig.get("cost_mode", "literal")
    if cost_mode not in ("literal", "loads-only"):
        raise ConfigError(f"migration.cost_mode must be 'literal' or 'loads-only', got {cost_mode!r}", path)
    policy = SchedulerPolicy(
        migration_enabled=bool(mig.get("enabled", True)) and not no_migration,
        migration_interval=interval,
        stats_tick_seconds=float(doc.get("stats_tick_seconds", 30.0)),
        cost_mode=cost_mode,
        non_moe_seconds=float(doc.get("non_moe_seconds", 0.0)),
        ratio_window=float(doc.get("ratio_window", 30.0)),
    )

    sdoc = doc.get("initial_stats", {"source": "workload"})
    source = sdoc.get("source", "workload")
    if source == "workload":
        initial = None
    elif source == "uniform":
        initial = ActivationStats(cluster.num_servers, model.experts_per_layer)
    elif source == "trace":
        if "path" not in sdoc:
            raise ConfigError("initial_stats.source 'trace' needs a 'path'", path)
        initial = _stats_from_trace(os.path.join(base_dir, sdoc["path"]), cluster, model)
    else:
        raise ConfigError(f"unknown initial_stats.source {source!r}", path)

    return ExperimentConfig(cluster, model, strategy, seed, output_dir, workloads,
                            time_model, policy, source, initial)


def _resolve_stats(cfg: ExperimentConfig) -> ActivationStats:
    if cfg.initial_stats is not None:
        return cfg.initial_stats
    requests = generate_workload(cfg.workloads[0], cfg.model)
    return stats_from_requests(requests, cfg.model, cfg.cluster.num_servers)


def _write(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def cmd_place(cfg: ExperimentConfig) -> int:
    """Compute a placement, validate it, and emit placement + utility report."""
    stats = _resolve_stats(cfg)
    placement = build_placement(cfg.strategy, cfg.cluster, cfg.model, stats, cfg.seed)
    report = validate_placement(placement, cfg.cluster, cfg.model)
    if not report.ok:
        raise RuntimeError(f"strategy {cfg.strategy} produced an invalid placement: {report}")
    servers = []
    for n in range(cfg.cluster.num_servers):
        util = local_utility(placement, stats, n)
        servers.append({
            "server": n,
            "slots": sum(len(placement.server_experts(n, layer)) for layer in range(cfg.model.num_layers)),
            "utility": util,
            "cost": cfg.model.num_layers - util,
        })
    doc = {
        "strategy": cfg.strategy,
        "valid": True,
        "proxy_cost": proxy_cost(placement, stats),
        "servers": servers,
        "total_utility": sum(s["utility"] for s in servers),
    }
    _write(os.path.join(cfg.output_dir, "placement.json"),
           json.dumps(placement.to_dict(), indent=2, sort_keys=True) + "\n")
    _write(os.path.join(cfg.output_dir, "report.json"),
           json.dumps(round_sig(doc), indent=2, sort_keys=True) + "\n")
    print(f"placement written to {cfg.output_dir}: proxy_cost={format_sig(doc['proxy_cost'])}")
    return EXIT_OK


def _run_config(cfg: ExperimentConfig) -> Metrics:
    if len(cfg.workloads) == 2:
        return replay_shift(cfg.cluster, cfg.model, cfg.strategy, cfg.workloads[0],
                            cfg.workloads[1], cfg.time_model, cfg.policy, seed=cfg.seed)
    return run(cfg.cluster, cfg.model, cfg.strategy, cfg.workloads[0], cfg.time_model,
               cfg.policy, initial_stats=cfg.initial_stats, seed=cfg.seed)


def _emit_metrics(metrics: Metrics, out_dir: str) -> None:
    _write(os.path.join(out_dir, "requests.csv"), metrics.requests_csv())
    _write(os.path.join(out_dir, "summary.json"), metrics.summary_json())
    _write(os.path.join(out_dir, "migrations.jsonl"), metrics.migrations_jsonl())


def cmd_simulate(cfg: ExperimentConfig, strategies: list[str] | None = None) -> int:
    """Full simulation producing per-request CSV, summary JSON, migration audit."""
    sweep = strategies or [cfg.strategy]
    for strategy in sweep:
        if strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {strategy!r}", "--strategies")
    for strategy in sweep:
        scoped = dc_replace(cfg, strategy=strategy)
        metrics = _run_config(scoped)
        out_dir = cfg.output_dir if len(sweep) == 1 else os.path.join(cfg.output_dir, strategy)
        _emit_metrics(metrics, out_dir)
        print(f"{strategy}: mean_latency={format_sig(metrics.mean_latency())} "
              f"local_ratio={format_sig(metrics.local_ratio())} migrations={len(metrics.migrations)}")
    return EXIT_OK


def _clone_for_axis(cfg: ExperimentConfig, axis: str, value: float) -> ExperimentConfig:
    if axis == "gpus":
        total = int(value)
        n = cfg.cluster.num_servers
        if total < n:
            raise ConfigError(f"gpus value {total} is below the server count {n}", "--values")
        counts = [total // n + (1 if i < total % n else 0) for i in range(n)]
        servers = []
        for i, srv in enumerate(cfg.cluster.servers):
            template = srv.gpus[0]
            servers.append(type(srv)(i, tuple(template for _ in range(counts[i]))))
        cluster = ClusterSpec(tuple(servers), cfg.cluster.link_bandwidth.copy(),
                              cfg.cluster.link_latency.copy())
        tm = TimeModel(cfg.time_model.comp_base.copy(), cfg.time_model.comp_per_token.copy(),
                       cluster.link_bandwidth.copy(), cluster.link_latency.copy())
        return dc_replace(cfg, cluster=cluster, time_model=tm)
    if axis == "bandwidth":
        bytes_per_s = value * 1e6 / 8.0  # value in Mbps
        bw = np.full_like(cfg.cluster.link_bandwidth, bytes_per_s)
        cluster = ClusterSpec(cfg.cluster.servers, bw, cfg.cluster.link_latency.copy())
        tm = TimeModel(cfg.time_model.comp_base.copy(), cfg.time_model.comp_per_token.copy(),
                       cluster.link_bandwidth.copy(), cluster.link_latency.copy())
        return dc_replace(cfg, cluster=cluster, time_model=tm)
    if axis == "arrival":
        workloads = tuple(
            WorkloadSpec(tuple(dc_replace(sw, mean_interarrival=float(value)) for sw in w.per_server))
            for w in cfg.workloads
        )
        return dc_replace(cfg, workloads=workloads)
    raise ConfigError(f"unknown sweep axis {axis!r}", "--axis")


def cmd_sweep(cfg: ExperimentConfig, axis: str, values: list[float]) -> int:
    """Clone the config along one axis and aggregate mean latencies into a CSV."""
    if not values:
        raise ConfigError("sweep needs at least one value", "--values")
    rows = ["axis,value,mean_latency,p95_latency,local_ratio_final,migrations"]
    for value in values:
        scoped = _clone_for_axis(cfg, axis, value)
        metrics = _run_config(scoped)
        _emit_metrics(metrics, os.path.join(cfg.output_dir, f"{axis}_{format_sig(value)}"))
        summary = metrics.summary_dict()
        rows.append(
            f"{axis},{format_sig(value)},{format_sig(summary['mean_latency'])},"
            f"{format_sig(summary['p95_latency'])},{format_sig(summary['local_ratio_final'])},"
            f"{summary['migrations']}")
        print(rows[-1])
    _write(os.path.join(cfg.output_dir, f"sweep_{axis}.csv"), "\n".join(rows) + "\n")
    return EXIT_OK


def cmd_validate(paths: list[str], config_path: str | None = None) -> int:
    """Schema-check configs, cluster/model specs, traces, and placements."""
    cluster = model = None
    if config_path:
        cfg = load_config(config_path)
        cluster, model = cfg.cluster, cfg.model
        print(f"{config_path}: ok")
    for path in paths:
        if path.endswith(".jsonl"):
            parse_trace(path, model, cluster.num_servers if cluster else None)
            print(f"{path}: ok ({'deep' if model else 'schema'} check)")
            continue
        doc = _load_json(path)
        if "cluster_path" in doc:
            cfg = load_config(path)
            cluster, model = cfg.cluster, cfg.model
        elif "link_bandwidth" in doc:
            cluster = _parse_cluster(doc, path)
        elif "num_layers" in doc:
            model = _parse_model(doc, path)
        elif "layers" in doc:
            if cluster is None or model is None:
                raise ConfigError(
                    "placement validation needs cluster and model context (pass --config or list them first)",
                    path)
            try:
                placement = Placement.from_dict(doc, cluster, model)
            except DimensionMismatch as exc:
                raise ConfigError(str(exc), path)
            report = validate_placement(placement, cluster, model)
            if not report.ok:
                raise ConfigError(str(report), path)
        else:
            raise ConfigError("unrecognized document: expected config, cluster, model, placement, or trace", path)
        print(f"{path}: ok")
    print("ok")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; keep 2 for infeasibility
        raise ConfigError(message, "usage")


def _build_parser() -> _Parser:
    parser = _Parser(prog="moeplace", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--seed", type=int, help="seed override")
        p.add_argument("--strategy", help="strategy override")
        p.add_argument("--no-migration", action="store_true", help="disable migration checks")

    p_place = sub.add_parser("place", help="compute and validate a placement")
    common(p_place)

    p_sim = sub.add_parser("simulate", help="run the event-driven simulator")
    common(p_sim)
    p_sim.add_argument("--strategies", help="comma-separated strategy sweep; one subdirectory each")

    p_sweep = sub.add_parser("sweep", help="sweep one axis and aggregate latencies")
    common(p_sweep)
    p_sweep.add_argument("--axis", required=True, choices=("gpus", "bandwidth", "arrival"))
    p_sweep.add_argument("--values", required=True, help="comma-separated axis values")

    p_val = sub.add_parser("validate", help="schema-check configs, specs, traces, placements")
    p_val.add_argument("paths", nargs="*", help="files to check")
    p_val.add_argument("--config", help="config providing cluster/model context")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "validate":
            if not args.paths and not args.config:
                raise ConfigError("nothing to validate: pass file paths or --config", "usage")
            return cmd_validate(args.paths, args.config)
        cfg = load_config(args.config, strategy=args.strategy, seed=args.seed,
                          out=args.out, no_migration=args.no_migration)
        if args.command == "place":
            return cmd_place(cfg)
        if args.command == "simulate":
            strategies = args.strategies.split(",") if args.strategies else None
            return cmd_simulate(cfg, strategies)
        values = [float(v) for v in args.values.split(",") if v.strip()]
        return cmd_sweep(cfg, args.axis, values)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InstanceTooLarge as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (RuntimeError, UnplacedExpertError, DimensionMismatch) as exc:
        print(f"internal invariant breach: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
