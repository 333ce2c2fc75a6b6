"""Multi-threaded benchmark driver and its report."""
from __future__ import annotations

import dataclasses
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from ..cache import CacheConfig
from ..cluster import Cluster, ClusterConfig
from ..fabric import FabricConfig, StatsSnapshot
from ..node import PlacementConfig
from ..offload import OffloadConfig
from ..oracle import OpLog, check_equivalence
from ..partition import NotOwner
from .workload import INSERT, LOOKUP, OP_NAMES, SCAN, UPDATE, WorkloadSpec, record_keys, worker_stream


@dataclass
class BenchConfig:
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    compute_servers: int = 2
    threads_per_server: int = 4
    memory_servers: int = 2
    executors_per_server: int = 1
    cache_bytes: int = 8 << 20
    node_size: int = 1024
    subtree_level: int = 3
    latency_mode: str = "zero"
    latency_one_sided: float = 2e-6
    latency_two_sided: float = 4e-6
    latency_jitter_pct: float = 0.0
    offload: bool = True
    lazy_admission: bool = True
    cooling_structure: str = "map"
    repartition_at: float | None = None
    repartition_boundaries: list | None = None
    repartition_owners: list | None = None
    verify: bool = False
    timeline_interval: float = 1.0
    region_bytes_per_server: int | None = None
    seed: int = 1

    def validate(self) -> None:
        self.workload.validate()
        if self.compute_servers < 1 or self.threads_per_server < 1:
            raise ValueError("need at least one compute server and one thread")
        if self.memory_servers < 1 or self.executors_per_server < 1:
            raise ValueError("need at least one memory server and one executor")
        if self.timeline_interval <= 0:
            raise ValueError("timeline_interval must be positive")
        if self.repartition_at is not None and self.repartition_at < 0:
            raise ValueError("repartition_at must be non-negative")
        self.cluster_config().validate()

    @property
    def threads(self) -> int:
        return self.compute_servers * self.threads_per_server

    def cluster_config(self) -> ClusterConfig:
        wl = self.workload
        node_bytes = self.node_size
        # room for the bulk-loaded tree plus growth from inserts
        est_nodes = 3 * (wl.records // max(1, int((node_bytes - 48) // 16 * 0.8)) + 16)
        est_nodes += 3 * (wl.ops + wl.warmup) * wl.insert // 100 // 16
        region = self.region_bytes_per_server or max(
            16 << 20, int(1.5 * est_nodes * node_bytes / self.memory_servers) + (8 << 20))
        return ClusterConfig(
            fabric=FabricConfig(num_memory_servers=self.memory_servers,
                                region_bytes_per_server=region,
                                latency_one_sided=self.latency_one_sided,
                                latency_two_sided=self.latency_two_sided,
                                latency_jitter_pct=self.latency_jitter_pct,
                                latency_mode=self.latency_mode, rng_seed=self.seed),
            placement=PlacementConfig(M=self.subtree_level, node_size=node_bytes),
            cache=CacheConfig(capacity_bytes=self.cache_bytes, node_size=node_bytes,
                              leaf_admission_prob=0.1 if self.lazy_admission else 1.0,
                              cooling_structure=self.cooling_structure, rng_seed=self.seed),
            offload=OffloadConfig(enabled=self.offload),
            compute_servers=self.compute_servers,
            executors_per_server=self.executors_per_server,
        )


@dataclass
class RunReport:
    workload: str
    ops: int
    seconds: float
    throughput: float
    reads_per_op: float
    writes_per_op: float
    atomics_per_op: float
    two_sided_per_op: float
    traffic_bytes_per_op: float
    hit_ratio: float
    offloads: int
    offload_acceptance: float
    totals: dict
    cache: dict
    op_counts: dict
    timeline: list = field(default_factory=list)
    repartition: dict | None = None
    verification: list | None = None
    invariant_errors: list = field(default_factory=list)

    @property
    def verbs_per_op(self) -> float:
        return self.reads_per_op + self.writes_per_op + self.atomics_per_op + self.two_sided_per_op

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["verbs_per_op"] = self.verbs_per_op
        return d

    @property
    def ok(self) -> bool:
        return not self.invariant_errors and not self.verification


def _per_op(delta: StatsSnapshot, ops: int) -> dict:
    n = max(ops, 1)
    return {"reads_per_op": delta.reads / n, "writes_per_op": delta.writes / n,
            "atomics_per_op": delta.cas / n, "two_sided_per_op": delta.two_sided / n,
            "traffic_bytes_per_op": delta.traffic_bytes / n}


def _diff(after: dict, before: dict) -> dict:
    return {k: after[k] - before.get(k, 0) for k in after if k != "hit_ratio"}


class _Progress:
    """Per-worker completed-op counters, sampled by the timeline thread."""

    def __init__(self, n: int) -> None:
        self.done = [0] * n

    def total(self) -> int:
        return sum(self.done)


def _execute(cluster: Cluster, kind: int, key: int, value: int, scan_len: int):
    while True:
        server = cluster.server_for(key)
        try:
            if kind == LOOKUP:
                return server.lookup(key)
            if kind == UPDATE:
                return server.update(key, value)
            if kind == INSERT:
                return server.insert(key, value)
            return server.range_scan(key, scan_len)
        except NotOwner:
            continue


def _run_phase(cluster: Cluster, streams, spec: WorkloadSpec, value_base: int,
               progress: _Progress | None, log: OpLog | None, errors: list) -> None:
    def worker(w: int) -> None:
        st = streams[w]
        kinds = st.kinds.tolist()
        keys = st.keys.tolist()
        scan_len = spec.scan_length
        done = progress.done if progress is not None else None
        try:
            for i, (kind, key) in enumerate(zip(kinds, keys)):
                value = value_base + w * len(kinds) + i
                res = _execute(cluster, kind, key, value, scan_len)
                if log is not None:
                    log.record(w, OP_NAMES[kind], key, None if kind in (LOOKUP, SCAN) else value,
                               scan_len if kind == SCAN else 0, res)
                if done is not None:
                    done[w] = i + 1
        except BaseException as exc:  # surfaced in the report
            errors.append(f"worker {w}: {type(exc).__name__}: {exc}")

    threads = [threading.Thread(target=worker, args=(w,), name=f"bench-{w}")
               for w in range(len(streams))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()


def shifted_boundaries(table, key_space: int) -> list[int]:
    """Default repartition target: each boundary moves halfway into the next range."""
    b = list(table.boundaries)
    ends = b[1:] + [key_space]
    return [x + (e - x) // 2 for x, e in zip(b, ends)]


def recovery_stats(timeline: list[dict], at: float, duration: float, interval: float) -> dict:
    """Throughput before a repartition versus the best full interval after it."""
    pre = [p["throughput"] for p in timeline if p["t"] <= at]
    post = [p["throughput"] for p in timeline
            if p["t"] - interval >= at + duration and not p.get("partial")]
    out = {"pre_throughput": sum(pre) / len(pre) if pre else None,
           "post_throughput": max(post) if post else None}
    out["recovery"] = (out["post_throughput"] / out["pre_throughput"]
                       if pre and post and out["pre_throughput"] else None)
    return out


def run_benchmark(cfg: BenchConfig, cluster_hook=None) -> RunReport:
    """Bulk load, warm up, then run the measured phase and assemble a report.

    ``cluster_hook(cluster)`` runs after the bulk load (tests use it to inspect
    or instrument the cluster).
    """
    cfg.validate()
    spec = cfg.workload
    keys = record_keys(spec.records)
    cluster = Cluster(cfg.cluster_config(), keys, keys)
    try:
        if cluster_hook is not None:
            cluster_hook(cluster)
        return _run(cfg, spec, cluster, keys)
    finally:
        cluster.shutdown()


def _run(cfg: BenchConfig, spec: WorkloadSpec, cluster: Cluster, keys: np.ndarray) -> RunReport:
    n_workers = cfg.threads
    errors: list[str] = []
    disjoint = cfg.verify
    if spec.warmup:
        per = spec.warmup // n_workers
        warm = [worker_stream(spec, per, w, n_workers, phase=1, disjoint=disjoint)
                for w in range(n_workers)]
        # warmup writes are part of the state the oracle replays from
        _run_phase(cluster, warm, spec, 1 << 40, None, None, errors)
    initial = None
    if cfg.verify:
        initial = cluster.items()
    per = spec.ops // n_workers
    streams = [worker_stream(spec, per, w, n_workers, phase=2, disjoint=disjoint)
               for w in range(n_workers)]
    total_ops = per * n_workers
    log = OpLog() if cfg.verify else None
    progress = _Progress(n_workers)
    timeline: list[dict] = []
    repart: dict = {}
    stop = threading.Event()

    fabric = cluster.fabric
    s0 = fabric.stats.snapshot()
    c0 = cluster.stats()
    t0 = time.perf_counter()

    def sampler() -> None:
        last, k = 0, 1
        while not stop.wait(max(0.0, t0 + k * cfg.timeline_interval - time.perf_counter())):
            now = progress.total()
            timeline.append({"t": round(k * cfg.timeline_interval, 6),
                             "ops": now - last,
                             "throughput": (now - last) / cfg.timeline_interval})
            last, k = now, k + 1

    def repartitioner() -> None:
        if stop.wait(cfg.repartition_at):
            return
        bounds = cfg.repartition_boundaries or shifted_boundaries(cluster.table, cluster.config.key_space)
        owners = cfg.repartition_owners
        acct: dict = {}

        def on_closed(old, new):
            acct["ceded_dirty"] = cluster.ceded_dirty(old, new)
            acct["writes_before"] = fabric.stats.snapshot().writes

        started = time.perf_counter() - t0
        res = cluster.repartition(bounds, owners, on_closed=on_closed)
        repart.update({
            "at": started, "duration": res.duration, "flushed": res.flushed,
            "dropped": res.dropped, "ceded_dirty": acct.get("ceded_dirty"),
            "flush_writes": fabric.stats.snapshot().writes - acct.get("writes_before", 0),
            "boundaries": list(res.new.boundaries), "owners": list(res.new.owners),
            "ops_before": progress.total(),
        })

    aux = [threading.Thread(target=sampler, name="bench-timeline", daemon=True)]
    if cfg.repartition_at is not None and cfg.compute_servers > 1:
        aux.append(threading.Thread(target=repartitioner, name="bench-repartition", daemon=True))
    for t in aux:
        t.start()
    _run_phase(cluster, streams, spec, 0, progress, log, errors)
    elapsed = time.perf_counter() - t0
    stop.set()
    for t in aux:
        t.join()
    tail = progress.total() - sum(p["ops"] for p in timeline)
    frac = elapsed - len(timeline) * cfg.timeline_interval
    if tail and frac > 0:
        timeline.append({"t": round(elapsed, 6), "ops": tail, "throughput": tail / frac,
                         "partial": True})

    if repart:
        repart.update(recovery_stats(timeline, repart["at"], repart["duration"],
                                     cfg.timeline_interval))
    delta = fabric.stats.snapshot() - s0
    cstats = _diff(cluster.stats(), c0)
    looked = cstats["hits"] + cstats["misses"]
    attempts = cstats["offloads"] + cstats["offload_smo"] + cstats["offload_fallbacks"]
    op_counts = {name: 0 for name in OP_NAMES}
    for st in streams:
        for k, c in zip(*np.unique(st.kinds, return_counts=True)):
            op_counts[OP_NAMES[int(k)]] += int(c)

    verification = None
    invariant_errors = list(errors)
    if cfg.verify:
        final = cluster.items()
        verification = check_equivalence(log, final, initial.items(), per_thread=n_workers > 1)
    invariant_errors.extend(cluster.check())
    if repart and repart.get("ceded_dirty") != repart.get("flushed"):
        invariant_errors.append(
            f"repartition flushed {repart['flushed']} pages, {repart['ceded_dirty']} were ceded dirty")

    return RunReport(
        workload=spec.name, ops=total_ops, seconds=elapsed,
        throughput=total_ops / elapsed if elapsed > 0 else 0.0,
        hit_ratio=cstats["hits"] / looked if looked else 0.0,
        offloads=cstats["offloads"],
        offload_acceptance=cstats["offloads"] / attempts if attempts else 0.0,
        totals=delta.as_dict(), cache=cstats, op_counts=op_counts, timeline=timeline,
        repartition=repart or None, verification=verification,
        invariant_errors=invariant_errors, **_per_op(delta, total_ops))


def format_report(rep: RunReport) -> str:
    rows = [
        ("workload", rep.workload),
        ("ops", f"{rep.ops}"),
        ("seconds", f"{rep.seconds:.3f}"),
        ("throughput (ops/s)", f"{rep.throughput:,.0f}"),
        ("reads/op", f"{rep.reads_per_op:.4f}"),
        ("writes/op", f"{rep.writes_per_op:.4f}"),
        ("atomics/op", f"{rep.atomics_per_op:.4f}"),
        ("two-sided/op", f"{rep.two_sided_per_op:.4f}"),
        ("traffic B/op", f"{rep.traffic_bytes_per_op:.1f}"),
        ("hit ratio", f"{rep.hit_ratio:.4f}"),
        ("offloads", f"{rep.offloads}"),
        ("offload acceptance", f"{rep.offload_acceptance:.3f}"),
    ]
    if rep.repartition:
        r = rep.repartition
        rows.append(("repartition", f"at {r['at']:.2f}s, gate {r['duration'] * 1e3:.1f} ms, "
                                    f"flushed {r['flushed']}, dropped {r['dropped']}"))
    if rep.verification is not None:
        rows.append(("verification", "pass" if not rep.verification else
                     f"FAIL ({len(rep.verification)} problems)"))
    rows.append(("invariants", "pass" if not rep.invariant_errors else
                 f"FAIL ({len(rep.invariant_errors)} problems)"))
    w = max(len(k) for k, _ in rows)
    lines = [f"{k:<{w}}  {v}" for k, v in rows]
    if rep.timeline:
        lines.append("timeline (t, ops/s): " + ", ".join(
            f"{p['t']:g}:{p['throughput']:,.0f}" for p in rep.timeline))
    return "\n".join(lines)
