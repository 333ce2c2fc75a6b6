"""Command line entry point: benchmark runs and the two analysis formulas."""
from __future__ import annotations

import argparse
import configparser
import json
import sys

from ..cache import replacement_frequency
from ..fabric import LATENCY_MODES, apply_overrides
from ..offload import OffloadConfig, OffloadCostModel
from .runner import BenchConfig, format_report, run_benchmark
from .workload import WORKLOADS, WorkloadSpec

# CLI flag -> (section, BenchConfig / WorkloadSpec field)
_RUN_FLAGS = {
    "theta": ("workload", "theta"),
    "distribution": ("workload", "distribution"),
    "records": ("workload", "records"),
    "ops": ("workload", "ops"),
    "warmup": ("workload", "warmup"),
    "scan_length": ("workload", "scan_length"),
    "compute_servers": ("bench", "compute_servers"),
    "threads_per_server": ("bench", "threads_per_server"),
    "memory_servers": ("bench", "memory_servers"),
    "executors_per_server": ("bench", "executors_per_server"),
    "node_size": ("bench", "node_size"),
    "subtree_level_M": ("bench", "subtree_level"),
    "latency_mode": ("bench", "latency_mode"),
    "latency_one_sided": ("bench", "latency_one_sided"),
    "latency_two_sided": ("bench", "latency_two_sided"),
    "cooling_structure": ("bench", "cooling_structure"),
    "repartition_at": ("bench", "repartition_at"),
    "timeline_interval": ("bench", "timeline_interval"),
}


def _add_run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("workload", nargs="?", default=None,
                   help=f"named mix: {', '.join(WORKLOADS)} (default write-intensive)")
    p.add_argument("--mix", help="insert/lookup/update/scan percentages, e.g. 10/80/10/0")
    p.add_argument("--theta", type=float)
    p.add_argument("--distribution", choices=("zipfian", "uniform"))
    p.add_argument("--records", type=int)
    p.add_argument("--ops", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--scan-length", type=int)
    p.add_argument("--compute-servers", type=int)
    p.add_argument("--threads-per-server", type=int)
    p.add_argument("--memory-servers", type=int)
    p.add_argument("--executors-per-server", type=int)
    p.add_argument("--cache-mb", type=float)
    p.add_argument("--node-size", type=int)
    p.add_argument("--subtree-level-M", type=int, dest="subtree_level_M")
    p.add_argument("--latency-mode", choices=LATENCY_MODES)
    p.add_argument("--latency-one-sided", type=float, help="seconds")
    p.add_argument("--latency-two-sided", type=float, help="seconds")
    p.add_argument("--seed", type=int)
    p.add_argument("--disable-offload", action="store_true")
    p.add_argument("--disable-lazy-admission", action="store_true")
    p.add_argument("--cooling-structure", choices=("map", "single-queue"))
    p.add_argument("--repartition-at", type=float, help="seconds into the measured phase")
    p.add_argument("--repartition-boundaries", help="comma separated keys")
    p.add_argument("--timeline-interval", type=float)
    p.add_argument("--verify", action="store_true",
                   help="log every operation and check it against the reference map")
    p.add_argument("--config", help="INI file with [workload] and [bench] sections")
    p.add_argument("--json", metavar="PATH", help="also write the report as JSON ('-' for stdout)")


def build_config(args: argparse.Namespace) -> BenchConfig:
    """Defaults, then the config file, then explicitly given flags."""
    cfg = BenchConfig()
    file_wl: dict = {}
    file_bench: dict = {}
    if args.config:
        parser = configparser.ConfigParser()
        with open(args.config) as fh:
            parser.read_file(fh)
        if parser.has_section("workload"):
            file_wl = dict(parser["workload"])
        if parser.has_section("bench"):
            file_bench = dict(parser["bench"])
    mix = args.mix or file_wl.pop("mix", None)
    wl_name = args.workload or file_wl.pop("name", None) or "write-intensive"
    file_wl.pop("name", None)
    cfg.workload = WorkloadSpec.from_mix(mix) if mix else WorkloadSpec.named(wl_name)
    if "cache_mb" in file_bench:
        cfg.cache_bytes = int(float(file_bench.pop("cache_mb")) * (1 << 20))
    apply_overrides(cfg.workload, file_wl)
    apply_overrides(cfg, file_bench)
    for flag, (section, name) in _RUN_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            setattr(cfg.workload if section == "workload" else cfg, name, v)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.workload.seed = args.seed
    if args.cache_mb is not None:
        cfg.cache_bytes = int(args.cache_mb * (1 << 20))
    if args.disable_offload:
        cfg.offload = False
    if args.disable_lazy_admission:
        cfg.lazy_admission = False
    if args.repartition_boundaries:
        cfg.repartition_boundaries = [int(x, 0) for x in args.repartition_boundaries.split(",")]
    if args.verify:
        cfg.verify = True
    cfg.validate()
    return cfg


def cmd_run(args: argparse.Namespace) -> int:
    try:
        cfg = build_config(args)
    except (ValueError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    rep = run_benchmark(cfg)
    print(format_report(rep))
    if args.json:
        text = json.dumps(rep.as_dict(), indent=2, sort_keys=True)
        if args.json == "-":
            print(text)
        else:
            with open(args.json, "w") as fh:
                fh.write(text + "\n")
    for e in (rep.verification or [])[:20]:
        print(f"verification: {e}", file=sys.stderr)
    for e in rep.invariant_errors[:20]:
        print(f"invariant: {e}", file=sys.stderr)
    return 0 if rep.ok else 1


def cmd_replacement(args: argparse.Namespace) -> int:
    local = replacement_frequency(args.t_hit, args.t_local_miss, args.miss_ratio, args.threads)
    remote = replacement_frequency(args.t_hit, args.t_remote_miss, args.miss_ratio, args.threads)
    print(f"{'setting':<24}{'miss latency':>14}{'replacements/s':>18}")
    print(f"{'local SSD':<24}{args.t_local_miss * 1e6:>12.1f}us{local:>18.4g}")
    print(f"{'disaggregated memory':<24}{args.t_remote_miss * 1e6:>12.1f}us{remote:>18.4g}")
    print(f"ratio (disaggregated / SSD): {remote / local:.2f}x")
    return 0


def cmd_offload(args: argparse.Namespace) -> int:
    cfg = OffloadConfig(search_latency=args.l_s, coefficient=args.c, explore_prob=0.0)
    model = OffloadCostModel(args.l_o, cfg, offload_bootstrap=args.l_p)
    print(f"l_p={args.l_p:g}s l_o={args.l_o:g}s l_s={args.l_s:g}s c={args.c:g}")
    print(f"{'level':>5}  {'fetch path (s)':>16}  decision")
    for level in range(args.max_level + 1):
        budget = (level + 1) * (args.l_o + args.l_s) * args.c
        print(f"{level:>5}  {budget:>16.3g}  {'offload' if model.base_decision(level) else 'fetch'}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="dmtree-bench",
                                     description="B+-tree over a simulated memory pool")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_run_args(sub.add_parser("run", help="run a benchmark"))
    p = sub.add_parser("check", help="short verified run; exit status reflects invariants")
    _add_run_args(p)
    p = sub.add_parser("analyze-replacement", help="cache replacements per second")
    p.add_argument("--t-hit", type=float, default=400e-9)
    p.add_argument("--t-local-miss", type=float, default=100e-6)
    p.add_argument("--t-remote-miss", type=float, default=2e-6)
    p.add_argument("--miss-ratio", type=float, default=0.1)
    p.add_argument("--threads", type=int, default=36)
    p = sub.add_parser("analyze-offload", help="offload decision per level")
    p.add_argument("--l-p", type=float, default=8e-6, help="offload round trip (s)")
    p.add_argument("--l-o", type=float, default=2e-6, help="one node fetch (s)")
    p.add_argument("--l-s", type=float, default=0.4e-6, help="in-node search (s)")
    p.add_argument("--c", type=float, default=1.2)
    p.add_argument("--max-level", type=int, default=4)
    args = parser.parse_args(argv)
    if args.command == "run":
        return cmd_run(args)
    if args.command == "check":
        if args.records is None:
            args.records = 20_000
        if args.ops is None:
            args.ops = 20_000
        if args.warmup is None:
            args.warmup = 2_000
        args.verify = True
        return cmd_run(args)
    if args.command == "analyze-replacement":
        return cmd_replacement(args)
    return cmd_offload(args)


if __name__ == "__main__":
    raise SystemExit(main())
