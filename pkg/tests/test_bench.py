import math
import re

import numpy as np
import pytest

from dmtree.bench import cli
from dmtree.bench.runner import BenchConfig, recovery_stats, run_benchmark, shifted_boundaries
from dmtree.bench.workload import (INSERT, WorkloadSpec, generate_indices, key_step, rank_permutation,
                                   worker_stream, zipf_table)
from dmtree.partition import PartitionTable


# -- workload generation -------------------------------------------------------

def test_uniform_chi_square():
    k, n = 200, 400_000
    spec = WorkloadSpec(distribution="uniform", records=k, seed=3)
    counts = np.bincount(generate_indices(spec, n), minlength=k)
    expected = n / k
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    df = k - 1
    assert abs(chi2 - df) < 5 * math.sqrt(2 * df)


def test_zipf_top_rank_mass():
    k, theta, n = 1000, 0.99, 1_000_000
    harmonic = sum(r ** -theta for r in range(1, k + 1))
    assert zipf_table(k, theta).mass(0) == pytest.approx(1 / harmonic)
    spec = WorkloadSpec(records=k, theta=theta, seed=11)
    idx = generate_indices(spec, n)
    hottest = rank_permutation(k, spec.seed)[0]
    assert float(np.mean(idx == hottest)) == pytest.approx(1 / harmonic, rel=0.02)


def test_same_seed_same_stream():
    spec = WorkloadSpec.named("insert-intensive", records=5000, seed=4)
    a = worker_stream(spec, 3000, 1, 4)
    b = worker_stream(spec, 3000, 1, 4)
    assert np.array_equal(a.kinds, b.kinds) and np.array_equal(a.keys, b.keys)
    c = worker_stream(WorkloadSpec.named("insert-intensive", records=5000, seed=5), 3000, 1, 4)
    assert not np.array_equal(a.keys, c.keys)


def test_inserted_keys_never_collide():
    spec = WorkloadSpec.named("insert-intensive", records=1000, seed=2)
    step = key_step(spec.records)
    seen = set()
    for w in range(4):
        s = worker_stream(spec, 2000, w, 4)
        ins = s.keys[s.kinds == INSERT]
        assert not np.any(ins % np.uint64(step) == 0)  # never a bulk-loaded key
        assert seen.isdisjoint(ins.tolist())
        seen.update(ins.tolist())


def test_disjoint_streams_partition_records():
    spec = WorkloadSpec.named("write-intensive", records=997, seed=1)
    step = key_step(spec.records)
    for w in range(4):
        s = worker_stream(spec, 2000, w, 4, disjoint=True)
        assert set(((s.keys // np.uint64(step)) - np.uint64(1)) % np.uint64(4)) == {w}


def test_workload_spec_validation_and_mix():
    spec = WorkloadSpec.from_mix("10/80/10/0")
    assert spec.mix == (10, 80, 10, 0)
    spec.validate()
    assert WorkloadSpec.named("scan-intensive").mix == (5, 0, 0, 95)
    for bad in (WorkloadSpec.from_mix("10/80/20/0"), WorkloadSpec(distribution="pareto"),
                WorkloadSpec(theta=0.0), WorkloadSpec(records=0)):
        with pytest.raises(ValueError):
            bad.validate()
    with pytest.raises(ValueError):
        WorkloadSpec.from_mix("10/90")
    with pytest.raises(ValueError):
        WorkloadSpec.named("nope")


# -- runner ----------------------------------------------------------------------

def small(name="write-intensive", records=20_000, ops=8_000, warmup=2_000, **kw):
    kw.setdefault("compute_servers", 1)
    kw.setdefault("threads_per_server", 1)
    kw.setdefault("cache_bytes", 1 << 20)
    return BenchConfig(workload=WorkloadSpec.named(name, records=records, ops=ops, warmup=warmup), **kw)


def test_read_only_fully_cached_needs_no_reads():
    records = 20_000
    cfg = small("read-only", records=records, ops=10_000, warmup=60_000,
                cache_bytes=4 * records * 16, offload=False, lazy_admission=False)
    rep = run_benchmark(cfg)
    assert rep.reads_per_op < 0.05 and rep.ok


def test_write_intensive_uses_no_atomics():
    rep = run_benchmark(small(compute_servers=2, threads_per_server=2))
    assert rep.atomics_per_op == 0.0 and rep.ok


def test_single_thread_run_is_deterministic():
    a = run_benchmark(small(seed=9))
    b = run_benchmark(small(seed=9))
    assert a.totals == b.totals and a.cache == b.cache


def test_report_arithmetic():
    rep = run_benchmark(small("insert-intensive", threads_per_server=2))
    t = rep.totals
    assert rep.ops == 8_000 and sum(rep.op_counts.values()) == rep.ops
    assert rep.reads_per_op * rep.ops == pytest.approx(t["reads"])
    assert rep.writes_per_op * rep.ops == pytest.approx(t["writes"])
    assert rep.atomics_per_op * rep.ops == pytest.approx(t["cas"])
    assert rep.two_sided_per_op * rep.ops == pytest.approx(t["two_sided"])
    total_bytes = t["read_bytes"] + t["write_bytes"] + t["cas_bytes"] + t["two_sided_bytes"]
    assert rep.traffic_bytes_per_op * rep.ops == pytest.approx(total_bytes)
    assert rep.verbs_per_op == pytest.approx(
        rep.reads_per_op + rep.writes_per_op + rep.atomics_per_op + rep.two_sided_per_op)


def test_verified_run_with_repartition():
    cfg = small(records=20_000, ops=40_000, warmup=4_000, compute_servers=2, threads_per_server=2,
                cache_bytes=64 << 10, verify=True, repartition_at=0.05, timeline_interval=0.05)
    rep = run_benchmark(cfg)
    r = rep.repartition
    assert r is not None
    assert r["flushed"] == r["ceded_dirty"] == r["flush_writes"]
    assert rep.verification == [] and rep.invariant_errors == []


def test_shifted_boundaries_and_recovery_stats():
    t = PartitionTable([100], [0, 1])
    assert shifted_boundaries(t, 300) == [200]
    line = [{"t": 1.0, "throughput": 10.0}, {"t": 2.0, "throughput": 12.0},
            {"t": 3.0, "throughput": 2.0}, {"t": 4.0, "throughput": 11.0},
            {"t": 4.5, "throughput": 99.0, "partial": True}]
    s = recovery_stats(line, at=2.1, duration=0.5, interval=1.0)
    assert s["pre_throughput"] == 11.0 and s["post_throughput"] == 11.0
    assert s["recovery"] == 1.0


def test_config_validation():
    for kw in (dict(compute_servers=0), dict(timeline_interval=0), dict(repartition_at=-1)):
        with pytest.raises(ValueError):
            small(**kw).validate()


# -- command line ------------------------------------------------------------------

def numbers(text):
    return [float(x) for x in re.findall(r"[-+]?\d+\.?\d*(?:e[-+]?\d+)?", text)]


def test_cli_analyze_replacement(capsys):
    assert cli.main(["analyze-replacement"]) == 0
    out = capsys.readouterr().out
    ssd = numbers(out.splitlines()[1])[-1]
    pool = numbers(out.splitlines()[2])[-1]
    assert ssd == pytest.approx(0.35e6, rel=0.01) and pool == pytest.approx(6.43e6, rel=0.01)
    assert numbers(out.splitlines()[3])[0] >= 18
    cli.main(["analyze-replacement", "--threads", "72"])
    assert numbers(capsys.readouterr().out.splitlines()[2])[-1] == pytest.approx(2 * pool, rel=1e-3)
    # every access misses: the rate is threads / miss latency
    cli.main(["analyze-replacement", "--miss-ratio", "1.0"])
    lines = capsys.readouterr().out.splitlines()
    assert numbers(lines[2])[-1] == pytest.approx(36 / 2e-6, rel=1e-3)
    assert numbers(lines[3])[0] == pytest.approx(50.0, abs=0.01)


def test_cli_analyze_offload(capsys):
    assert cli.main(["analyze-offload", "--l-p", "4e-6", "--l-o", "2e-6"]) == 0
    rows = [ln.split() for ln in capsys.readouterr().out.splitlines()[2:]]
    assert [r[-1] for r in rows[:3]] == ["fetch", "offload", "offload"]


def test_cli_run_and_check(capsys, tmp_path):
    out_json = tmp_path / "r.json"
    rc = cli.main(["run", "read-intensive", "--records", "5000", "--ops", "2000", "--warmup", "500",
                   "--compute-servers", "1", "--threads-per-server", "1", "--json", str(out_json)])
    assert rc == 0 and out_json.exists()
    assert "throughput" in capsys.readouterr().out
    assert cli.main(["check", "--records", "5000", "--ops", "4000", "--warmup", "500"]) == 0
    assert re.search(r"verification\s+pass", capsys.readouterr().out)


def test_cli_config_file_and_errors(tmp_path, capsys):
    ini = tmp_path / "bench.ini"
    ini.write_text("[workload]\nmix = 0/100/0/0\nrecords = 4000\nops = 1000\nwarmup = 0\n"
                   "[bench]\ncompute_servers = 1\nthreads_per_server = 1\ncache_mb = 1\n")
    assert cli.main(["run", "--config", str(ini)]) == 0
    assert "mix-0/100/0/0" in capsys.readouterr().out
    assert cli.main(["run", "--mix", "50/50/50/0"]) == 2
    assert cli.main(["run", "--config", str(tmp_path / "missing.ini")]) == 2
    with pytest.raises(SystemExit):
        cli.main(["bogus"])
