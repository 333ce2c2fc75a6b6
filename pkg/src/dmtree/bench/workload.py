"""Workload mixes and key streams."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..partition import DEFAULT_KEY_SPACE

# insert / lookup / update / scan percentages
WORKLOADS = {
    "read-only": (0, 100, 0, 0),
    "read-intensive": (0, 95, 5, 0),
    "write-intensive": (0, 50, 50, 0),
    "insert-intensive": (50, 50, 0, 0),
    "scan-intensive": (5, 0, 0, 95),
}

INSERT, LOOKUP, UPDATE, SCAN = 0, 1, 2, 3
OP_NAMES = ("insert", "lookup", "update", "scan")


@dataclass
class WorkloadSpec:
    insert: int = 0
    lookup: int = 50
    update: int = 50
    scan: int = 0
    distribution: str = "zipfian"
    theta: float = 0.99
    records: int = 2_000_000
    ops: int = 1_000_000
    warmup: int = 100_000
    scan_length: int = 100
    seed: int = 1
    name: str = "write-intensive"

    @classmethod
    def named(cls, name: str, **kw) -> "WorkloadSpec":
        if name not in WORKLOADS:
            raise ValueError(f"unknown workload {name!r}; choose from {sorted(WORKLOADS)}")
        i, l, u, s = WORKLOADS[name]
        return cls(insert=i, lookup=l, update=u, scan=s, name=name, **kw)

    @classmethod
    def from_mix(cls, mix: str, **kw) -> "WorkloadSpec":
        """Parse ``insert/lookup/update/scan`` percentages, e.g. ``10/80/10/0``."""
        parts = mix.split("/")
        if len(parts) != 4:
            raise ValueError("mix must have four parts: insert/lookup/update/scan")
        i, l, u, s = (int(p) for p in parts)
        return cls(insert=i, lookup=l, update=u, scan=s, name=f"mix-{mix}", **kw)

    @property
    def mix(self) -> tuple[int, int, int, int]:
        return self.insert, self.lookup, self.update, self.scan

    def validate(self) -> None:
        if any(p < 0 for p in self.mix) or sum(self.mix) != 100:
            raise ValueError("mix percentages must be non-negative and sum to 100")
        if self.distribution not in ("zipfian", "uniform"):
            raise ValueError("distribution must be 'zipfian' or 'uniform'")
        if self.distribution == "zipfian" and self.theta <= 0:
            raise ValueError("zipfian theta must be positive")
        if self.records < 1 or self.ops < 0 or self.warmup < 0 or self.scan_length < 1:
            raise ValueError("records must be positive; ops, warmup non-negative; scan_length positive")


def key_step(records: int, key_space: int = DEFAULT_KEY_SPACE) -> int:
    step = key_space // (records + 1)
    if step < 2:
        raise ValueError("key space too small for the record count")
    return step


def record_keys(records: int, key_space: int = DEFAULT_KEY_SPACE) -> np.ndarray:
    """Evenly spaced bulk-load keys; the gaps leave room for inserted keys."""
    return (np.arange(1, records + 1, dtype=np.uint64) * np.uint64(key_step(records, key_space)))


class ZipfTable:
    """Exact Zipf sampler over ranks ``0..n-1`` by inverting the cumulative mass."""

    def __init__(self, n: int, theta: float) -> None:
        weights = np.arange(1, n + 1, dtype=np.float64) ** -theta
        self.norm = float(weights.sum())
        cdf = np.cumsum(weights)
        cdf /= cdf[-1]
        self.cdf = cdf
        self.n = n
        self.theta = theta

    def mass(self, rank: int) -> float:
        """Probability of the 0-based ``rank``."""
        return (rank + 1) ** -self.theta / self.norm

    def sample(self, u: np.ndarray) -> np.ndarray:
        return np.minimum(np.searchsorted(self.cdf, u, side="right"), self.n - 1)


_zipf_cache: dict[tuple[int, float], ZipfTable] = {}


def zipf_table(n: int, theta: float) -> ZipfTable:
    t = _zipf_cache.get((n, theta))
    if t is None:
        t = _zipf_cache[(n, theta)] = ZipfTable(n, theta)
    return t


def rank_permutation(records: int, seed: int) -> np.ndarray:
    """Fixed mapping from popularity rank to record index, so hot keys are scattered."""
    return np.random.default_rng([seed, 0x5EED]).permutation(records)


def generate_indices(spec: WorkloadSpec, n: int, stream: int = 0) -> np.ndarray:
    """``n`` record indices drawn from the workload's distribution (deterministic per stream)."""
    rng = np.random.default_rng([spec.seed, stream, 1])
    if spec.distribution == "uniform":
        return rng.integers(0, spec.records, size=n)
    ranks = zipf_table(spec.records, spec.theta).sample(rng.random(n))
    return rank_permutation(spec.records, spec.seed)[ranks]


def generate_ops(spec: WorkloadSpec, n: int, stream: int = 0) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, stream, 2])
    cum = np.cumsum(spec.mix)
    return np.searchsorted(cum, rng.integers(0, 100, size=n), side="right").astype(np.int8)


@dataclass
class OpStream:
    """Pre-generated operations for one worker thread."""
    kinds: np.ndarray
    keys: np.ndarray

    def __len__(self) -> int:
        return len(self.kinds)


def worker_stream(spec: WorkloadSpec, n: int, worker: int, workers: int, phase: int = 0,
                  disjoint: bool = False, key_space: int = DEFAULT_KEY_SPACE) -> OpStream:
    """Operations for one worker.

    Inserted keys fall in the gap after a drawn record key, in an offset lane
    reserved for the worker, so concurrent inserts never collide.  With
    ``disjoint`` every key the worker touches is confined to its own lane of
    record indices, giving per-key writer disjointness for verification.
    """
    stream = phase * 1_000_003 + worker
    idx = generate_indices(spec, n, stream)
    kinds = generate_ops(spec, n, stream)
    if disjoint and workers > 1:
        idx = idx - (idx % workers) + worker
        idx[idx >= spec.records] -= workers
        if np.any(idx < 0):
            raise ValueError("too few records for the number of workers")
    step = key_step(spec.records, key_space)
    keys = (idx.astype(np.uint64) + np.uint64(1)) * np.uint64(step)
    ins = kinds == INSERT
    if ins.any():
        lanes = max(1, (step - 1) // workers)
        seq = np.cumsum(ins) - 1 + phase * n
        offset = 1 + worker + workers * (seq[ins] % lanes)
        keys[ins] += offset.astype(np.uint64)
    return OpStream(kinds, keys)
