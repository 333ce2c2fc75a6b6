"""Simulated disaggregated memory pool.

One process hosts every memory server as a flat ``bytearray``.  Compute code
talks to it only through one-sided verbs (read, write, compare-and-swap) and a
two-sided RPC channel served by executor threads that the fabric owns.  Every
verb is counted, and wall-clock latency can be injected.

Addresses are plain 64-bit integers in the pool format
``[swizzled:1 | server:15 | offset:48]``; :class:`GlobalAddress` is the
structured view of the same word.
"""
from __future__ import annotations

import configparser
import dataclasses
import queue
import random
import struct
import threading
import time
from dataclasses import dataclass
from typing import Callable, NamedTuple

SWIZZLED_BIT = 1 << 63
SERVER_SHIFT = 48
SERVER_MASK = 0x7FFF
OFFSET_MASK = (1 << 48) - 1
WORD_MASK = (1 << 64) - 1

_U64 = struct.Struct("<Q")


class FabricError(Exception):
    pass


class AllocationError(FabricError):
    pass


class FabricFault(FabricError):
    """Access outside an allocated region."""


class ContractViolation(FabricError):
    """Misuse of a verb: swizzled address, misalignment, foreign region access."""


class UnsupportedOperation(FabricError):
    pass


class GlobalAddress(NamedTuple):
    swizzled: bool
    server_id: int
    offset: int

    @property
    def word(self) -> int:
        return (
            (SWIZZLED_BIT if self.swizzled else 0)
            | (self.server_id << SERVER_SHIFT)
            | self.offset
        )

    @classmethod
    def from_word(cls, word: int) -> "GlobalAddress":
        return cls(bool(word & SWIZZLED_BIT), (word >> SERVER_SHIFT) & SERVER_MASK, word & OFFSET_MASK)


def make_addr(server_id: int, offset: int) -> int:
    if not 0 <= server_id <= SERVER_MASK:
        raise ValueError(f"server id {server_id} out of range")
    if not 0 <= offset <= OFFSET_MASK:
        raise ValueError(f"offset {offset} out of range")
    return (server_id << SERVER_SHIFT) | offset


def addr_server(word: int) -> int:
    return (word >> SERVER_SHIFT) & SERVER_MASK


def addr_offset(word: int) -> int:
    return word & OFFSET_MASK


def _as_word(addr) -> int:
    if type(addr) is int:
        return addr
    if isinstance(addr, GlobalAddress):
        return addr.word
    raise TypeError(f"not an address: {addr!r}")


LATENCY_MODES = ("zero", "fixed", "fixed-with-jitter")


@dataclass
class FabricConfig:
    num_memory_servers: int = 2
    region_bytes_per_server: int = 64 << 20
    latency_one_sided: float = 2e-6
    latency_two_sided: float = 4e-6
    latency_jitter_pct: float = 0.0
    latency_mode: str = "zero"
    rng_seed: int = 0
    # reads copy the region in chunks of this size so concurrent writers can tear them
    tear_chunk_bytes: int = 256

    def validate(self) -> None:
        if not 1 <= self.num_memory_servers <= SERVER_MASK + 1:
            raise ValueError("num_memory_servers out of range")
        if self.region_bytes_per_server <= 0 or self.region_bytes_per_server > OFFSET_MASK + 1:
            raise ValueError("region_bytes_per_server out of range")
        if self.latency_mode not in LATENCY_MODES:
            raise ValueError(f"latency_mode must be one of {LATENCY_MODES}")
        if self.latency_one_sided < 0 or self.latency_two_sided < 0:
            raise ValueError("latencies must be non-negative")
        if not 0 <= self.latency_jitter_pct <= 100:
            raise ValueError("latency_jitter_pct must be within [0, 100]")
        if self.tear_chunk_bytes < 8:
            raise ValueError("tear_chunk_bytes must be at least 8")

    @classmethod
    def from_file(cls, path: str, section: str = "fabric") -> "FabricConfig":
        """Load from an INI file; keys of ``[fabric]`` are the field names."""
        parser = configparser.ConfigParser()
        with open(path) as fh:
            parser.read_file(fh)
        return cls.from_mapping(dict(parser[section]) if parser.has_section(section) else {})

    @classmethod
    def from_mapping(cls, values: dict) -> "FabricConfig":
        cfg = cls()
        apply_overrides(cfg, values)
        cfg.validate()
        return cfg


def apply_overrides(obj, values: dict) -> None:
    """Set dataclass fields from string (or already typed) values."""
    fields = {f.name: f for f in dataclasses.fields(obj)}
    for key, raw in values.items():
        name = key.strip().replace("-", "_")
        if name not in fields:
            raise ValueError(f"unknown setting {key!r} for {type(obj).__name__}")
        current = getattr(obj, name)
        if isinstance(raw, str):
            raw = raw.strip()
            if isinstance(current, bool):
                value = raw.lower() in ("1", "true", "yes", "on")
            elif isinstance(current, int):
                value = int(raw, 0)
            elif isinstance(current, float):
                value = float(raw)
            else:
                value = raw
        else:
            value = raw
        setattr(obj, name, value)


@dataclass(frozen=True)
class StatsSnapshot:
    reads: int = 0
    writes: int = 0
    cas: int = 0
    two_sided: int = 0
    read_bytes: int = 0
    write_bytes: int = 0
    cas_bytes: int = 0
    two_sided_bytes: int = 0

    @property
    def one_sided(self) -> int:
        return self.reads + self.writes + self.cas

    @property
    def total_verbs(self) -> int:
        return self.reads + self.writes + self.cas + self.two_sided

    @property
    def traffic_bytes(self) -> int:
        return self.read_bytes + self.write_bytes + self.cas_bytes + self.two_sided_bytes

    def __sub__(self, other: "StatsSnapshot") -> "StatsSnapshot":
        return StatsSnapshot(*(a - b for a, b in zip(dataclasses.astuple(self), dataclasses.astuple(other))))

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


class FabricStats:
    """Per-verb counters and byte totals, safe under concurrent updates."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._c = [0] * 8

    def _add(self, slot: int, nbytes: int) -> None:
        with self._lock:
            c = self._c
            c[slot] += 1
            c[slot + 4] += nbytes

    def snapshot(self) -> StatsSnapshot:
        with self._lock:
            return StatsSnapshot(*self._c)

    def reset(self) -> None:
        with self._lock:
            self._c = [0] * 8


_READ, _WRITE, _CAS, _RPC = 0, 1, 2, 3


class LocalRegion:
    """Direct, uncounted access to one server's bytes, for executor threads.

    Any address that names another server raises ContractViolation, which is
    how the confinement of offloaded work is enforced.
    """

    def __init__(self, fabric: "Fabric", server_id: int) -> None:
        self._fabric = fabric
        self.server_id = server_id
        self._mem = fabric._regions[server_id]
        self._lock = fabric._wlocks[server_id]

    def _check(self, addr: int, length: int) -> int:
        if addr & SWIZZLED_BIT:
            raise ContractViolation("swizzled address in memory-side access")
        if (addr >> SERVER_SHIFT) & SERVER_MASK != self.server_id:
            self._fabric._guard_violations += 1
            raise ContractViolation(
                f"executor on server {self.server_id} touched server {addr_server(addr)}")
        off = addr & OFFSET_MASK
        if off + length > len(self._mem):
            raise FabricFault("local access past region end")
        return off

    def read(self, addr: int, length: int) -> bytes:
        off = self._check(addr, length)
        return bytes(self._mem[off:off + length])

    def read_word(self, addr: int) -> int:
        off = self._check(addr, 8)
        return _U64.unpack_from(self._mem, off)[0]

    def write(self, addr: int, data) -> None:
        off = self._check(addr, len(data))
        with self._lock:
            self._mem[off:off + len(data)] = data

    def cas(self, addr: int, expected: int, desired: int) -> int:
        off = self._check(addr, 8)
        if off & 7:
            raise ContractViolation("misaligned CAS")
        with self._lock:
            observed = _U64.unpack_from(self._mem, off)[0]
            if observed == expected:
                _U64.pack_into(self._mem, off, desired & WORD_MASK)
            return observed


RpcHandler = Callable[[bytes], bytes]


class Fabric:
    """The memory pool: regions, verbs, RPC executors and statistics."""

    def __init__(self, config: FabricConfig | None = None) -> None:
        self.config = config or FabricConfig()
        self.config.validate()
        n = self.config.num_memory_servers
        size = self.config.region_bytes_per_server
        self._regions = [bytearray(size) for _ in range(n)]
        self._next = [0] * n
        self._alloc_lock = threading.Lock()
        # writes and CAS on a server serialize on this lock; reads never take it
        self._wlocks = [threading.Lock() for _ in range(n)]
        self.stats = FabricStats()
        self._rng = random.Random(self.config.rng_seed)
        self._rng_lock = threading.Lock()
        self._chunk = self.config.tear_chunk_bytes
        self._queues: dict[int, queue.SimpleQueue] = {}
        self._workers: dict[int, list[threading.Thread]] = {}
        self._guard_violations = 0
        self._closed = False
        mode = self.config.latency_mode
        self._applied = threading.local()
        self._sleeping = mode != "zero" and (
            self.config.latency_one_sided > 0 or self.config.latency_two_sided > 0)

    @property
    def num_servers(self) -> int:
        return len(self._regions)

    @property
    def guard_violations(self) -> int:
        return self._guard_violations

    # -- latency --------------------------------------------------------
    def _delay(self, base: float) -> float:
        mode = self.config.latency_mode
        if mode == "zero":
            return 0.0
        if mode == "fixed-with-jitter" and self.config.latency_jitter_pct:
            with self._rng_lock:
                u = self._rng.uniform(-1.0, 1.0)
            return max(0.0, base * (1.0 + u * self.config.latency_jitter_pct / 100.0))
        return base

    def delay_sequence(self, count: int, two_sided: bool = False) -> list[float]:
        """The next ``count`` delays the fabric would inject (consumes RNG draws)."""
        base = self.config.latency_two_sided if two_sided else self.config.latency_one_sided
        return [self._delay(base) for _ in range(count)]

    def modeled_latency(self, two_sided: bool = False) -> float:
        """Delay injected into the calling thread's most recent verb of that kind.

        With no injected latency this is the configured nominal value, so
        latency-driven policies still see realistic relative costs.
        """
        base = self.config.latency_two_sided if two_sided else self.config.latency_one_sided
        if self.config.latency_mode == "zero":
            return base
        return getattr(self._applied, "rpc" if two_sided else "one", base)

    def _sleep_one_sided(self) -> None:
        d = self._delay(self.config.latency_one_sided)
        self._applied.one = d
        if d > 0:
            time.sleep(d)

    # -- allocation -----------------------------------------------------
    def allocate(self, server_id: int, size: int, align: int = 8) -> int:
        """Bump-allocate ``size`` zeroed bytes; returns the unswizzled address word."""
        if not 0 <= server_id < self.num_servers:
            raise AllocationError(f"no memory server {server_id}")
        if size <= 0:
            raise AllocationError("allocation size must be positive")
        with self._alloc_lock:
            off = -(-self._next[server_id] // align) * align
            if off + size > len(self._regions[server_id]):
                raise AllocationError(
                    f"server {server_id} region exhausted ({size} bytes requested)")
            self._next[server_id] = off + size
        return make_addr(server_id, off)

    def allocate_address(self, server_id: int, size: int) -> GlobalAddress:
        return GlobalAddress.from_word(self.allocate(server_id, size))

    def allocated_bytes(self, server_id: int) -> int:
        return self._next[server_id]

    # -- address checks -------------------------------------------------
    def _locate(self, addr, length: int) -> tuple[bytearray, int, int]:
        word = _as_word(addr)
        if word & SWIZZLED_BIT:
            raise ContractViolation("swizzled address passed to a fabric verb")
        sid = (word >> SERVER_SHIFT) & SERVER_MASK
        if sid >= len(self._regions):
            raise FabricFault(f"no memory server {sid}")
        off = word & OFFSET_MASK
        region = self._regions[sid]
        if length < 0 or off + length > len(region):
            raise FabricFault(f"access [{off}, {off + length}) outside server {sid} region")
        return region, sid, off

    # -- one-sided verbs ------------------------------------------------
    def read(self, addr, length: int, out: bytearray | None = None) -> bytes | bytearray:
        """One-sided READ.  Not atomic against concurrent writes (torn reads happen)."""
        region, _, off = self._locate(addr, length)
        if self._sleeping:
            self._sleep_one_sided()
        chunk = self._chunk
        if length <= chunk:
            data = region[off:off + length]
        else:
            data = bytearray(length)
            for pos in range(0, length, chunk):
                end = min(pos + chunk, length)
                data[pos:end] = region[off + pos:off + end]
        self.stats._add(_READ, length)
        if out is not None:
            out[:length] = data
            return out
        return bytes(data)

    def read_word(self, addr) -> int:
        return _U64.unpack(self.read(addr, 8))[0]

    def write(self, addr, data) -> None:
        """One-sided WRITE."""
        length = len(data)
        region, sid, off = self._locate(addr, length)
        if self._sleeping:
            self._sleep_one_sided()
        with self._wlocks[sid]:
            region[off:off + length] = data
        self.stats._add(_WRITE, length)

    def write_word(self, addr, value: int) -> None:
        self.write(addr, _U64.pack(value & WORD_MASK))

    def cas(self, addr, expected: int, desired: int) -> int:
        """One-sided compare-and-swap on an aligned 8-byte word; returns the prior value."""
        region, sid, off = self._locate(addr, 8)
        if off & 7:
            raise ContractViolation("CAS address must be 8-byte aligned")
        if self._sleeping:
            self._sleep_one_sided()
        with self._wlocks[sid]:
            observed = _U64.unpack_from(region, off)[0]
            if observed == expected:
                _U64.pack_into(region, off, desired & WORD_MASK)
        self.stats._add(_CAS, 8)
        return observed

    def peek(self, addr, length: int) -> bytes:
        """Uncounted, latency-free read for validation tooling."""
        region, _, off = self._locate(addr, length)
        return bytes(region[off:off + length])

    def poke(self, addr, data) -> None:
        """Uncounted, latency-free write used for bulk loading."""
        region, sid, off = self._locate(addr, len(data))
        with self._wlocks[sid]:
            region[off:off + len(data)] = data

    def region_bytes(self, server_id: int) -> bytes:
        return bytes(self._regions[server_id][:self._next[server_id]])

    def local_region(self, server_id: int) -> LocalRegion:
        return LocalRegion(self, server_id)

    # -- two-sided RPC --------------------------------------------------
    def register_executor(self, server_id: int, handler: RpcHandler, threads: int = 1) -> None:
        if not 0 <= server_id < self.num_servers:
            raise ValueError(f"no memory server {server_id}")
        if threads < 1:
            raise ValueError("need at least one executor thread")
        if server_id in self._queues:
            raise ValueError(f"server {server_id} already has executors")
        q: queue.SimpleQueue = queue.SimpleQueue()
        self._queues[server_id] = q
        workers = []
        for i in range(threads):
            t = threading.Thread(target=self._serve, args=(q, handler),
                                 name=f"executor-{server_id}-{i}", daemon=True)
            t.start()
            workers.append(t)
        self._workers[server_id] = workers

    @staticmethod
    def _serve(q: queue.SimpleQueue, handler: RpcHandler) -> None:
        while True:
            item = q.get()
            if item is None:
                return
            payload, reply_box = item
            try:
                reply_box.put(handler(payload))
            except BaseException as exc:  # forwarded to the caller
                reply_box.put(exc)

    def rpc_call(self, server_id: int, payload: bytes) -> bytes:
        """Send ``payload`` to an executor of ``server_id`` and wait for its reply."""
        q = self._queues.get(server_id)
        if q is None:
            raise UnsupportedOperation(f"no executor registered on server {server_id}")
        if self._sleeping:
            d = self._delay(self.config.latency_two_sided)
            self._applied.rpc = d
            if d > 0:
                time.sleep(d)
        box: queue.SimpleQueue = queue.SimpleQueue()
        q.put((bytes(payload), box))
        reply = box.get()
        if isinstance(reply, BaseException):
            raise reply
        self.stats._add(_RPC, len(payload) + len(reply))
        return reply

    def shutdown(self) -> None:
        if self._closed:
            return
        self._closed = True
        for sid, q in self._queues.items():
            for _ in self._workers[sid]:
                q.put(None)
        for workers in self._workers.values():
            for t in workers:
                t.join(timeout=5)
        self._queues.clear()
        self._workers.clear()

    def __enter__(self) -> "Fabric":
        return self

    def __exit__(self, *exc) -> None:
        self.shutdown()
