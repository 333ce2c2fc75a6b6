"""Pushing the rest of a traversal down to the memory server.

When a non-shared node at level L <= M misses in the cache, a compute thread
can ship the remaining lookup/update/insert to the executor of the memory
server holding that subtree instead of fetching L+1 nodes.  The choice is made
per thread by comparing moving averages of observed fetch and RPC latencies.

Request record (48 bytes, little endian)::

    0   u64  subtree root address
    8   u8   level of the subtree root
    9   u8   operation (0 lookup, 1 update, 2 insert)
    10  u8   has value
    11  5    padding
    16  u64  key
    24  u64  value
    32  u64  low bound of the caller's range
    40  u64  high bound of the caller's range

Reply record (16 + 8n bytes)::

    0   u8   status (0 ok, 1 not found, 2 smo required)
    1   u8   has value
    2   u16  n = number of updated node addresses
    4   4    padding
    8   u64  value (lookup result, or previous value when an insert overwrote)
    16  n*u64 updated node addresses
"""
from __future__ import annotations

import enum
import random
import struct
import time
from bisect import bisect_left, bisect_right
from collections import deque
from dataclasses import dataclass, field

from .cache import IO_MARKER
from .fabric import Fabric, addr_server
from .node import LOCK_BIT, Node, NodeLayout, node_insert, OpResult, read_version

_REQ = struct.Struct("<QBBB5xQQQQ")
_REP = struct.Struct("<BBH4xQ")
REQUEST_BYTES = _REQ.size
REPLY_HEADER_BYTES = _REP.size


class OpKind(enum.IntEnum):
    LOOKUP = 0
    UPDATE = 1
    INSERT = 2


class Status(enum.IntEnum):
    OK = 0
    NOT_FOUND = 1
    SMO_REQUIRED = 2


@dataclass
class OffloadRequest:
    root: int
    level: int
    op: OpKind
    key: int
    value: int | None = None
    range_low: int = 0
    range_high: int = (1 << 64) - 1

    def encode(self) -> bytes:
        has = self.value is not None
        return _REQ.pack(self.root, self.level, int(self.op), int(has), self.key,
                         self.value if has else 0, self.range_low, self.range_high)

    @classmethod
    def decode(cls, buf: bytes) -> "OffloadRequest":
        root, level, op, has, key, value, lo, hi = _REQ.unpack_from(buf, 0)
        return cls(root, level, OpKind(op), key, value if has else None, lo, hi)


@dataclass
class OffloadReply:
    status: Status
    value: int | None = None
    updated: list[int] = field(default_factory=list)

    def encode(self) -> bytes:
        has = self.value is not None
        n = len(self.updated)
        head = _REP.pack(int(self.status), int(has), n, self.value if has else 0)
        return head + struct.pack(f"<{n}Q", *self.updated)

    @classmethod
    def decode(cls, buf: bytes) -> "OffloadReply":
        status, has, n, value = _REP.unpack_from(buf, 0)
        updated = list(struct.unpack_from(f"<{n}Q", buf, _REP.size)) if n else []
        return cls(Status(status), value if has else None, updated)


class MovingAverage:
    """Mean of the most recent ``window`` samples."""

    __slots__ = ("_q", "_sum", "window")

    def __init__(self, window: int = 50) -> None:
        if window < 1:
            raise ValueError("window must be positive")
        self.window = window
        self._q: deque[float] = deque()
        self._sum = 0.0

    def add(self, sample: float) -> None:
        q = self._q
        q.append(sample)
        self._sum += sample
        if len(q) > self.window:
            self._sum -= q.popleft()

    def __len__(self) -> int:
        return len(self._q)

    @property
    def mean(self) -> float | None:
        q = self._q
        if not q:
            return None
        if len(q) == self.window:
            # refresh occasionally to stop floating point drift
            self._sum = sum(q)
        return self._sum / len(q)


@dataclass
class OffloadConfig:
    enabled: bool = True
    search_latency: float = 0.4e-6
    coefficient: float = 1.2
    explore_prob: float = 0.01
    window: int = 50
    # "modeled": sample the fabric's injected verb latency; "wall": time the call
    latency_samples: str = "modeled"

    def validate(self) -> None:
        if self.latency_samples not in ("modeled", "wall"):
            raise ValueError("latency_samples must be 'modeled' or 'wall'")
        if self.coefficient <= 1:
            raise ValueError("offload coefficient must exceed 1")
        if not 0 <= self.explore_prob <= 1:
            raise ValueError("explore_prob must be within [0, 1]")
        if self.search_latency < 0:
            raise ValueError("search_latency must be non-negative")
        if self.window < 1:
            raise ValueError("window must be positive")


class OffloadCostModel:
    """Per-thread decision rule: offload when an RPC beats fetching the remaining levels.

    Offloading from a node at level ``L`` replaces ``L + 1`` fetch-and-search
    steps, so it wins when ``rpc < (L + 1) * (fetch + search) * coefficient``.
    With probability ``explore_prob`` the decision is flipped so both latency
    averages keep receiving samples.
    """

    def __init__(self, fetch_bootstrap: float, config: OffloadConfig | None = None,
                 rng: random.Random | None = None, offload_bootstrap: float | None = None) -> None:
        self.config = config or OffloadConfig()
        self.config.validate()
        self.fetch = MovingAverage(self.config.window)
        self.rpc = MovingAverage(self.config.window)
        self.fetch_bootstrap = fetch_bootstrap
        self.rpc_bootstrap = 2 * fetch_bootstrap if offload_bootstrap is None else offload_bootstrap
        self.rng = rng or random.Random(0)

    @property
    def l_o(self) -> float:
        m = self.fetch.mean
        return self.fetch_bootstrap if m is None else m

    @property
    def l_p(self) -> float:
        m = self.rpc.mean
        return self.rpc_bootstrap if m is None else m

    def record_fetch_latency(self, seconds: float) -> None:
        self.fetch.add(seconds)

    def record_offload_latency(self, seconds: float) -> None:
        self.rpc.add(seconds)

    def base_decision(self, level: int) -> bool:
        c = self.config
        return self.l_p < (level + 1) * (self.l_o + c.search_latency) * c.coefficient

    def deserve_offload(self, level: int) -> bool:
        d = self.base_decision(level)
        q = self.config.explore_prob
        if q and self.rng.random() < q:
            d = not d
        return d


# -- memory side --------------------------------------------------------

class MemoryExecutor:
    """Runs offloaded traversals against one memory server's region."""

    def __init__(self, fabric: Fabric, server_id: int, layout: NodeLayout, M: int) -> None:
        self.region = fabric.local_region(server_id)
        self.server_id = server_id
        self.layout = layout
        self.M = M
        self.served = 0

    def serve(self, payload: bytes) -> bytes:
        return self.execute(OffloadRequest.decode(payload)).encode()

    def _read_stable(self, addr: int) -> tuple[Node, int]:
        region, size = self.region, self.layout.node_size
        while True:
            v = region.read_word(addr)
            if v & LOCK_BIT:
                time.sleep(0)
                continue
            buf = region.read(addr, size)
            if read_version(buf) == v and region.read_word(addr) == v:
                return self.layout.decode(buf), v

    def execute(self, req: OffloadRequest) -> OffloadReply:
        self.served += 1
        smo = OffloadReply(Status.SMO_REQUIRED)
        if req.level > self.M or addr_server(req.root) != self.server_id:
            return smo
        addr, level, key = req.root, req.level, req.key
        first = True
        while True:
            node, v = self._read_stable(addr)
            if node.addr != addr or node.level != level or not node.low <= key < node.high:
                return smo
            if first:
                first = False
                # the subtree must sit inside the caller's own range
                if node.low < req.range_low or node.high > req.range_high:
                    return smo
            if level == 0:
                break
            addr = node.vals[_child_slot(node.keys, key)]
            level -= 1
        if req.op == OpKind.LOOKUP:
            i = _find(node.keys, key)
            if i < 0:
                return OffloadReply(Status.NOT_FOUND)
            return OffloadReply(Status.OK, node.vals[i])
        return self._write_leaf(addr, v, req)

    def _write_leaf(self, addr: int, v: int, req: OffloadRequest) -> OffloadReply:
        region, layout = self.region, self.layout
        if region.cas(addr, v, v | LOCK_BIT) != v:
            return OffloadReply(Status.SMO_REQUIRED)
        node = layout.decode(region.read(addr, layout.node_size))
        key = req.key
        i = _find(node.keys, key)
        if req.op == OpKind.UPDATE:
            if i < 0:
                region.write(addr, struct.pack("<Q", v))
                return OffloadReply(Status.NOT_FOUND)
            region.write(addr + layout.val_offset(i), struct.pack("<Q", req.value))
            region.write(addr, struct.pack("<Q", v + 2))
            return OffloadReply(Status.OK, None, [addr])
        old = node.vals[i] if i >= 0 else None
        res = node_insert(node, key, req.value, layout.capacity)
        if res == OpResult.FULL:
            region.write(addr, struct.pack("<Q", v))
            return OffloadReply(Status.SMO_REQUIRED)
        node.version = v | LOCK_BIT
        buf = layout.encode(node)
        region.write(addr + 8, bytes(buf[8:]))
        region.write(addr, struct.pack("<Q", v + 2))
        return OffloadReply(Status.OK, old, [addr])


_child_slot = bisect_right


def _find(keys: list, key: int) -> int:
    i = bisect_left(keys, key)
    return i if i < len(keys) and keys[i] == key else -1


# -- compute side -------------------------------------------------------

class Offloader:
    """Compute-side orchestration of one offloaded operation."""

    def __init__(self, fabric: Fabric, cache) -> None:
        self.fabric = fabric
        self.cache = cache

    def offload(self, parent, vp: int, req: OffloadRequest, ctx) -> OffloadReply | None:
        """Pin the parent, mark the subtree root as in IO, ship the request.

        Returns None when the offload could not start (parent changed or the
        node is already being loaded) or the RPC failed; the caller then
        restarts or falls back to fetching.
        """
        cache = self.cache
        if not parent.pin_if(vp):
            return None
        try:
            if not cache.mapping.install_io(req.root):
                return None
            try:
                t0 = time.perf_counter()
                try:
                    raw = self.fabric.rpc_call(addr_server(req.root), req.encode())
                except Exception:
                    ctx.offload_fallbacks += 1
                    return None
                reply = OffloadReply.decode(raw)
                if ctx.cost is not None:
                    if ctx.cost.config.latency_samples == "wall":
                        ctx.cost.record_offload_latency(time.perf_counter() - t0)
                    else:
                        ctx.cost.record_offload_latency(self.fabric.modeled_latency(two_sided=True))
                for a in reply.updated:
                    cache.invalidate(a, ctx)
                if reply.status == Status.SMO_REQUIRED:
                    ctx.offload_smo += 1
                else:
                    ctx.offloads += 1
                return reply
            finally:
                cache.mapping.remove(req.root, IO_MARKER)
        finally:
            parent.unpin()
