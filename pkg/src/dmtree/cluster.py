"""A complete simulated deployment: memory pool, executors and compute servers."""
from __future__ import annotations

import dataclasses
import struct
from bisect import bisect_right
from dataclasses import dataclass, field

import numpy as np

from .cache import CacheConfig
from .fabric import Fabric, FabricConfig
from .index import ComputeServer, TreeEnv, closest_edge
from .node import Node, NodeLayout, Placement, PlacementConfig, TreeReport, bulk_load, walk_tree
from .offload import MemoryExecutor, OffloadConfig
from .partition import DEFAULT_KEY_SPACE, OWN, NotOwner, Partitioner, PartitionTable, RepartitionResult


@dataclass
class ClusterConfig:
    fabric: FabricConfig = field(default_factory=FabricConfig)
    placement: PlacementConfig = field(default_factory=PlacementConfig)
    cache: CacheConfig = field(default_factory=CacheConfig)
    offload: OffloadConfig = field(default_factory=OffloadConfig)
    compute_servers: int = 1
    executors_per_server: int = 1
    key_space: int = DEFAULT_KEY_SPACE

    def validate(self) -> None:
        self.fabric.validate()
        self.placement.validate()
        self.cache.validate()
        self.offload.validate()
        if self.cache.node_size != self.placement.node_size:
            raise ValueError("cache and placement disagree on node_size")
        if self.compute_servers < 1:
            raise ValueError("need at least one compute server")
        if self.executors_per_server < 1:
            raise ValueError("need at least one executor thread per memory server")
        if not 2 <= self.key_space:
            raise ValueError("key_space too small")


class Cluster:
    """Builds the tree from sorted ``keys``/``values`` and starts every component."""

    def __init__(self, config: ClusterConfig | None = None, keys=(), values=None) -> None:
        self.config = config = config or ClusterConfig()
        config.validate()
        self.fabric = fabric = Fabric(config.fabric)
        self.layout = NodeLayout(config.placement.node_size)
        self.placement = Placement(config.placement, fabric.num_servers)
        self.root_holder = fabric.allocate(0, 64)
        keys = np.asarray(keys, dtype=np.uint64)
        if values is None:
            values = keys
        self.load = bulk_load(keys, values, fabric, self.placement, self.layout)
        fabric.poke(self.root_holder, struct.pack("<Q", self.load.root))
        for s in range(fabric.num_servers):
            ex = MemoryExecutor(fabric, s, self.layout, config.placement.M)
            fabric.register_executor(s, ex.serve, config.executors_per_server)
        self.env = TreeEnv(fabric, self.layout, self.placement, self.root_holder)
        n = config.compute_servers
        table = PartitionTable.equal_width(n, config.key_space)
        if n > 1:
            table = PartitionTable([self._remote_edge(b) for b in table.boundaries], table.owners)
        self.servers = [
            ComputeServer(self.env, i,
                          dataclasses.replace(config.cache,
                                              rng_seed=config.cache.rng_seed * 7919 + i),
                          table, dataclasses.replace(config.offload))
            for i in range(n)
        ]
        self.partitioner = Partitioner(self.servers, table)
        fabric.stats.reset()

    def _remote_edge(self, key: int) -> int:
        """Nearest range edge of the lowest inner node covering ``key``, read from the pool."""
        node = self._peek_node(self.root())
        if node.level == 0:
            raise ValueError("tree too small to place a partition boundary")
        while node.level > 1:
            node = self._peek_node(node.vals[bisect_right(node.keys, key)])
        return closest_edge(node, key)

    def _peek_node(self, addr: int) -> Node:
        return self.layout.decode(self.fabric.peek(addr, self.layout.node_size))

    # -- routing --------------------------------------------------------
    @property
    def table(self) -> PartitionTable:
        return self.partitioner.table

    def server_for(self, key: int) -> ComputeServer:
        return self.servers[self.partitioner.table.owner_of(key)]

    def _routed(self, name: str, key: int, *args):
        while True:
            try:
                return getattr(self.server_for(key), name)(key, *args)
            except NotOwner:
                continue

    def lookup(self, key: int):
        return self._routed("lookup", key)

    def update(self, key: int, value: int):
        return self._routed("update", key, value)

    def insert(self, key: int, value: int):
        return self._routed("insert", key, value)

    def remove(self, key: int):
        return self._routed("remove", key)

    def range_scan(self, start: int, count: int):
        """Scan across partitions by handing off at each owner's range end."""
        out = []
        key = start
        while len(out) < count:
            table = self.partitioner.table
            try:
                part = self.server_for(key).range_scan(key, count - len(out))
            except NotOwner:
                continue
            i = table.range_index(key)
            end = table.boundaries[i] if i < len(table.boundaries) else None
            if end is not None:
                part = [p for p in part if p[0] < end]
            out.extend(part)
            if end is None or len(out) >= count:
                break
            key = end
        return out[:count]

    # -- maintenance ----------------------------------------------------
    def repartition(self, boundaries, owners=None, on_closed=None) -> RepartitionResult:
        return self.partitioner.repartition(boundaries, owners, on_closed=on_closed)

    def ceded_dirty(self, old: PartitionTable, new: PartitionTable) -> int:
        """Dirty cached nodes whose range leaves their server's sole ownership."""
        n = 0
        for s in self.servers:
            for f in s.cache.frames:
                node = f.node
                if f.dirty and node is not None and old.classify(s.id, node.low, node.high) == OWN \
                        and new.classify(s.id, node.low, node.high) != OWN:
                    n += 1
        return n

    def root(self) -> int:
        """Current root address (uncounted read)."""
        return struct.unpack("<Q", self.fabric.peek(self.root_holder, 8))[0]

    def flush_all(self) -> int:
        return sum(s.flush() for s in self.servers)

    def walk(self, collect: bool = True) -> TreeReport:
        """Structural check of the pool image (flush first for an up-to-date view)."""
        return walk_tree(self.fabric, self.root(), self.layout, self.config.placement.M, collect)

    def check(self) -> list[str]:
        """Flush, then return every tree and cache invariant violation (quiescent only)."""
        self.flush_all()
        errors = list(self.walk(collect=False).errors)
        for s in self.servers:
            errors.extend(f"server {s.id}: {e}" for e in s.check_cache())
        if self.fabric.guard_violations:
            errors.append(f"{self.fabric.guard_violations} executor accesses outside their server")
        return errors

    def items(self) -> dict:
        self.flush_all()
        return self.walk().items

    def stats(self) -> dict:
        out: dict = {}
        for s in self.servers:
            for k, v in s.stats().items():
                if k != "hit_ratio":
                    out[k] = out.get(k, 0) + v
        looked = out.get("hits", 0) + out.get("misses", 0)
        out["hit_ratio"] = out["hits"] / looked if looked else 0.0
        return out

    def shutdown(self) -> None:
        self.fabric.shutdown()

    def __enter__(self) -> "Cluster":
        return self

    def __exit__(self, *exc) -> None:
        self.shutdown()
