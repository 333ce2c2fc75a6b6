"""Logical partitioning of the key space across compute servers.

Ranges are half-open; a boundary key belongs to the range above it.  Moving a
boundary moves no bytes in the memory pool, it only changes which compute
server may cache and write the nodes in that range.
"""
from __future__ import annotations

import threading
import time
from bisect import bisect_right
from dataclasses import dataclass, field

from .node import KEY_INF

DEFAULT_KEY_SPACE = 1 << 32

OWN, SHARED, FOREIGN = "own", "shared", "foreign"


class PartitionTable:
    """Immutable routing table: sorted boundaries and one owner per range."""

    __slots__ = ("boundaries", "owners", "epoch")

    def __init__(self, boundaries, owners, epoch: int = 0) -> None:
        boundaries = [int(b) for b in boundaries]
        owners = [int(o) for o in owners]
        if len(owners) != len(boundaries) + 1:
            raise ValueError("need exactly one owner per range (len(boundaries) + 1)")
        for b in boundaries:
            if not 0 < b < KEY_INF:
                raise ValueError(f"boundary {b} outside the key domain")
        for a, b in zip(boundaries, boundaries[1:]):
            if a >= b:
                raise ValueError("boundaries must be strictly increasing")
        if any(o < 0 for o in owners):
            raise ValueError("owner ids must be non-negative")
        # merge neighbouring ranges with the same owner
        nb, no = [], [owners[0]]
        for b, o in zip(boundaries, owners[1:]):
            if o == no[-1]:
                continue
            nb.append(b)
            no.append(o)
        self.boundaries = tuple(nb)
        self.owners = tuple(no)
        self.epoch = epoch

    @classmethod
    def equal_width(cls, servers: int, key_space: int = DEFAULT_KEY_SPACE) -> "PartitionTable":
        if servers < 1:
            raise ValueError("need at least one compute server")
        bounds = [key_space * i // servers for i in range(1, servers)]
        return cls(bounds, range(servers))

    def owner_of(self, key: int) -> int:
        return self.owners[bisect_right(self.boundaries, key)]

    def range_index(self, key: int) -> int:
        return bisect_right(self.boundaries, key)

    def is_shared(self, low: int, high: int) -> bool:
        """True when [low, high) intersects at least two owners' ranges."""
        if high <= low:
            return False
        b = self.boundaries
        return bisect_right(b, low) != bisect_right(b, high - 1)

    def classify(self, server: int, low: int, high: int) -> str:
        if high <= low:
            return FOREIGN
        b = self.boundaries
        i, j = bisect_right(b, low), bisect_right(b, high - 1)
        if i != j:
            return SHARED
        return OWN if self.owners[i] == server else FOREIGN

    def ranges(self) -> list[tuple[int, int, int]]:
        """(low, high, owner) for every range."""
        edges = [0, *self.boundaries, KEY_INF]
        return [(edges[i], edges[i + 1], o) for i, o in enumerate(self.owners)]

    def ranges_of(self, server: int) -> list[tuple[int, int]]:
        return [(lo, hi) for lo, hi, o in self.ranges() if o == server]

    def servers(self) -> set[int]:
        return set(self.owners)

    def with_epoch(self, epoch: int) -> "PartitionTable":
        return PartitionTable(self.boundaries, self.owners, epoch)

    def same_layout(self, other: "PartitionTable") -> bool:
        return self.boundaries == other.boundaries and self.owners == other.owners

    def __repr__(self) -> str:
        return f"PartitionTable(epoch={self.epoch}, boundaries={list(self.boundaries)}, owners={list(self.owners)})"


class NotOwner(Exception):
    """The key is not owned by the compute server the operation was sent to."""


class Gate:
    """Admits operations into a compute server unless a repartition holds it closed.

    Workers mark themselves in flight with a plain flag and re-check the gate,
    so the common path takes no lock.  Closing waits until every registered
    worker is outside.
    """

    def __init__(self) -> None:
        self._open = True
        self._reopened = threading.Event()
        self._reopened.set()
        self._members: list = []
        self._lock = threading.Lock()

    def register(self, ctx) -> None:
        with self._lock:
            self._members.append(ctx)

    def enter(self, ctx) -> None:
        while True:
            ctx.inflight = True
            if self._open:
                return
            ctx.inflight = False
            self._reopened.wait()

    @staticmethod
    def leave(ctx) -> None:
        ctx.inflight = False

    def close(self, caller_ctx=None) -> None:
        self._reopened.clear()
        self._open = False
        while True:
            with self._lock:
                busy = any(c.inflight for c in self._members if c is not caller_ctx)
            if not busy:
                return
            time.sleep(0.0002)

    def open(self) -> None:
        self._open = True
        self._reopened.set()

    @property
    def is_open(self) -> bool:
        return self._open


@dataclass
class RepartitionResult:
    old: PartitionTable
    new: PartitionTable
    flushed: int = 0
    dropped: int = 0
    duration: float = 0.0
    snapped: list = field(default_factory=list)


class Partitioner:
    """Serializes repartitions across a set of compute servers.

    Each server must provide ``id``, ``gate``, ``table``, ``install_table``,
    ``handoff(old, new) -> (flushed, dropped)`` and
    ``nearest_separator(key) -> key``.
    """

    def __init__(self, servers, table: PartitionTable) -> None:
        self.servers = list(servers)
        self._table = table
        self._lock = threading.Lock()
        self.history: list[RepartitionResult] = []

    @property
    def table(self) -> PartitionTable:
        return self._table

    def snap(self, boundaries, table: PartitionTable | None = None) -> list[int]:
        """Move each proposed boundary onto the nearest lowest-inner-level separator."""
        table = table or self._table
        out = []
        for b in boundaries:
            owner = self._server(table.owner_of(b))
            out.append(owner.nearest_separator(b))
        return out

    def _server(self, sid: int):
        for s in self.servers:
            if s.id == sid:
                return s
        raise ValueError(f"no compute server {sid}")

    def repartition(self, boundaries, owners=None, snap: bool = True,
                    on_closed=None) -> RepartitionResult:
        """Move range boundaries while every compute server's gate is closed.

        ``on_closed(old, new)`` runs once the gates are closed and the new
        table is known, before any cache handoff (used for accounting).
        """
        with self._lock:
            old = self._table
            if owners is None:
                owners = list(old.owners) if len(old.owners) == len(boundaries) + 1 else None
                if owners is None:
                    raise ValueError("owners must be given when the range count changes")
            proposal = PartitionTable(boundaries, owners, old.epoch + 1)  # validates
            known = {s.id for s in self.servers}
            if not proposal.servers() <= known:
                raise ValueError("owner ids must name existing compute servers")
            t0 = time.perf_counter()
            for s in self.servers:
                s.gate.close()
            try:
                if snap:
                    snapped = self.snap(boundaries, old)
                    new = PartitionTable(snapped, owners, old.epoch + 1)
                else:
                    snapped = list(boundaries)
                    new = proposal
                if on_closed is not None:
                    on_closed(old, new)
                flushed = dropped = 0
                for s in self.servers:
                    f, d = s.handoff(old, new)
                    flushed += f
                    dropped += d
                for s in self.servers:
                    s.install_table(new)
                self._table = new
            finally:
                for s in self.servers:
                    s.gate.open()
            res = RepartitionResult(old, new, flushed, dropped, time.perf_counter() - t0, snapped)
            self.history.append(res)
            return res
