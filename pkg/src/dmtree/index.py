"""Index operations of one compute server.

Traversal uses optimistic lock coupling over cache frames: read a frame's
version, read its content, then check the version again before trusting what
was read.  Nodes whose key range spans several partitions ("shared" nodes) are
fetched with the version-validated remote read and modified only under their
remote lock word.  All other nodes are private to this server and are written
back lazily.

Every operation method returns RETRY on any validation failure and the
driver loop restarts it from the root.
"""
from __future__ import annotations

import struct
import threading
import time
from bisect import bisect_left, bisect_right
from dataclasses import dataclass

from .cache import (COOLING, HOT, IDX_MASK, IO_MARKER, RETRY, Cache, CacheConfig,
                    CoherenceError, Frame, ThreadCtx, Transient)
from .fabric import SWIZZLED_BIT, Fabric, addr_server
from .node import (KEY_INF, MergeResult, Node, NodeLayout, OpResult, Placement, leaf_get,
                   merge_or_rebalance, node_insert, node_remove, split_node)
from .offload import (OffloadConfig, OffloadCostModel, Offloader, OffloadReply, OffloadRequest,
                      OpKind, Status)
from .partition import FOREIGN, OWN, SHARED, Gate, NotOwner, PartitionTable

LOOKUP, UPDATE, INSERT, REMOVE, SCAN = 0, 1, 2, 3, 4
SWZ = SWIZZLED_BIT
_U64 = struct.Struct("<Q")


@dataclass
class TreeEnv:
    """What every compute server shares: the pool, node format and placement."""
    fabric: Fabric
    layout: NodeLayout
    placement: Placement
    root_holder: int

    @property
    def M(self) -> int:
        return self.placement.M


class Offloaded:
    __slots__ = ("reply",)

    def __init__(self, reply: OffloadReply) -> None:
        self.reply = reply


class _Continue:
    pass


CONTINUE = _Continue()


class ComputeServer:
    """One compute server: a private cache plus the five index operations."""

    def __init__(self, env: TreeEnv, server_id: int, cache_config: CacheConfig,
                 table: PartitionTable, offload: OffloadConfig | None = None) -> None:
        self.env = env
        self.id = server_id
        self.fabric = env.fabric
        self.layout = env.layout
        self.placement = env.placement
        self.M = env.M
        self.root_holder = env.root_holder
        self.offload_config = offload or OffloadConfig()
        self.offload_config.validate()
        self.offload_enabled = self.offload_config.enabled
        self.gate = Gate()
        self.table = table
        self.cache = Cache(cache_config, self.fabric, self.layout, ctx_factory=self._init_ctx)
        self.offloader = Offloader(self.fabric, self.cache)
        self.root_addr = self.fabric.read_word(self.root_holder)
        self._root_frame: Frame | None = None
        self._root_lock = threading.Lock()
        self._cap = self.layout.capacity
        self._min_fill = self.layout.min_fill
        self.splits = 0
        self.merges = 0

    def _init_ctx(self, ctx: ThreadCtx) -> None:
        ctx.cost = OffloadCostModel(self.fabric.config.latency_one_sided, self.offload_config,
                                    rng=ctx.rng)
        self.gate.register(ctx)

    # -- public API -----------------------------------------------------
    def lookup(self, key: int):
        """The value stored under ``key``, or None."""
        return self._run(key, self._lookup_once, key)

    def update(self, key: int, value: int) -> OpResult:
        return self._run(key, self._update_once, key, value)

    def insert(self, key: int, value: int) -> OpResult:
        return self._run(key, self._insert_once, key, value)

    def remove(self, key: int) -> OpResult:
        return self._run(key, self._remove_once, key)

    def range_scan(self, start: int, count: int) -> list[tuple[int, int]]:
        """Up to ``count`` pairs with key >= ``start``, ascending, one descent per leaf."""
        ctx = self.cache.ctx()
        self.gate.enter(ctx)
        try:
            if self.table.owner_of(start) != self.id:
                raise NotOwner(start)
            out: list[tuple[int, int]] = []
            key = start
            while len(out) < count:
                pairs, high = self._retry(ctx, self._scan_leaf_once, key, count - len(out))
                out.extend(pairs)
                if high == KEY_INF:
                    break
                key = high
            return out
        finally:
            self.gate.leave(ctx)

    def flush(self) -> int:
        return self.cache.flush_dirty()

    def stats(self) -> dict:
        s = self.cache.stats()
        s["splits"] = self.splits
        s["merges"] = self.merges
        return s

    def check_cache(self) -> list[str]:
        return self.cache.check_invariants([self._root_frame])

    @property
    def root_frame(self) -> Frame | None:
        return self._root_frame

    # -- driver ---------------------------------------------------------
    def _run(self, key: int, fn, *args):
        ctx = self.cache.ctx()
        self.gate.enter(ctx)
        try:
            if self.table.owner_of(key) != self.id:
                raise NotOwner(key)
            ctx.allow_offload = self.offload_enabled
            ctx.force_admit = False
            return self._retry(ctx, fn, *args)
        finally:
            self.gate.leave(ctx)

    @staticmethod
    def _retry(ctx: ThreadCtx, fn, *args):
        restarts = 0
        while True:
            try:
                r = fn(ctx, *args)
            except IndexError:
                # an optimistic read saw a node mid-modification
                r = RETRY
            if r is not RETRY:
                return r
            restarts += 1
            ctx.restarts += 1
            if restarts > 10:
                time.sleep(ctx.rng.random() * 2e-5 * min(restarts - 10, 50))

    # -- root -----------------------------------------------------------
    def _root(self, ctx: ThreadCtx):
        f = self._root_frame
        if f is not None:
            return f
        with self._root_lock:
            f = self._root_frame
            if f is not None:
                return f
            cache = self.cache
            addr = self.root_addr
            r = cache.resolve(addr, None, 0, 0, ctx)
            if r is None:
                r = cache.fetch(addr, self.table.is_shared(0, KEY_INF), None, 0, 0, ctx, force=True)
            if r is RETRY:
                return RETRY
            f = r[0]
            v = f.ver
            if v & 1 or f.node is None or f.node.addr != addr or not f.pin_if(v):
                return RETRY
            self._root_frame = f
        self._adopt_children(f, ctx)
        return f

    def _adopt_children(self, f: Frame, ctx: ThreadCtx) -> None:
        """Swizzle cached, parentless children of a newly discovered root."""
        node = f.node
        if node is None or node.level == 0:
            return
        for i, ref in enumerate(list(node.vals)):
            if ref & SWZ:
                continue
            c = self.cache.mapping.get(ref)
            if c is None or c is IO_MARKER or c.state != HOT or c.parent is not None:
                continue
            v = f.ver
            if not v & 1:
                self.cache.resolve(ref, f, v, i, ctx)

    def _switch_root(self, new_addr: int) -> None:
        with self._root_lock:
            old = self._root_frame
            self.root_addr = new_addr
            self._root_frame = None
            if old is not None:
                old.unpin()

    # -- traversal ------------------------------------------------------
    def _descend(self, key: int, ctx: ThreadCtx, intent: int, stop_level: int = 0,
                 value: int | None = None):
        """Walk to the node at ``stop_level`` covering ``key``.

        Returns ``(frame, version, node, parent, parent_version, slot,
        transient)``, an :class:`Offloaded`, or RETRY.  ``frame`` is None
        when the node was fetched without admission (``transient`` is set).
        """
        cur = self._root(ctx)
        if cur is RETRY:
            return RETRY
        cache = self.cache
        frames = cache.frames
        table = self.table
        vc = cur.ver
        if vc & 1:
            return RETRY
        node = cur.node
        if node is None or node.addr != self.root_addr:
            return RETRY
        parent = None
        vp = 0
        slot = -1
        ctx.descents += 1
        while True:
            if intent == INSERT and len(node.keys) >= self._cap:
                r = self._eager_split(cur, vc, node, parent, vp, slot, key, ctx)
                if r is not CONTINUE:
                    return RETRY
            if node.level <= stop_level:
                break
            keys = node.keys
            idx = bisect_right(keys, key)
            ref = node.vals[idx]
            if parent is not None and parent.ver != vp:
                return RETRY
            child_level = node.level - 1
            if ref & SWZ:
                child = frames[ref & IDX_MASK]
                if cur.ver != vc:
                    return RETRY
                ctx.hits += 1
                nvp = vc
            else:
                lo = keys[idx - 1] if idx else node.low
                hi = keys[idx] if idx < len(keys) else node.high
                if cur.ver != vc:
                    return RETRY
                r = cache.resolve(ref, cur, vc, idx, ctx)
                if r is RETRY:
                    return RETRY
                if r is None:
                    shared = table.is_shared(lo, hi)
                    if (ctx.allow_offload and intent <= INSERT and not shared
                            and child_level <= self.M and ctx.cost.deserve_offload(child_level)):
                        return self._offload(cur, vc, ref, child_level, key, intent, ctx, value)
                    r = cache.fetch(ref, shared, cur, vc, idx, ctx, force=ctx.force_admit)
                    if r is RETRY:
                        return RETRY
                    if type(r) is Transient:
                        tn = r.node
                        if tn.level != child_level or not tn.low <= key < tn.high:
                            cache.release_transient(r)
                            if cur.ver == vc:
                                self.refresh_from_root(key, ctx)
                            return RETRY
                        return None, 0, tn, cur, vc, idx, r
                else:
                    ctx.hits += 1
                child, nvp = r
            parent, vp, slot = cur, nvp, idx
            cur = child
            vc = cur.ver
            if vc & 1:
                return RETRY
            node = cur.node
            if node is None:
                return RETRY
            if node.level != child_level or not node.low <= key < node.high:
                if cur.ver == vc and parent.ver == vp:
                    self.refresh_from_root(key, ctx)
                return RETRY
        return cur, vc, node, parent, vp, slot, None

    def _own_range(self, key: int) -> tuple[int, int]:
        t = self.table
        i = t.range_index(key)
        b = t.boundaries
        return (b[i - 1] if i else 0), (b[i] if i < len(b) else KEY_INF)

    def _offload(self, parent: Frame, vp: int, ref: int, level: int, key: int, intent: int,
                 ctx: ThreadCtx, value: int | None = None):
        lo, hi = self._own_range(key)
        req = OffloadRequest(ref, level, OpKind(intent), key, value, lo, hi)
        ctx.misses += 1
        reply = self.offloader.offload(parent, vp, req, ctx)
        if reply is None or reply.status == Status.SMO_REQUIRED:
            ctx.allow_offload = False
            return RETRY
        return Offloaded(reply)

    # -- point operations ----------------------------------------------
    def _lookup_once(self, ctx: ThreadCtx, key: int):
        r = self._descend(key, ctx, LOOKUP)
        if r is RETRY:
            return RETRY
        if type(r) is Offloaded:
            return r.reply.value if r.reply.status == Status.OK else None
        cur, vc, node, parent, vp, _, t = r
        val = leaf_get(node, key)
        if t is not None:
            self.cache.release_transient(t)
        elif cur.ver != vc:
            return RETRY
        if parent is not None and parent.ver != vp:
            return RETRY
        return val

    def _write_through(self, node: Node, ctx: ThreadCtx) -> None:
        node.version += 2
        self.fabric.write(node.addr, self.layout.encode(node))
        ctx.writebacks += 1

    def _update_once(self, ctx: ThreadCtx, key: int, value: int):
        r = self._descend(key, ctx, UPDATE, value=value)
        if r is RETRY:
            return RETRY
        if type(r) is Offloaded:
            return OpResult.UPDATED if r.reply.status == Status.OK else OpResult.NOT_FOUND
        cur, vc, node, parent, vp, _, t = r
        keys = node.keys
        i = bisect_left(keys, key)
        found = i < len(keys) and keys[i] == key
        if t is not None:
            if found:
                node.vals[i] = value
                self._write_through(node, ctx)
            self.cache.release_transient(t)
            return OpResult.UPDATED if found else OpResult.NOT_FOUND
        if not found:
            return RETRY if cur.ver != vc else OpResult.NOT_FOUND
        if not cur.try_lock(vc):
            return RETRY
        node.vals[i] = value
        cur.dirty = True
        cur.unlock()
        return OpResult.UPDATED

    def _insert_once(self, ctx: ThreadCtx, key: int, value: int):
        r = self._descend(key, ctx, INSERT, value=value)
        if r is RETRY:
            return RETRY
        if type(r) is Offloaded:
            return OpResult.UPDATED if r.reply.value is not None else OpResult.INSERTED
        cur, vc, node, parent, vp, _, t = r
        if t is not None:
            res = node_insert(node, key, value, self._cap)
            if res == OpResult.FULL:
                self.cache.release_transient(t)
                ctx.force_admit = True
                return RETRY
            self._write_through(node, ctx)
            self.cache.release_transient(t)
            return res
        if not cur.try_lock(vc):
            return RETRY
        res = node_insert(node, key, value, self._cap)
        if res == OpResult.FULL:
            cur.unlock_unchanged()
            return RETRY
        cur.dirty = True
        cur.unlock()
        return res

    def _remove_once(self, ctx: ThreadCtx, key: int):
        ctx.allow_offload = False
        r = self._descend(key, ctx, REMOVE)
        if r is RETRY:
            return RETRY
        cur, vc, node, parent, vp, _, t = r
        if t is not None:
            res = node_remove(node, key)
            if res == OpResult.REMOVED:
                self._write_through(node, ctx)
            self.cache.release_transient(t)
            if res == OpResult.REMOVED and len(node.keys) < self._min_fill:
                self._rebalance(key, 0, ctx)
            return res
        keys = node.keys
        i = bisect_left(keys, key)
        if not (i < len(keys) and keys[i] == key):
            return RETRY if cur.ver != vc else OpResult.NOT_FOUND
        if not cur.try_lock(vc):
            return RETRY
        node_remove(node, key)
        cur.dirty = True
        under = len(node.keys) < self._min_fill
        cur.unlock()
        if under and parent is not None:
            self._rebalance(key, 0, ctx)
        return OpResult.REMOVED

    def _scan_leaf_once(self, ctx: ThreadCtx, key: int, need: int):
        ctx.allow_offload = False
        r = self._descend(key, ctx, SCAN)
        if r is RETRY:
            return RETRY
        cur, vc, node, parent, vp, _, t = r
        keys = node.keys
        i = bisect_left(keys, key)
        j = min(len(keys), i + need)
        pairs = list(zip(keys[i:j], node.vals[i:j]))
        high = node.high
        if t is not None:
            self.cache.release_transient(t)
        elif cur.ver != vc:
            return RETRY
        if parent is not None and parent.ver != vp:
            return RETRY
        return pairs, high

    # -- splits ---------------------------------------------------------
    def _eager_split(self, cur: Frame, vc: int, node: Node, parent: Frame | None, vp: int,
                     slot: int, key: int, ctx: ThreadCtx):
        shared = self.table.is_shared(node.low, node.high)
        if shared and node.level > 0:
            # full shared nodes are split only on the refresh path
            return CONTINUE
        if parent is None:
            return self._split_root(cur, vc, key, ctx)
        pnode = parent.node
        if pnode is None or parent.ver != vp:
            return RETRY
        if self.table.is_shared(pnode.low, pnode.high):
            return self._split_under_shared(cur, vc, parent, vp, slot, key, ctx)
        return self._split_local(cur, vc, parent, vp, slot, ctx)

    def _new_right(self, frame: Frame, node: Node, parent: Frame, ctx: ThreadCtx,
                   rf: Frame) -> tuple[Node, int]:
        right_addr = self.fabric.allocate(
            self.placement.server_for_split(node.level, node.addr), self.layout.node_size)
        _, right, sep = split_node(node, right_addr)
        rf.node = right
        rf.parent = parent
        rf.dirty = True
        rf.state = HOT
        self.cache.mapping.set(right_addr, rf)
        if right.level:
            frames = self.cache.frames
            for v in right.vals:
                if v & SWZ:
                    frames[v & IDX_MASK].parent = rf
        self.splits += 1
        return right, sep

    def _split_local(self, cur: Frame, vc: int, parent: Frame, vp: int, slot: int,
                     ctx: ThreadCtx):
        cache = self.cache
        rf = cache.get_free_frame(ctx)
        if not parent.try_lock(vp):
            cache.release_frame(rf, ctx)
            return RETRY
        if not cur.try_lock(vc):
            parent.unlock_unchanged()
            cache.release_frame(rf, ctx)
            return RETRY
        pnode, node = parent.node, cur.node
        if len(pnode.keys) >= self._cap or pnode.vals[slot] != SWZ | cur.idx:
            cur.unlock_unchanged()
            parent.unlock_unchanged()
            cache.release_frame(rf, ctx)
            return RETRY
        right, sep = self._new_right(cur, node, parent, ctx, rf)
        pnode.keys.insert(slot, sep)
        pnode.vals.insert(slot + 1, SWZ | rf.idx)
        cur.dirty = True
        parent.dirty = True
        cur.unlock()
        parent.unlock()
        return RETRY

    def _lock_shared(self, frame: Frame, version: int):
        """Take the remote lock of a cached shared node and prove the cached copy current.

        Returns the remote version on success, RETRY if the frame changed
        locally, or None when the cached copy is stale (caller refreshes).
        """
        node = frame.node
        if node is None:
            return RETRY
        expected = node.version
        addr = node.addr
        fabric = self.fabric
        if expected & 1 or fabric.cas(addr, expected, expected | 1) != expected:
            return None
        fresh = self.layout.decode(fabric.read(addr, self.layout.node_size))
        try:
            current = (fresh.keys == node.keys
                       and fresh.vals == self.cache.unswizzled_vals(node))
        except AttributeError:
            current = False
        if frame.ver != version:
            fabric.write_word(addr, expected)
            return RETRY
        if not current:
            fabric.write_word(addr, expected)
            return None
        return expected

    def _publish_shared(self, node: Node, expected: int) -> None:
        """Write a shared node's body while holding its remote lock, then release it."""
        node.version = expected | 1
        buf = self.layout.encode(node, self.cache.unswizzled_vals(node))
        self.fabric.write(node.addr + 8, bytes(buf[8:]))
        self.fabric.write_word(node.addr, expected + 2)
        node.version = expected + 2

    def _split_under_shared(self, cur: Frame, vc: int, parent: Frame, vp: int, slot: int,
                            key: int, ctx: ThreadCtx):
        cache = self.cache
        rf = cache.get_free_frame(ctx)
        expected = self._lock_shared(parent, vp)
        if expected is RETRY or expected is None:
            cache.release_frame(rf, ctx)
            if expected is None:
                self.refresh_from_root(key, ctx, split_shared=True)
            return RETRY
        pnode = parent.node
        paddr = pnode.addr
        if len(pnode.keys) >= self._cap:
            self.fabric.write_word(paddr, expected)
            cache.release_frame(rf, ctx)
            self.refresh_from_root(key, ctx, split_shared=True)
            return RETRY
        if not parent.try_lock(vp):
            self.fabric.write_word(paddr, expected)
            cache.release_frame(rf, ctx)
            return RETRY
        if not cur.try_lock(vc):
            parent.unlock_unchanged()
            self.fabric.write_word(paddr, expected)
            cache.release_frame(rf, ctx)
            return RETRY
        node = cur.node
        if pnode.vals[slot] != SWZ | cur.idx:
            cur.unlock_unchanged()
            parent.unlock_unchanged()
            self.fabric.write_word(paddr, expected)
            cache.release_frame(rf, ctx)
            return RETRY
        right, sep = self._new_right(cur, node, parent, ctx, rf)
        pnode.keys.insert(slot, sep)
        pnode.vals.insert(slot + 1, SWZ | rf.idx)
        # children first, so the remote tree never routes into a missing node
        cache.write_back(rf, ctx)
        cache.write_back(cur, ctx)
        self._publish_shared(pnode, expected)
        cur.unlock()
        parent.unlock()
        return RETRY

    def _split_root(self, cur: Frame, vc: int, key: int, ctx: ThreadCtx):
        cache, fabric = self.cache, self.fabric
        node = cur.node
        if node is None or node.addr != self.root_addr:
            return RETRY
        rf = cache.get_free_frame(ctx)
        nrf = cache.get_free_frame(ctx)
        expected = node.version
        addr = node.addr

        def give_back():
            cache.release_frame(rf, ctx)
            cache.release_frame(nrf, ctx)

        if expected & 1 or fabric.cas(addr, expected, expected | 1) != expected:
            give_back()
            self.refresh_from_root(key, ctx)
            return RETRY
        if not cur.try_lock(vc):
            fabric.write_word(addr, expected)
            give_back()
            return RETRY
        level = node.level
        nr_addr = fabric.allocate(self.placement.server_for_new_root(level + 1, addr),
                                  self.layout.node_size)
        right, sep = self._new_right(cur, node, nrf, ctx, rf)
        new_root = Node(level + 1, 0, KEY_INF, nr_addr, 0, [sep], [SWZ | cur.idx, SWZ | rf.idx])
        nrf.node = new_root
        nrf.parent = None
        nrf.dirty = False
        nrf.state = HOT
        nrf.pin = 1
        cache.mapping.set(nr_addr, nrf)
        cur.parent = nrf
        cache.write_back(rf, ctx)
        node.version = expected | 1
        buf = self.layout.encode(node, cache.unswizzled_vals(node))
        fabric.write(addr + 8, bytes(buf[8:]))
        fabric.write(nr_addr, self.layout.encode(new_root, [addr, right.addr]))
        if fabric.cas(self.root_holder, addr, nr_addr) != addr:
            raise CoherenceError("root holder changed under a locked root")
        fabric.write_word(addr, expected + 2)
        node.version = expected + 2
        cur.dirty = False
        with self._root_lock:
            self.root_addr = nr_addr
            self._root_frame = nrf
            cur.unpin()
        cur.unlock()
        return RETRY

    # -- refresh --------------------------------------------------------
    def refresh_from_root(self, key: int, ctx: ThreadCtx, split_shared: bool = False) -> None:
        """Re-read the shared part of the path to ``key`` and fix stale cached copies.

        With ``split_shared`` every full shared node on the path is split on the
        way down, so a following insert finds room in its shared parent.
        """
        ctx.refreshes += 1
        fabric, cache, table = self.fabric, self.cache, self.table
        cap = self._cap
        for attempt in range(10_000):
            holder = fabric.read_word(self.root_holder)
            if holder != self.root_addr:
                self._switch_root(holder)
            addr, lo, hi = holder, 0, KEY_INF
            pfresh: Node | None = None
            restart = False
            while True:
                if not table.is_shared(lo, hi):
                    # a node that just stopped being shared may still be cached
                    # with its old, shared fences; the pool copy is authoritative
                    if pfresh is not None and not self._refresh_formerly_shared(addr, ctx):
                        restart = True
                    break
                fresh = cache.read_node(addr, True, ctx)
                if fresh is None or fresh.addr != addr or not fresh.low <= key < fresh.high:
                    restart = True
                    break
                if split_shared and len(fresh.keys) >= cap:
                    self._split_shared_remote(fresh, pfresh)
                    restart = True
                    break
                self._refresh_cached(addr, fresh, ctx)
                if fresh.level == 0:
                    break
                i = bisect_right(fresh.keys, key)
                lo = fresh.keys[i - 1] if i else fresh.low
                hi = fresh.keys[i] if i < len(fresh.keys) else fresh.high
                pfresh = fresh
                addr = fresh.vals[i]
            if not restart:
                return
            if attempt > 5:
                time.sleep(ctx.rng.random() * 1e-4)

    def _refresh_formerly_shared(self, addr: int, ctx: ThreadCtx) -> bool:
        f = self.cache.mapping.get(addr)
        if f is None or f is IO_MARKER:
            return True
        node = f.node
        if node is None or f.dirty or not self.table.is_shared(node.low, node.high):
            return True
        fresh = self.cache.read_node(addr, True, ctx)
        if fresh is None:
            return False
        self._refresh_cached(addr, fresh, ctx)
        return True

    def _refresh_cached(self, addr: int, fresh: Node, ctx: ThreadCtx) -> None:
        cache = self.cache
        f = cache.mapping.get(addr)
        if f is None or f is IO_MARKER:
            return
        if f.state == COOLING:
            if cache.cooling.remove(f, addr):
                f.lock()
                cache.free_frame(f, ctx)
                f.unlock()
            return
        node = f.node
        if f.state != HOT or node is None or node.addr != addr or node.version == fresh.version:
            return
        f.lock()
        try:
            if f.node is not node or f.state != HOT:
                return
            vanished = cache.refresh_in_place(f, fresh.copy())
        finally:
            f.unlock()
        for ch in vanished:
            cache.cool_subtree(ch, ctx)

    def _split_shared_remote(self, x: Node, y: Node | None) -> bool:
        """Split the full shared node ``x`` (parent ``y``, None for the root) in the pool."""
        fabric, layout = self.fabric, self.layout
        xv = x.version
        yv = 0
        if y is not None:
            yv = y.version
            if len(y.keys) >= self._cap or fabric.cas(y.addr, yv, yv | 1) != yv:
                return False
        if fabric.cas(x.addr, xv, xv | 1) != xv:
            if y is not None:
                fabric.write_word(y.addr, yv)
            return False
        if y is None and fabric.read_word(self.root_holder) != x.addr:
            fabric.write_word(x.addr, xv)
            return False
        right_addr = fabric.allocate(self.placement.server_for_split(x.level, x.addr),
                                     layout.node_size)
        _, right, sep = split_node(x, right_addr)
        right.version = 0
        fabric.write(right_addr, layout.encode(right))
        x.version = xv | 1
        body = layout.encode(x)
        if y is not None:
            i = bisect_right(y.keys, sep)
            y.keys.insert(i, sep)
            y.vals.insert(i + 1, right_addr)
            fabric.write(x.addr + 8, bytes(body[8:]))
            fabric.write_word(x.addr, xv + 2)
            y.version = yv | 1
            fabric.write(y.addr + 8, bytes(layout.encode(y)[8:]))
            fabric.write_word(y.addr, yv + 2)
        else:
            nr_addr = fabric.allocate(self.placement.server_for_new_root(x.level + 1, x.addr),
                                      layout.node_size)
            fabric.write(nr_addr, layout.encode(
                Node(x.level + 1, 0, KEY_INF, nr_addr, 0, [sep], [x.addr, right_addr])))
            fabric.write(x.addr + 8, bytes(body[8:]))
            if fabric.cas(self.root_holder, x.addr, nr_addr) != x.addr:
                raise CoherenceError("root holder changed under a locked root")
            fabric.write_word(x.addr, xv + 2)
        self.splits += 1
        return True

    # -- merges ---------------------------------------------------------
    def _rebalance(self, key: int, level: int, ctx: ThreadCtx) -> None:
        """Best effort: fix an underfull node at ``level`` on the path to ``key``."""
        saved = ctx.force_admit, ctx.allow_offload
        ctx.force_admit, ctx.allow_offload = True, False
        try:
            for _ in range(8):
                try:
                    r = self._merge_at(key, level, ctx)
                except IndexError:
                    r = RETRY
                if r is not RETRY:
                    break
        finally:
            ctx.force_admit, ctx.allow_offload = saved

    def _merge_at(self, key: int, level: int, ctx: ThreadCtx):
        r = self._descend(key, ctx, REMOVE, stop_level=level)
        if r is RETRY:
            return RETRY
        cur, vc, node, parent, vp, slot, t = r
        if t is not None:
            self.cache.release_transient(t)
            return RETRY
        if parent is None:
            if node.level > 0 and not node.keys:
                return self._collapse_root(cur, vc, key, ctx)
            return MergeResult.NONE
        if len(node.keys) >= self._min_fill:
            return MergeResult.NONE
        pnode = parent.node
        nchildren = len(pnode.vals)
        if nchildren < 2:
            return MergeResult.NONE
        if slot + 1 < nchildren:
            lslot = slot
        else:
            lslot = slot - 1
        sib_slot = lslot + 1 if lslot == slot else lslot
        bounds_lo = pnode.keys[lslot - 1] if lslot else pnode.low
        bounds_hi = pnode.keys[lslot + 1] if lslot + 1 < len(pnode.keys) else pnode.high
        sib_ref = pnode.vals[sib_slot]
        if parent.ver != vp:
            return RETRY
        if self.table.is_shared(bounds_lo, bounds_hi):
            return MergeResult.NONE
        cache = self.cache
        if sib_ref & SWZ:
            sf = cache.frames[sib_ref & IDX_MASK]
        else:
            r = cache.resolve(sib_ref, parent, vp, sib_slot, ctx)
            if r is None:
                r = cache.fetch(sib_ref, False, parent, vp, sib_slot, ctx, force=True)
            if r is RETRY or type(r) is Transient:
                if type(r) is Transient:
                    cache.release_transient(r)
                return RETRY
            sf, vp = r
        sv = sf.ver
        snode = sf.node
        if sv & 1 or snode is None or snode.level != node.level:
            return RETRY
        if node.level == self.M and addr_server(snode.addr) != addr_server(node.addr):
            # moving children between subtree roots would split a subtree across servers
            return MergeResult.NONE
        if lslot == slot:
            lf, lv, rf_, rv = cur, vc, sf, sv
        else:
            lf, lv, rf_, rv = sf, sv, cur, vc
        pshared = self.table.is_shared(pnode.low, pnode.high)
        expected = None
        if pshared:
            expected = self._lock_shared(parent, vp)
            if expected is RETRY:
                return RETRY
            if expected is None:
                self.refresh_from_root(key, ctx)
                return RETRY
        locked: list[Frame] = []
        ok = parent.try_lock(vp)
        if ok:
            locked.append(parent)
            ok = lf.try_lock(lv)
            if ok:
                locked.append(lf)
                ok = rf_.try_lock(rv)
                if ok:
                    locked.append(rf_)
        if ok:
            lnode, rnode = lf.node, rf_.node
            ok = (pnode.vals[lslot] == SWZ | lf.idx and pnode.vals[lslot + 1] == SWZ | rf_.idx
                  and lnode.high == rnode.low)
        if not ok:
            for f in reversed(locked):
                f.unlock_unchanged()
            if expected is not None:
                self.fabric.write_word(pnode.addr, expected)
            return RETRY
        res = merge_or_rebalance(lnode, rnode, pnode, lslot, self._cap, self._min_fill)
        frames = cache.frames
        if res == MergeResult.NONE:
            for f in reversed(locked):
                f.unlock_unchanged()
            if expected is not None:
                self.fabric.write_word(pnode.addr, expected)
            return res
        if lnode.level:
            for holder, n in ((lf, lnode), (rf_, rnode)):
                for v in n.vals:
                    if v & SWZ:
                        frames[v & IDX_MASK].parent = holder
        lf.dirty = True
        if res == MergeResult.MERGED:
            # leave a dead image behind so stale readers fail their fence check
            self.fabric.write(rnode.addr, self.layout.encode(rnode))
            cache.free_frame(rf_, ctx)
            self.merges += 1
        else:
            rf_.dirty = True
        if expected is not None:
            self._publish_shared(pnode, expected)
        else:
            parent.dirty = True
        underfull_parent = len(pnode.keys) < self._min_fill
        for f in reversed(locked):
            f.unlock()
        if res == MergeResult.MERGED and (underfull_parent or not pnode.keys):
            self._rebalance(key, level + 1, ctx)
        return res

    def _collapse_root(self, cur: Frame, vc: int, key: int, ctx: ThreadCtx):
        """Replace a root that has a single child by that child."""
        cache, fabric = self.cache, self.fabric
        node = cur.node
        if node is None or node.addr != self.root_addr or node.keys or node.level == 0:
            return MergeResult.NONE
        child_ref = node.vals[0]
        if not child_ref & SWZ:
            return MergeResult.NONE
        child = cache.frames[child_ref & IDX_MASK]
        cv = child.ver
        if cv & 1 or not child.pin_if(cv):
            return RETRY
        expected = node.version
        addr = node.addr
        if expected & 1 or fabric.cas(addr, expected, expected | 1) != expected:
            child.unpin()
            self.refresh_from_root(key, ctx)
            return RETRY
        if not cur.try_lock(vc):
            child.unpin()
            fabric.write_word(addr, expected)
            return RETRY
        child_node = child.node
        # the child becomes the root: make its remote copy current first
        if child.dirty:
            child.lock()
            cache.write_back(child, ctx)
            child.unlock()
        if fabric.cas(self.root_holder, addr, child_node.addr) != addr:
            raise CoherenceError("root holder changed under a locked root")
        node.keys, node.vals = [], []
        node.low = node.high = KEY_INF
        node.version = expected | 1
        fabric.write(addr + 8, bytes(self.layout.encode(node)[8:]))
        fabric.write_word(addr, expected + 2)
        node.version = expected + 2
        child.parent = None
        with self._root_lock:
            self.root_addr = child_node.addr
            self._root_frame = child
            cur.unpin()
        cache.free_frame(cur, ctx)
        cur.unlock()
        return MergeResult.MERGED

    # -- repartition hooks ---------------------------------------------
    def install_table(self, table: PartitionTable) -> None:
        self.table = table

    def nearest_separator(self, key: int) -> int:
        """Closest range edge of the lowest inner node covering ``key``."""
        ctx = self.cache.ctx()
        saved = ctx.allow_offload
        ctx.allow_offload = False
        try:
            node = self._retry(ctx, self._level1_node, key)
        finally:
            ctx.allow_offload = saved
        return closest_edge(node, key)

    def _level1_node(self, ctx: ThreadCtx, key: int):
        r = self._descend(key, ctx, SCAN, stop_level=1)
        if r is RETRY:
            return RETRY
        cur, vc, node, parent, vp, _, t = r
        snap = node.copy()
        if cur.ver != vc:
            return RETRY
        return snap

    def handoff(self, old: PartitionTable, new: PartitionTable) -> tuple[int, int]:
        """Adjust the cache for a new partition table (gates are closed).

        Nodes that leave this server's range are flushed and dropped, nodes
        that become shared are flushed and kept, and shared nodes that become
        private are re-read.  Returns (pages written, frames dropped).
        """
        cache = self.cache
        ctx = cache.ctx()
        me = self.id
        flushed = dropped = 0
        victims: list[Frame] = []
        refresh: list[Frame] = []
        for f in cache.frames:
            if f.state not in (HOT, COOLING) or f.node is None:
                continue
            n = f.node
            before = old.classify(me, n.low, n.high)
            after = new.classify(me, n.low, n.high)
            if after == OWN and before == OWN:
                continue
            if after != OWN and before == OWN and f.dirty:
                f.lock()
                cache.write_back(f, ctx)
                f.unlock()
                flushed += 1
            if after == FOREIGN:
                victims.append(f)
            elif after == OWN and before == SHARED:
                refresh.append(f)
        victims.sort(key=lambda f: f.node.level)
        for f in victims:
            if f is self._root_frame:
                self._root_frame = None
                f.unpin()
            f.lock()
            cache.drop_frame_quiescent(f, ctx)
            f.unlock()
            dropped += 1
        for f in sorted(refresh, key=lambda f: -f.node.level):
            if f.state != HOT:
                continue
            fresh = cache.read_node(f.node.addr, True, ctx)
            while fresh is None:
                fresh = cache.read_node(f.node.addr, True, ctx)
            self._refresh_cached(f.node.addr, fresh, ctx)
        cache.return_free(ctx)
        return flushed, dropped


def closest_edge(node: Node, key: int) -> int:
    cands = [c for c in [node.low, *node.keys, node.high] if 0 < c < KEY_INF]
    if not cands:
        raise ValueError("tree too small to place a partition boundary")
    return min(cands, key=lambda c: (abs(c - key), c))
