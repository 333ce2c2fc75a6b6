"""Compute-side page cache.

Frames hold decoded nodes.  A parent's child slot either stores the global
address of the child or, once the child is cached, ``SWIZZLED_BIT | frame
index`` so traversal skips the mapping table.  Eviction happens in two steps.
Randomly sampled frames delegate the cooling command down to a descendant that
has no swizzled children.  That descendant is unswizzled, written back if
dirty and parked in the cooling map.  Frames in the cooling map get a second
chance when touched, otherwise the oldest entry of a random bucket is evicted.
"""
from __future__ import annotations

import math
import random
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass

from .fabric import SWIZZLED_BIT, WORD_MASK, Fabric
from .node import LOCK_BIT, Node, NodeLayout, read_version

FREE, HOT, COOLING, IO = 0, 1, 2, 3
STATE_NAMES = {FREE: "free", HOT: "hot", COOLING: "cooling", IO: "io"}
IDX_MASK = SWIZZLED_BIT - 1


class _Sentinel:
    __slots__ = ("name",)

    def __init__(self, name: str) -> None:
        self.name = name

    def __repr__(self) -> str:
        return self.name


RETRY = _Sentinel("RETRY")
IO_MARKER = _Sentinel("IO_MARKER")


class CacheTooSmall(RuntimeError):
    pass


class CoherenceError(RuntimeError):
    pass


def replacement_frequency(t_hit: float, t_miss: float, miss_ratio: float, threads: int) -> float:
    """Cache replacements per second sustained by ``threads`` busy threads.

    Each miss costs ``t_miss`` and is accompanied on average by
    ``(1 - miss_ratio) / miss_ratio`` hits costing ``t_hit`` each.
    """
    if not 0 < miss_ratio <= 1:
        raise ValueError("miss ratio must be in (0, 1]")
    if t_hit <= 0 or t_miss <= 0 or threads <= 0:
        raise ValueError("latencies and thread count must be positive")
    return threads * 1.0 / (t_miss + (1 - miss_ratio) / miss_ratio * t_hit)


@dataclass
class CacheConfig:
    capacity_bytes: int = 8 << 20
    node_size: int = 1024
    cooling_map_capacity_fraction: float = 0.10
    bucket_slots: int = 6
    sample_count: int = 2
    leaf_admission_prob: float = 0.10
    inner_admission_prob: float = 1.0
    rng_seed: int = 0
    cooling_structure: str = "map"  # or "single-queue"
    free_batch: int = 4

    @property
    def frame_count(self) -> int:
        return self.capacity_bytes // self.node_size

    @property
    def bucket_count(self) -> int:
        return max(1, math.ceil(self.cooling_map_capacity_fraction * self.frame_count / self.bucket_slots))

    def validate(self) -> None:
        for name in ("cooling_map_capacity_fraction", "leaf_admission_prob", "inner_admission_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be within [0, 1]")
        if self.inner_admission_prob != 1.0:
            raise ValueError("inner_admission_prob must be 1.0: admission needs a cached parent")
        if self.frame_count < 2:
            raise ValueError("cache must hold at least two frames")
        if self.bucket_slots < 1 or self.sample_count < 1 or self.free_batch < 1:
            raise ValueError("bucket_slots, sample_count and free_batch must be positive")
        if self.cooling_structure not in ("map", "single-queue"):
            raise ValueError("cooling_structure must be 'map' or 'single-queue'")


class Frame:
    """A cache slot.  ``ver`` is an optimistic version lock (odd = locked)."""

    __slots__ = ("idx", "ver", "mutex", "state", "dirty", "node", "parent", "pin")

    def __init__(self, idx: int) -> None:
        self.idx = idx
        self.ver = 0
        self.mutex = threading.Lock()
        self.state = FREE
        self.dirty = False
        self.node: Node | None = None
        self.parent: Frame | None = None
        self.pin = 0

    def try_lock(self, version: int) -> bool:
        """Upgrade an optimistic read at ``version`` to an exclusive lock."""
        if version & LOCK_BIT or self.ver != version:
            return False
        with self.mutex:
            if self.ver != version:
                return False
            self.ver = version + 1
            return True

    def try_lock_now(self) -> bool:
        with self.mutex:
            v = self.ver
            if v & LOCK_BIT:
                return False
            self.ver = v + 1
            return True

    def lock(self) -> None:
        spins = 0
        while not self.try_lock_now():
            spins += 1
            time.sleep(0 if spins < 100 else 1e-5)

    def unlock(self) -> None:
        self.ver += 1

    def unlock_unchanged(self) -> None:
        # nothing was modified, so readers that sampled the old version stay valid
        self.ver -= 1

    def pin_if(self, version: int) -> bool:
        with self.mutex:
            if self.ver != version or self.state != HOT:
                return False
            self.pin += 1
            return True

    def unpin(self) -> None:
        with self.mutex:
            self.pin -= 1

    def __repr__(self) -> str:
        return f"Frame#{self.idx}({STATE_NAMES[self.state]}, v{self.ver}, {self.node!r})"


class Transient:
    """A fetched node that was not admitted.  Its IO marker stays installed until released."""

    __slots__ = ("node", "addr")

    def __init__(self, node: Node, addr: int) -> None:
        self.node = node
        self.addr = addr


class MappingTable:
    """Node address -> frame or IO marker, striped for concurrent writers."""

    STRIPES = 64

    def __init__(self) -> None:
        self._maps = [dict() for _ in range(self.STRIPES)]
        self._locks = [threading.Lock() for _ in range(self.STRIPES)]

    def _stripe(self, addr: int) -> int:
        return (addr >> 10) % self.STRIPES

    def get(self, addr: int):
        return self._maps[(addr >> 10) % self.STRIPES].get(addr)

    def install_io(self, addr: int) -> bool:
        s = self._stripe(addr)
        with self._locks[s]:
            m = self._maps[s]
            if addr in m:
                return False
            m[addr] = IO_MARKER
            return True

    def set(self, addr: int, value) -> None:
        s = self._stripe(addr)
        with self._locks[s]:
            self._maps[s][addr] = value

    def remove(self, addr: int, expected) -> bool:
        s = self._stripe(addr)
        with self._locks[s]:
            m = self._maps[s]
            if m.get(addr) is expected:
                del m[addr]
                return True
            return False

    def items(self) -> list:
        out = []
        for s in range(self.STRIPES):
            with self._locks[s]:
                out.extend(self._maps[s].items())
        return out

    def __len__(self) -> int:
        return sum(len(m) for m in self._maps)


def _bucket_hash(addr: int, n: int) -> int:
    return ((((addr >> 6) * 0x9E3779B97F4A7C15) & WORD_MASK) >> 24) % n


class CoolingMap:
    """Buckets of small FIFO arrays, each with its own lock."""

    def __init__(self, buckets: int, slots: int) -> None:
        self.n = buckets
        self.slots = slots
        self._buckets: list[list[Frame]] = [[] for _ in range(buckets)]
        self._locks = [threading.Lock() for _ in range(buckets)]

    @property
    def capacity(self) -> int:
        return self.n * self.slots

    def bucket_of(self, addr: int) -> int:
        return _bucket_hash(addr, self.n)

    def push(self, frame: Frame, addr: int, evict) -> None:
        b = _bucket_hash(addr, self.n)
        with self._locks[b]:
            lst = self._buckets[b]
            if len(lst) >= self.slots:
                evict(lst.pop(0))
            lst.append(frame)

    def remove(self, frame: Frame, addr: int) -> bool:
        """Take ``frame`` out if it is still cooling the node at ``addr``."""
        b = _bucket_hash(addr, self.n)
        with self._locks[b]:
            lst = self._buckets[b]
            # the frame may have been evicted and reused for another node in this bucket
            node = frame.node
            if node is None or node.addr != addr:
                return False
            try:
                lst.remove(frame)
            except ValueError:
                return False
            return True

    def pop_oldest(self, rng: random.Random, evict) -> Frame | None:
        n = self.n
        start = rng.randrange(n)
        buckets = self._buckets
        for k in range(n):
            b = (start + k) % n
            if not buckets[b]:
                continue
            with self._locks[b]:
                lst = buckets[b]
                if lst:
                    head = lst.pop(0)
                    evict(head)
                    return head
        return None

    def members(self) -> list[Frame]:
        out = []
        for b in range(self.n):
            with self._locks[b]:
                out.extend(self._buckets[b])
        return out

    def bucket_contents(self, b: int) -> list[Frame]:
        with self._locks[b]:
            return list(self._buckets[b])

    def __len__(self) -> int:
        return sum(len(lst) for lst in self._buckets)


class CoolingQueue:
    """Single global FIFO behind one lock, used as the ablation baseline."""

    def __init__(self, capacity: int) -> None:
        self._cap = max(1, capacity)
        self._q: OrderedDict[int, Frame] = OrderedDict()
        self._lock = threading.Lock()

    @property
    def capacity(self) -> int:
        return self._cap

    def push(self, frame: Frame, addr: int, evict) -> None:
        with self._lock:
            if len(self._q) >= self._cap:
                evict(self._q.popitem(last=False)[1])
            self._q[frame.idx] = frame

    def remove(self, frame: Frame, addr: int) -> bool:
        with self._lock:
            node = frame.node
            if node is None or node.addr != addr:
                return False
            return self._q.pop(frame.idx, None) is not None

    def pop_oldest(self, rng: random.Random, evict) -> Frame | None:
        with self._lock:
            if not self._q:
                return None
            head = self._q.popitem(last=False)[1]
            evict(head)
            return head

    def members(self) -> list[Frame]:
        with self._lock:
            return list(self._q.values())

    def __len__(self) -> int:
        return len(self._q)


COUNTERS = ("hits", "misses", "probes", "admissions", "rejections", "coolings", "evictions",
            "writebacks", "second_chances", "io_waits", "restarts", "invalidations",
            "descents", "offloads", "offload_smo", "offload_fallbacks", "refreshes")


class ThreadCtx:
    """Per-thread state: RNG, free-frame set, cost model and counters."""

    __slots__ = ("tid", "rng", "free", "cost", "inflight", "force_admit", "allow_offload") + COUNTERS

    def __init__(self, tid: int, seed: int) -> None:
        self.tid = tid
        self.rng = random.Random(seed)
        self.free: list[Frame] = []
        self.cost = None
        self.inflight = False
        self.force_admit = False
        self.allow_offload = True
        for c in COUNTERS:
            setattr(self, c, 0)


class Cache:
    def __init__(self, config: CacheConfig, fabric: Fabric, layout: NodeLayout | None = None,
                 ctx_factory=None) -> None:
        config.validate()
        self.config = config
        self.fabric = fabric
        self.layout = layout or NodeLayout(config.node_size)
        if self.layout.node_size != config.node_size:
            raise ValueError("cache node_size differs from the node layout")
        n = config.frame_count
        self.frames = [Frame(i) for i in range(n)]
        self._global_free = list(reversed(self.frames))
        self._free_lock = threading.Lock()
        self.mapping = MappingTable()
        if config.cooling_structure == "map":
            self.cooling = CoolingMap(config.bucket_count, config.bucket_slots)
        else:
            self.cooling = CoolingQueue(config.bucket_count * config.bucket_slots)
        self._leaf_p = config.leaf_admission_prob
        self._tls = threading.local()
        self._ctxs: list[ThreadCtx] = []
        self._ctx_lock = threading.Lock()
        self._ctx_factory = ctx_factory

    # -- thread context -------------------------------------------------
    def ctx(self) -> ThreadCtx:
        try:
            return self._tls.ctx
        except AttributeError:
            pass
        with self._ctx_lock:
            tid = len(self._ctxs)
            c = ThreadCtx(tid, self.config.rng_seed * 1_000_003 + tid)
            self._ctxs.append(c)
        if self._ctx_factory is not None:
            self._ctx_factory(c)
        self._tls.ctx = c
        return c

    @property
    def contexts(self) -> list[ThreadCtx]:
        return list(self._ctxs)

    def stats(self) -> dict:
        out = {c: 0 for c in COUNTERS}
        for ctx in list(self._ctxs):
            for c in COUNTERS:
                out[c] += getattr(ctx, c)
        looked = out["hits"] + out["misses"]
        out["hit_ratio"] = out["hits"] / looked if looked else 0.0
        return out

    # -- free frames ----------------------------------------------------
    def _take_global(self, ctx: ThreadCtx) -> bool:
        if not self._global_free:
            return False
        with self._free_lock:
            g = self._global_free
            k = min(self.config.free_batch, len(g))
            if not k:
                return False
            ctx.free.extend(g[-k:])
            del g[-k:]
        return True

    def get_free_frame(self, ctx: ThreadCtx) -> Frame:
        """A frame in state IO owned by the caller.  Evicts when needed."""
        free = ctx.free
        for attempt in range(200):
            if free:
                f = free.pop()
                f.state = IO
                return f
            if self._take_global(ctx):
                continue
            self.cool_sample(ctx)
            if not free:
                self.evict_one(ctx)
            if attempt > 20:
                time.sleep(0 if attempt < 100 else 1e-4)
        raise CacheTooSmall(
            f"cache too small: no frame could be freed ({len(self.frames)} frames)")

    def return_free(self, ctx: ThreadCtx) -> None:
        """Hand a thread's private free frames back to the shared pool."""
        if ctx.free:
            with self._free_lock:
                self._global_free.extend(ctx.free)
            ctx.free.clear()

    def release_frame(self, frame: Frame, ctx: ThreadCtx) -> None:
        """Return an unused IO frame from get_free_frame."""
        frame.node = None
        frame.parent = None
        frame.dirty = False
        frame.state = FREE
        ctx.free.append(frame)

    def _evict_frame(self, frame: Frame, ctx: ThreadCtx) -> None:
        # called with the frame's cooling bucket locked
        frame.lock()
        node = frame.node
        if frame.dirty:
            frame.unlock()
            raise CoherenceError(f"dirty frame in the cooling map: {frame!r}")
        if node is not None:
            self.mapping.remove(node.addr, frame)
        frame.node = None
        frame.parent = None
        frame.state = FREE
        frame.unlock()
        ctx.free.append(frame)
        ctx.evictions += 1

    def evict_one(self, ctx: ThreadCtx) -> Frame | None:
        return self.cooling.pop_oldest(ctx.rng, lambda h: self._evict_frame(h, ctx))

    # -- cooling --------------------------------------------------------
    def delegate_cooling(self, frame: Frame, rng: random.Random) -> Frame:
        frames = self.frames
        f = frame
        while True:
            node = f.node
            if node is None or node.level == 0:
                return f
            kids = [v for v in node.vals if v & SWIZZLED_BIT]
            if not kids:
                return f
            f = frames[rng.choice(kids) & IDX_MASK]

    def cool_sample(self, ctx: ThreadCtx) -> int:
        frames = self.frames
        n = len(frames)
        rng = ctx.rng
        cooled = 0
        for _ in range(self.config.sample_count):
            for _attempt in range(8):
                f = frames[rng.randrange(n)]
                if f.state != HOT or f.pin:
                    continue
                if self._cool(self.delegate_cooling(f, rng), ctx):
                    cooled += 1
                    break
        return cooled

    def _cool(self, target: Frame, ctx: ThreadCtx) -> bool:
        parent = target.parent
        if parent is not None and not parent.try_lock_now():
            return False
        if not target.try_lock_now():
            if parent is not None:
                parent.unlock_unchanged()
            return False
        done = False
        parent_changed = False
        try:
            node = target.node
            if (target.state != HOT or target.pin or node is None or target.parent is not parent):
                return False
            if node.level:
                for v in node.vals:
                    if v & SWIZZLED_BIT:
                        return False
            if parent is not None:
                pvals = parent.node.vals
                sw = SWIZZLED_BIT | target.idx
                try:
                    i = pvals.index(sw)
                except ValueError:
                    i = -1
                if i >= 0:
                    pvals[i] = node.addr
                    parent_changed = True
            if target.dirty:
                self.write_back(target, ctx)
            target.state = COOLING
            target.parent = None
            self.cooling.push(target, node.addr, lambda h: self._evict_frame(h, ctx))
            ctx.coolings += 1
            done = True
            return True
        finally:
            if done:
                target.unlock()
            else:
                target.unlock_unchanged()
            if parent is not None:
                if parent_changed:
                    parent.unlock()
                else:
                    parent.unlock_unchanged()

    def cool_subtree(self, frame: Frame, ctx: ThreadCtx, attempts: int = 100_000) -> bool:
        """Cool ``frame`` and all its cached descendants, bottom-up."""
        for i in range(attempts):
            if frame.state != HOT:
                return True
            if not self._cool(self.delegate_cooling(frame, ctx.rng), ctx) and i > 10:
                time.sleep(0)
        return False

    # -- write-back -----------------------------------------------------
    def unswizzled_vals(self, node: Node) -> list:
        if node.level == 0:
            return node.vals
        frames = self.frames
        return [frames[v & IDX_MASK].node.addr if v & SWIZZLED_BIT else v for v in node.vals]

    def write_back(self, frame: Frame, ctx: ThreadCtx | None = None) -> None:
        """Write a non-shared frame's node to its home (caller holds the frame lock)."""
        node = frame.node
        node.version += 2
        self.fabric.write(node.addr, self.layout.encode(node, self.unswizzled_vals(node)))
        frame.dirty = False
        if ctx is not None:
            ctx.writebacks += 1

    def flush_dirty(self, predicate=None, ctx: ThreadCtx | None = None) -> int:
        ctx = ctx or self.ctx()
        written = 0
        for f in self.frames:
            if not f.dirty or f.state not in (HOT, COOLING):
                continue
            f.lock()
            try:
                if f.dirty and f.node is not None and (predicate is None or predicate(f.node)):
                    self.write_back(f, ctx)
                    written += 1
            finally:
                f.unlock()
        return written

    # -- lookup / fetch -------------------------------------------------
    def resolve(self, ref: int, parent: Frame | None, vp: int, slot: int, ctx: ThreadCtx):
        """Find the frame for an unswizzled ref.

        Returns ``(frame, parent_version)`` on a hit (after re-swizzling it into
        ``parent``), None on a miss, or RETRY when the node is mid-admission or
        the parent changed.
        """
        ctx.probes += 1
        f = self.mapping.get(ref)
        if f is None:
            return None
        if f is IO_MARKER:
            ctx.io_waits += 1
            return RETRY
        node = f.node
        if node is None or node.addr != ref:
            return RETRY
        st = f.state
        if st == HOT:
            if parent is None:
                return f, vp
            return self._adopt(f, ref, parent, vp, slot)
        if st != COOLING:
            return RETRY
        if parent is None:
            if not self.cooling.remove(f, ref):
                return RETRY
            f.state = HOT
            f.parent = None
            ctx.second_chances += 1
            return f, vp
        if not parent.try_lock(vp):
            return RETRY
        pvals = parent.node.vals
        if slot >= len(pvals) or pvals[slot] != ref or not self.cooling.remove(f, ref):
            parent.unlock_unchanged()
            return RETRY
        f.state = HOT
        f.parent = parent
        pvals[slot] = SWIZZLED_BIT | f.idx
        parent.unlock()
        ctx.second_chances += 1
        return f, vp + 2

    def _adopt(self, f: Frame, ref: int, parent: Frame, vp: int, slot: int):
        if not parent.try_lock(vp):
            return RETRY
        pvals = parent.node.vals
        if slot >= len(pvals) or pvals[slot] != ref:
            parent.unlock_unchanged()
            return RETRY
        # lock the frame too: between the mapping probe and here it may have
        # been cooled, evicted and reused for another node
        if not f.try_lock_now():
            parent.unlock_unchanged()
            return RETRY
        node = f.node
        if f.state != HOT or node is None or node.addr != ref:
            f.unlock_unchanged()
            parent.unlock_unchanged()
            return RETRY
        sw = SWIZZLED_BIT | f.idx
        old = f.parent
        if old is not None and old is not parent:
            if not old.try_lock_now():
                f.unlock_unchanged()
                parent.unlock_unchanged()
                return RETRY
            changed = False
            onode = old.node
            if onode is not None:
                try:
                    i = onode.vals.index(sw)
                    onode.vals[i] = ref
                    changed = True
                except ValueError:
                    pass
            if changed:
                old.unlock()
            else:
                old.unlock_unchanged()
        pvals[slot] = sw
        f.parent = parent
        f.unlock_unchanged()
        parent.unlock()
        return f, vp + 2

    def read_node(self, addr: int, shared: bool, ctx: ThreadCtx) -> Node | None:
        """Fetch a node image; shared nodes use the version-validated protocol."""
        fabric = self.fabric
        if shared:
            v1 = fabric.read_word(addr)
            if v1 & LOCK_BIT:
                return None
            buf = fabric.read(addr, self.layout.node_size)
            v2 = fabric.read_word(addr)
            if v1 != v2 or read_version(buf) != v1:
                return None
            return self.layout.decode(buf)
        t0 = time.perf_counter()
        buf = fabric.read(addr, self.layout.node_size)
        if ctx.cost is not None:
            if ctx.cost.config.latency_samples == "wall":
                ctx.cost.record_fetch_latency(time.perf_counter() - t0)
            else:
                ctx.cost.record_fetch_latency(fabric.modeled_latency())
        return self.layout.decode(buf)

    def fetch(self, addr: int, shared: bool, parent: Frame | None, vp: int, slot: int,
              ctx: ThreadCtx, force: bool = False):
        """Read a missing node and run admission.

        Returns ``(frame, parent_version)``, a :class:`Transient` (IO marker
        still held, release with :meth:`release_transient`), or RETRY.
        """
        mapping = self.mapping
        if not mapping.install_io(addr):
            ctx.io_waits += 1
            return RETRY
        try:
            node = self.read_node(addr, shared, ctx)
        except BaseException:
            mapping.remove(addr, IO_MARKER)
            raise
        if node is None or node.addr != addr:
            mapping.remove(addr, IO_MARKER)
            return RETRY
        ctx.misses += 1
        if node.level == 0 and not force and ctx.rng.random() >= self._leaf_p:
            ctx.rejections += 1
            return Transient(node, addr)
        try:
            frame = self.get_free_frame(ctx)
        except BaseException:
            mapping.remove(addr, IO_MARKER)
            raise
        frame.node = node
        frame.dirty = False
        frame.parent = None
        if parent is not None:
            if not parent.try_lock(vp):
                self.release_frame(frame, ctx)
                mapping.remove(addr, IO_MARKER)
                return RETRY
            pvals = parent.node.vals
            if slot >= len(pvals) or pvals[slot] != addr:
                parent.unlock_unchanged()
                self.release_frame(frame, ctx)
                mapping.remove(addr, IO_MARKER)
                return RETRY
            frame.parent = parent
            frame.state = HOT
            mapping.set(addr, frame)
            pvals[slot] = SWIZZLED_BIT | frame.idx
            parent.unlock()
            vp += 2
        else:
            frame.state = HOT
            mapping.set(addr, frame)
        ctx.admissions += 1
        return frame, vp

    def release_transient(self, t: Transient) -> None:
        self.mapping.remove(t.addr, IO_MARKER)

    def install_node(self, node: Node, parent: Frame | None, ctx: ThreadCtx, dirty: bool) -> Frame:
        """Admit a node created locally (split halves, new roots).

        The caller holds ``parent``'s lock and places the swizzled ref itself.
        """
        frame = self.get_free_frame(ctx)
        frame.node = node
        frame.dirty = dirty
        frame.parent = parent
        frame.state = HOT
        self.mapping.set(node.addr, frame)
        return frame

    def free_frame(self, frame: Frame, ctx: ThreadCtx) -> None:
        """Drop a frame that is no longer reachable (caller holds its lock or owns it)."""
        node = frame.node
        if node is not None:
            self.mapping.remove(node.addr, frame)
        frame.node = None
        frame.parent = None
        frame.dirty = False
        frame.state = FREE
        ctx.free.append(frame)

    def invalidate(self, addr: int, ctx: ThreadCtx) -> bool:
        """Discard a cached copy of ``addr`` (made stale by a memory-side write)."""
        for _ in range(1000):
            f = self.mapping.get(addr)
            if f is None or f is IO_MARKER:
                return False
            node = f.node
            if node is None or node.addr != addr:
                time.sleep(0)
                continue
            if f.state == HOT:
                if f.dirty:
                    raise CoherenceError(f"offloaded write hit a dirty cached node {addr:#x}")
                self.cool_subtree(f, ctx)
                continue
            if f.state == COOLING:
                if not self.cooling.remove(f, addr):
                    continue
                f.lock()
                self.free_frame(f, ctx)
                f.unlock()
                ctx.invalidations += 1
                return True
            time.sleep(0)
        return False

    def refresh_in_place(self, frame: Frame, fresh: Node) -> list[Frame]:
        """Replace a HOT frame's node with a fresher image (caller holds its lock).

        Cached children that still belong to the node stay swizzled.  Returns
        the cached children that moved elsewhere; they are detached and the
        caller should cool them.
        """
        old = frame.node
        vanished: list[Frame] = []
        if old is not None and old.level and fresh.level == old.level:
            frames = self.frames
            slot_of = {a: i for i, a in enumerate(fresh.vals)}
            fvals = fresh.vals
            for v in old.vals:
                if v & SWIZZLED_BIT:
                    ch = frames[v & IDX_MASK]
                    j = slot_of.get(ch.node.addr)
                    if j is not None:
                        fvals[j] = v
                    else:
                        vanished.append(ch)
        elif old is not None and old.level:
            frames = self.frames
            vanished = [frames[v & IDX_MASK] for v in old.vals if v & SWIZZLED_BIT]
        frame.node = fresh
        frame.dirty = False
        for ch in vanished:
            ch.parent = None
        return vanished

    def drop_frame_quiescent(self, frame: Frame, ctx: ThreadCtx) -> None:
        """Remove a frame outright (no concurrent users).  Unswizzles it from its parent."""
        if frame.state == COOLING:
            self.cooling.remove(frame, frame.node.addr)
        parent = frame.parent
        if parent is not None and parent.node is not None:
            sw = SWIZZLED_BIT | frame.idx
            pvals = parent.node.vals
            try:
                pvals[pvals.index(sw)] = frame.node.addr
            except ValueError:
                pass
        self.free_frame(frame, ctx)

    # -- validation -----------------------------------------------------
    def check_invariants(self, root_frames=()) -> list[str]:
        """Exhaustive scan for the cache invariants; call only when quiescent."""
        errors: list[str] = []
        frames = self.frames
        counts = {s: 0 for s in STATE_NAMES}
        for f in frames:
            counts[f.state] += 1
        if sum(counts.values()) != len(frames):
            errors.append("frame accounting mismatch")
        if counts[IO]:
            errors.append(f"{counts[IO]} frames left in IO state")
        members = self.cooling.members()
        ids = {f.idx for f in members}
        if len(ids) != len(members):
            errors.append("frame listed twice in the cooling structure")
        if len(members) > self.cooling.capacity:
            errors.append("cooling structure over capacity")
        for f in members:
            if f.state != COOLING:
                errors.append(f"cooling entry {f!r} not in cooling state")
        for f in frames:
            if f.state == COOLING and f.idx not in ids:
                errors.append(f"cooling frame {f.idx} missing from the cooling structure")
            if f.dirty and f.state not in (HOT, COOLING):
                errors.append(f"dirty frame {f.idx} in state {STATE_NAMES[f.state]}")
            if f.state == COOLING and f.dirty:
                errors.append(f"cooling frame {f.idx} is dirty")
            if f.ver & LOCK_BIT:
                errors.append(f"frame {f.idx} left locked")
        mapped = set()
        for addr, v in self.mapping.items():
            if v is IO_MARKER:
                errors.append(f"IO marker left for {addr:#x}")
                continue
            if v.state not in (HOT, COOLING) or v.node is None or v.node.addr != addr:
                errors.append(f"mapping entry {addr:#x} -> {v!r} is stale")
            mapped.add(v.idx)
        roots = {f.idx for f in root_frames if f is not None}
        for f in frames:
            if f.state in (HOT, COOLING) and f.idx not in mapped:
                errors.append(f"cached frame {f.idx} not in the mapping table")
            if f.state != HOT or f.idx in roots:
                continue
            p = f.parent
            if p is None or p.state not in (HOT, COOLING) or p.node is None:
                errors.append(f"hot frame {f.idx} has no cached parent")
            elif (SWIZZLED_BIT | f.idx) not in p.node.vals:
                errors.append(f"hot frame {f.idx} not swizzled in its parent")
        return errors
