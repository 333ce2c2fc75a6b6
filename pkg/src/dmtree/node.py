"""B+-tree node layout, in-node primitives, placement and bulk loading.

Wire layout of a node (little endian, fixed ``node_size`` bytes)::

    offset  size  field
    0       8     version_lock   bit 0 = locked, bits 1..63 = version counter
    8       4     level          0 = leaf
    12      4     count          number of keys
    16      8     low_fence      inclusive
    24      8     high_fence     exclusive, KEY_INF means +infinity
    32      8     self_addr      unswizzled address word of this node
    40      8*C   keys           C = capacity = (node_size - 48) // 16
    40+8C   ...   values (leaf, count entries) or children (inner, count+1 entries)

With the default 1024-byte node, C = 61 and an inner node's 62 children end
exactly at byte 1024.  Compute caches and memory-side executors both use this
codec, so it must stay bit-exact.
"""
from __future__ import annotations

import enum
import struct
import threading
from bisect import bisect_left, bisect_right
from dataclasses import dataclass, field

import numpy as np

from .fabric import SWIZZLED_BIT, Fabric, addr_server

KEY_INF = (1 << 64) - 1
MAX_KEY = KEY_INF - 1
HEADER = struct.Struct("<QIIQQQ")
HEADER_SIZE = HEADER.size  # 40
LOCK_BIT = 1

BULK_FILL = 0.80
UNDERFLOW_FRACTION = 0.25


class FenceViolation(Exception):
    """The key is outside the node's [low, high) fence interval."""


class OpResult(str, enum.Enum):
    INSERTED = "inserted"
    UPDATED = "updated"
    FULL = "full"
    REMOVED = "removed"
    NOT_FOUND = "not-found"


class MergeResult(str, enum.Enum):
    MERGED = "merged"
    BORROWED = "borrowed"
    NONE = "none"


def capacity_for(node_size: int) -> int:
    return (node_size - HEADER_SIZE - 8) // 16


class Node:
    """Decoded node.  ``vals`` holds values for leaves and child refs for inner nodes."""

    __slots__ = ("level", "low", "high", "addr", "version", "keys", "vals")

    def __init__(self, level: int, low: int, high: int, addr: int = 0, version: int = 0,
                 keys: list | None = None, vals: list | None = None) -> None:
        self.level = level
        self.low = low
        self.high = high
        self.addr = addr
        self.version = version
        self.keys = keys if keys is not None else []
        self.vals = vals if vals is not None else []

    @property
    def is_leaf(self) -> bool:
        return self.level == 0

    @property
    def count(self) -> int:
        return len(self.keys)

    def covers(self, key: int) -> bool:
        return self.low <= key < self.high

    def copy(self) -> "Node":
        return Node(self.level, self.low, self.high, self.addr, self.version,
                    list(self.keys), list(self.vals))

    def __repr__(self) -> str:
        kind = "Leaf" if self.level == 0 else f"Inner(L{self.level})"
        return f"{kind}[{self.low},{self.high}) @{self.addr:#x} v{self.version} keys={self.keys}"


class NodeLayout:
    """Encoder/decoder for one node size."""

    def __init__(self, node_size: int = 1024) -> None:
        cap = capacity_for(node_size)
        if cap < 3:
            raise ValueError(f"node_size {node_size} too small")
        self.node_size = node_size
        self.capacity = cap
        self.keys_off = HEADER_SIZE
        self.vals_off = HEADER_SIZE + 8 * cap
        self.min_fill = max(1, int(cap * UNDERFLOW_FRACTION))
        self._structs: dict[int, struct.Struct] = {}
        self._lock = threading.Lock()

    def _s(self, n: int) -> struct.Struct:
        s = self._structs.get(n)
        if s is None:
            s = struct.Struct(f"<{n}Q")
            self._structs[n] = s
        return s

    def val_offset(self, index: int) -> int:
        return self.vals_off + 8 * index

    def key_offset(self, index: int) -> int:
        return self.keys_off + 8 * index

    def encode(self, node: Node, vals: list | None = None) -> bytearray:
        """Serialize ``node``; ``vals`` overrides the child/value array (unswizzled copy)."""
        keys = node.keys
        if vals is None:
            vals = node.vals
        n = len(keys)
        if n > self.capacity:
            raise ValueError("node over capacity")
        buf = bytearray(self.node_size)
        HEADER.pack_into(buf, 0, node.version, node.level, n, node.low, node.high, node.addr)
        if n:
            self._s(n).pack_into(buf, self.keys_off, *keys)
        if vals:
            self._s(len(vals)).pack_into(buf, self.vals_off, *vals)
        return buf

    def decode(self, buf) -> Node:
        version, level, n, low, high, addr = HEADER.unpack_from(buf, 0)
        if n > self.capacity:
            # torn or garbage image; return something the fence check rejects
            return Node(level, 1, 0, addr, version)
        keys = list(self._s(n).unpack_from(buf, self.keys_off)) if n else []
        nv = n if level == 0 else n + 1
        vals = list(self._s(nv).unpack_from(buf, self.vals_off)) if nv else []
        return Node(level, low, high, addr, version, keys, vals)


def read_version(buf) -> int:
    return struct.unpack_from("<Q", buf, 0)[0]


# -- in-node primitives ---------------------------------------------------

def child_index(node: Node, key: int) -> int:
    # a key equal to a separator belongs to the right child
    return bisect_right(node.keys, key)


def node_search(node: Node, key: int):
    """Inner node: the child ref covering ``key``.  Leaf: the value or None."""
    if not node.low <= key < node.high:
        raise FenceViolation(f"key {key} outside [{node.low}, {node.high})")
    keys = node.keys
    if node.level:
        return node.vals[bisect_right(keys, key)]
    i = bisect_left(keys, key)
    if i < len(keys) and keys[i] == key:
        return node.vals[i]
    return None


def leaf_get(node: Node, key: int):
    keys = node.keys
    i = bisect_left(keys, key)
    if i < len(keys) and keys[i] == key:
        return node.vals[i]
    return None


def node_insert(node: Node, key: int, value: int, capacity: int) -> OpResult:
    keys = node.keys
    i = bisect_left(keys, key)
    if i < len(keys) and keys[i] == key:
        node.vals[i] = value
        return OpResult.UPDATED
    if len(keys) >= capacity:
        return OpResult.FULL
    node.vals.insert(i, value)
    keys.insert(i, key)
    return OpResult.INSERTED


def node_remove(node: Node, key: int) -> OpResult:
    keys = node.keys
    i = bisect_left(keys, key)
    if i < len(keys) and keys[i] == key:
        del keys[i]
        del node.vals[i]
        return OpResult.REMOVED
    return OpResult.NOT_FOUND


def split_node(node: Node, right_addr: int) -> tuple[Node, Node, int]:
    """Split at the median.  ``node`` becomes the left half in place.

    Leaves keep ceil(k/2) keys on the left and the separator is the first
    right key.  Inner nodes push the middle key up as the separator.
    """
    keys, vals = node.keys, node.vals
    n = len(keys)
    if n < 2:
        raise ValueError("cannot split a node with fewer than two keys")
    mid = (n + 1) // 2
    if node.level == 0:
        sep = keys[mid]
        rkeys, rvals = keys[mid:], vals[mid:]
        lkeys, lvals = keys[:mid], vals[:mid]
    else:
        mid = n // 2
        sep = keys[mid]
        rkeys, rvals = keys[mid + 1:], vals[mid + 1:]
        lkeys, lvals = keys[:mid], vals[:mid + 1]
    node.version += 2
    right = Node(node.level, sep, node.high, right_addr, node.version, rkeys, rvals)
    node.high = sep
    node.keys = lkeys
    node.vals = lvals
    return node, right, sep


def merge_or_rebalance(left: Node, right: Node, parent: Node, slot: int, capacity: int,
                       min_fill: int | None = None, fill: float = BULK_FILL) -> MergeResult:
    """Fix an underfull ``left`` or ``right``; they are parent children ``slot`` and ``slot+1``.

    Merges into ``left`` when one side is empty or the combined entries fit
    within the fill factor; otherwise moves entries across to balance them.
    After a merge ``right`` is dead: its fences collapse to an empty interval.
    """
    if min_fill is None:
        min_fill = max(1, int(capacity * UNDERFLOW_FRACTION))
    nl, nr = len(left.keys), len(right.keys)
    if nl >= min_fill and nr >= min_fill:
        return MergeResult.NONE
    sep = parent.keys[slot]
    leaf = left.level == 0
    combined = nl + nr if leaf else nl + nr + 1
    limit = max(int(capacity * fill), min_fill)
    if combined <= capacity and (nl == 0 or nr == 0 or combined <= limit):
        if leaf:
            left.keys.extend(right.keys)
        else:
            left.keys.append(sep)
            left.keys.extend(right.keys)
        left.vals.extend(right.vals)
        left.high = right.high
        del parent.keys[slot]
        del parent.vals[slot + 1]
        right.keys, right.vals = [], []
        right.low = right.high
        left.version += 2
        right.version += 2
        return MergeResult.MERGED
    if leaf:
        allk = left.keys + right.keys
        allv = left.vals + right.vals
        half = (len(allk) + 1) // 2
        left.keys, left.vals = allk[:half], allv[:half]
        right.keys, right.vals = allk[half:], allv[half:]
        new_sep = right.keys[0]
    else:
        allk = left.keys + [sep] + right.keys
        allv = left.vals + right.vals
        half = len(allk) // 2
        new_sep = allk[half]
        left.keys, left.vals = allk[:half], allv[:half + 1]
        right.keys, right.vals = allk[half + 1:], allv[half + 1:]
    parent.keys[slot] = new_sep
    left.high = new_sep
    right.low = new_sep
    left.version += 2
    right.version += 2
    return MergeResult.BORROWED


# -- placement ---------------------------------------------------------

@dataclass
class PlacementConfig:
    M: int = 3
    node_size: int = 1024

    def validate(self) -> None:
        if self.M < 0:
            raise ValueError("M must be non-negative")
        if capacity_for(self.node_size) < 3:
            raise ValueError(f"node_size {self.node_size} too small")


class Placement:
    """Chooses memory servers for new nodes.

    Level-M subtree roots and nodes above M are spread round-robin, each with
    its own cursor.  Everything at or below M follows its subtree.
    """

    def __init__(self, config: PlacementConfig, num_servers: int) -> None:
        config.validate()
        self.config = config
        self.M = config.M
        self.num_servers = num_servers
        self._subtree_rr = 0
        self._upper_rr = 0
        self._lock = threading.Lock()

    def next_subtree_server(self) -> int:
        with self._lock:
            s = self._subtree_rr % self.num_servers
            self._subtree_rr += 1
        return s

    def next_upper_server(self) -> int:
        with self._lock:
            s = self._upper_rr % self.num_servers
            self._upper_rr += 1
        return s

    def server_for_split(self, level: int, node_addr: int) -> int:
        """Server for the right half of a split node."""
        if level <= self.M:
            return addr_server(node_addr)
        return self.next_upper_server()

    def server_for_new_root(self, level: int, old_root_addr: int) -> int:
        if level <= self.M:
            return addr_server(old_root_addr)
        return self.next_upper_server()


# -- bulk load ---------------------------------------------------------

@dataclass
class BulkLoadResult:
    root: int
    height: int
    level_counts: list[int] = field(default_factory=list)

    @property
    def node_count(self) -> int:
        return sum(self.level_counts)


def _even_starts(n_items: int, per_group: int) -> np.ndarray:
    groups = max(1, -(-n_items // per_group))
    return (np.arange(groups, dtype=np.int64) * n_items) // groups


def bulk_load(keys, values, fabric: Fabric, placement: Placement,
              layout: NodeLayout | None = None, fill: float = BULK_FILL) -> BulkLoadResult:
    """Build a tree bottom-up from sorted unique keys and write it into the pool."""
    layout = layout or NodeLayout(placement.config.node_size)
    keys = np.asarray(keys, dtype=np.uint64)
    values = np.asarray(values, dtype=np.uint64)
    if keys.shape != values.shape or keys.ndim != 1:
        raise ValueError("keys and values must be 1-d arrays of equal length")
    n = len(keys)
    if n > 1 and not bool(np.all(keys[1:] > keys[:-1])):
        raise ValueError("bulk_load input must be sorted with unique keys")
    if n and int(keys[-1]) >= KEY_INF:
        raise ValueError("key 2^64-1 is reserved as +infinity")
    cap = layout.capacity
    per_leaf = max(1, int(cap * fill))
    per_inner = max(2, int(cap * fill) + 1)

    # levels[l] = (starts into level l-1 items, low fence of every node)
    leaf_starts = _even_starts(n, per_leaf) if n else np.zeros(1, dtype=np.int64)
    leaf_lows = np.empty(len(leaf_starts), dtype=np.uint64)
    leaf_lows[0] = 0
    if len(leaf_starts) > 1:
        leaf_lows[1:] = keys[leaf_starts[1:]]
    levels = [(leaf_starts, leaf_lows)]
    while len(levels[-1][0]) > 1:
        below_lows = levels[-1][1]
        starts = _even_starts(len(below_lows), per_inner)
        levels.append((starts, below_lows[starts]))
    height = len(levels)

    # placement, top-down
    M = placement.M
    servers: list[np.ndarray] = [None] * height  # type: ignore[list-item]
    for lvl in range(height - 1, -1, -1):
        count = len(levels[lvl][0])
        if lvl > M:
            srv = np.array([placement.next_upper_server() for _ in range(count)], dtype=np.int64)
        elif lvl == M or lvl == height - 1:
            srv = np.array([placement.next_subtree_server() for _ in range(count)], dtype=np.int64)
        else:
            parent_starts = levels[lvl + 1][0]
            parent_of = np.searchsorted(parent_starts, np.arange(count), side="right") - 1
            srv = servers[lvl + 1][parent_of]
        servers[lvl] = srv

    addrs: list[list[int]] = [None] * height  # type: ignore[list-item]
    size = layout.node_size
    for lvl in range(height - 1, -1, -1):
        addrs[lvl] = [fabric.allocate(int(s), size) for s in servers[lvl]]

    for lvl in range(height):
        starts, lows = levels[lvl]
        count = len(starts)
        ends = np.append(starts[1:], n if lvl == 0 else len(levels[lvl - 1][0]))
        my_addrs = addrs[lvl]
        for i in range(count):
            s, e = int(starts[i]), int(ends[i])
            low = int(lows[i])
            high = int(lows[i + 1]) if i + 1 < count else KEY_INF
            buf = bytearray(size)
            if lvl == 0:
                nk = e - s
                HEADER.pack_into(buf, 0, 0, 0, nk, low, high, my_addrs[i])
                if nk:
                    buf[layout.keys_off:layout.keys_off + 8 * nk] = keys[s:e].astype("<u8").tobytes()
                    buf[layout.vals_off:layout.vals_off + 8 * nk] = values[s:e].astype("<u8").tobytes()
            else:
                child_lows = levels[lvl - 1][1]
                nk = e - s - 1
                HEADER.pack_into(buf, 0, 0, lvl, nk, low, high, my_addrs[i])
                if nk:
                    buf[layout.keys_off:layout.keys_off + 8 * nk] = child_lows[s + 1:e].astype("<u8").tobytes()
                kids = addrs[lvl - 1][s:e]
                struct.pack_into(f"<{len(kids)}Q", buf, layout.vals_off, *kids)
            fabric.poke(my_addrs[i], buf)
    return BulkLoadResult(addrs[height - 1][0], height, [len(levels[l][0]) for l in range(height)])


# -- structural validation ---------------------------------------------

@dataclass
class TreeReport:
    height: int = 0
    level_counts: dict = field(default_factory=dict)
    errors: list = field(default_factory=list)
    items: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.errors


def walk_tree(fabric: Fabric, root: int, layout: NodeLayout, M: int,
              collect: bool = True, max_errors: int = 20) -> TreeReport:
    """Walk the remote tree (uncounted reads) and check every structural invariant.

    Checks fence containment, key order, child fences against parent
    separators, uniform leaf depth, no swizzled pointers, unlocked versions and
    the subtree placement rule.
    """
    rep = TreeReport()
    errs = rep.errors

    def err(msg: str) -> None:
        if len(errs) < max_errors:
            errs.append(msg)

    root_node = layout.decode(fabric.peek(root, layout.node_size))
    rep.height = root_node.level + 1
    # stack entries: addr, expected level, low, high, group server (or -1)
    stack = [(root, root_node.level, 0, KEY_INF, -1)]
    items = rep.items
    counts: dict[int, int] = {}
    while stack:
        addr, level, low, high, group = stack.pop()
        if addr & SWIZZLED_BIT:
            err(f"swizzled pointer {addr:#x} stored in the pool")
            continue
        node = layout.decode(fabric.peek(addr, layout.node_size))
        counts[level] = counts.get(level, 0) + 1
        where = f"node {addr:#x}"
        if node.addr != addr:
            err(f"{where}: self_addr {node.addr:#x} mismatch")
        if node.level != level:
            err(f"{where}: level {node.level}, expected {level}")
            continue
        if node.low != low or node.high != high:
            err(f"{where}: fences [{node.low},{node.high}) expected [{low},{high})")
        if node.version & LOCK_BIT:
            err(f"{where}: left locked")
        ks = node.keys
        if len(ks) > layout.capacity:
            err(f"{where}: over capacity")
        for a, b in zip(ks, ks[1:]):
            if a >= b:
                err(f"{where}: keys not strictly ascending")
                break
        if ks and not (low <= ks[0] and ks[-1] < high):
            err(f"{where}: key outside fences")
        srv = addr_server(addr)
        if level <= M:
            if group < 0:
                group = srv
            elif srv != group:
                err(f"{where}: on server {srv}, subtree lives on {group}")
        if level == 0:
            if collect:
                items.update(zip(ks, node.vals))
            continue
        if len(node.vals) != len(ks) + 1:
            err(f"{where}: child count mismatch")
            continue
        bounds = [low] + ks + [high]
        for i, child in enumerate(node.vals):
            stack.append((child, level - 1, bounds[i], bounds[i + 1], group if level <= M else -1))
    rep.level_counts = counts
    return rep
