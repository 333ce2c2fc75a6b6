import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dmtree.cache import (COOLING, FREE, HOT, IDX_MASK, IO_MARKER, RETRY, Cache, CacheConfig,
                          CacheTooSmall, CoolingMap, Transient, replacement_frequency)
from dmtree.fabric import SWIZZLED_BIT, Fabric, FabricConfig
from dmtree.node import NodeLayout, Placement, PlacementConfig, bulk_load


class FixedRng(random.Random):
    """Generator whose uniform draws are pinned (choices still work)."""

    def __init__(self, u):
        super().__init__(0)
        self.u = u

    def random(self):
        return self.u


def tree(n=3000, node_size=256, frames=64, **cfg):
    fab = Fabric(FabricConfig(region_bytes_per_server=1 << 22))
    lay = NodeLayout(node_size)
    keys = np.arange(1, n + 1, dtype=np.uint64)
    res = bulk_load(keys, keys, fab, Placement(PlacementConfig(M=3, node_size=node_size), 2), lay)
    cache = Cache(CacheConfig(capacity_bytes=frames * node_size, node_size=node_size, **cfg), fab, lay)
    fab.stats.reset()
    return fab, lay, res, cache


def load_path(cache, root, key, ctx, force_leaf=True):
    """Fetch the root-to-leaf path for ``key`` into the cache; returns the frames."""
    f = cache.mapping.get(root)
    if f is None:
        f, _ = cache.fetch(root, False, None, 0, 0, ctx)
    path = [f]
    while f.node.level:
        slot = int(np.searchsorted(f.node.keys, key, side="right"))
        ref = f.node.vals[slot]
        if ref & SWIZZLED_BIT:
            f = cache.frames[ref & IDX_MASK]
        else:
            r = cache.resolve(ref, f, f.ver, slot, ctx)
            if r is None:
                r = cache.fetch(ref, False, f, f.ver, slot, ctx, force=force_leaf)
            f = r[0]
        path.append(f)
    return path


# -- formula -------------------------------------------------------------

def test_replacement_frequency_examples():
    assert replacement_frequency(400e-9, 2e-6, 0.1, 36) == pytest.approx(6.43e6, rel=0.01)
    assert replacement_frequency(400e-9, 100e-6, 0.1, 36) == pytest.approx(0.35e6, rel=0.01)
    assert replacement_frequency(400e-9, 2e-6, 1.0, 36) == pytest.approx(36 / 2e-6)
    assert replacement_frequency(400e-9, 2e-6, 0.1, 72) == pytest.approx(
        2 * replacement_frequency(400e-9, 2e-6, 0.1, 36))
    with pytest.raises(ValueError):
        replacement_frequency(400e-9, 2e-6, 0.0, 36)


def test_config_bucket_count_and_validation():
    cfg = CacheConfig(capacity_bytes=1000 * 1024)
    assert cfg.frame_count == 1000
    assert cfg.bucket_count == 17  # ceil(0.1 * 1000 / 6)
    assert CacheConfig(capacity_bytes=2 * 1024).bucket_count == 1
    for bad in (dict(leaf_admission_prob=1.5), dict(inner_admission_prob=0.5),
                dict(cooling_structure="lru"), dict(capacity_bytes=1024)):
        with pytest.raises(ValueError):
            CacheConfig(**bad).validate()


# -- remote reads ----------------------------------------------------------

def test_shared_read_uses_three_verbs():
    fab, lay, res, cache = tree()
    ctx = cache.ctx()
    node = cache.read_node(res.root, True, ctx)
    s = fab.stats.snapshot()
    assert node is not None and s.reads == 3 and s.read_bytes == 8 + 256 + 8


def test_non_shared_read_uses_one_verb():
    fab, lay, res, cache = tree()
    cache.read_node(res.root, False, cache.ctx())
    s = fab.stats.snapshot()
    assert (s.reads, s.read_bytes) == (1, 256)


def test_locked_shared_node_retries_after_one_read():
    fab, lay, res, cache = tree()
    v = fab.peek(res.root, 8)
    fab.poke(res.root, (int.from_bytes(v, "little") | 1).to_bytes(8, "little"))
    assert cache.read_node(res.root, True, cache.ctx()) is None
    assert fab.stats.snapshot().reads == 1
    assert cache.fetch(res.root, True, None, 0, 0, cache.ctx()) is RETRY
    assert cache.mapping.get(res.root) is None


# -- admission -------------------------------------------------------------

def test_inner_nodes_always_admitted_and_swizzled():
    fab, lay, res, cache = tree()
    ctx = cache.ctx()
    ctx.rng = FixedRng(0.99)
    root, _ = cache.fetch(res.root, False, None, 0, 0, ctx)
    child_ref = root.node.vals[0]
    child, _ = cache.fetch(child_ref, False, root, root.ver, 0, ctx)
    assert child.node.level > 0 and child.state == HOT
    assert root.node.vals[0] == SWIZZLED_BIT | child.idx
    # a swizzled ref resolves to the frame without touching the mapping table
    probes = ctx.probes
    assert cache.frames[root.node.vals[0] & IDX_MASK] is child
    assert ctx.probes == probes


def test_leaf_admission_threshold():
    for u, admitted in ((0.05, True), (0.5, False)):
        fab, lay, res, cache = tree()
        ctx = cache.ctx()
        path = load_path(cache, res.root, 5, ctx)
        # drop the leaf again, then fetch it with a pinned draw
        leaf, parent = path[-1], path[-2]
        ref = leaf.node.addr
        cache.cool_subtree(leaf, ctx)
        assert cache.evict_one(ctx) is leaf
        assert cache.mapping.get(ref) is None
        assert parent.node.vals[0] == ref
        ctx.rng = FixedRng(u)
        r = cache.fetch(ref, False, parent, parent.ver, 0, ctx)
        if admitted:
            assert r is not RETRY and not isinstance(r, Transient) and r[0].state == HOT
        else:
            assert isinstance(r, Transient)
            assert cache.mapping.get(ref) is IO_MARKER
            cache.release_transient(r)
            assert cache.mapping.get(ref) is None


# -- cooling and eviction ----------------------------------------------------

def test_delegation():
    fab, lay, res, cache = tree()
    ctx = cache.ctx()
    path = load_path(cache, res.root, 5, ctx)
    leaf = path[-1]
    assert cache.delegate_cooling(leaf, ctx.rng) is leaf
    # root -> inner -> leaf chain, only one swizzled child at each step
    assert cache.delegate_cooling(path[0], ctx.rng) is leaf
    # two childless swizzled children: either may be picked, never the parent
    other = load_path(cache, res.root, 2000, ctx)[-1]
    picks = {cache.delegate_cooling(path[0], random.Random(s)).idx for s in range(40)}
    assert picks <= {leaf.idx, other.idx} and path[0].idx not in picks


def test_cool_sample_cools_leaf_and_unswizzles_parent():
    fab, lay, res, cache = tree()
    ctx = cache.ctx()
    path = load_path(cache, res.root, 5, ctx)
    leaf, parent = path[-1], path[-2]
    for f in path[:-1]:
        f.pin += 1
    ctx.rng = random.Random(1)
    while leaf.state == HOT:
        cache.cool_sample(ctx)
    assert leaf.state == COOLING
    assert leaf.node.addr in parent.node.vals
    assert leaf in cache.cooling.members()


def test_dirty_frame_written_back_once_when_cooled():
    fab, lay, res, cache = tree()
    ctx = cache.ctx()
    path = load_path(cache, res.root, 5, ctx)
    leaf = path[-1]
    leaf.node.vals[0] = 999
    leaf.dirty = True
    fab.stats.reset()
    assert cache.cool_subtree(leaf, ctx)
    s = fab.stats.snapshot()
    assert (s.writes, s.write_bytes, s.reads) == (1, 256, 0)
    assert lay.decode(fab.peek(leaf.node.addr, 256)).vals[0] == 999
    assert not leaf.dirty


def test_second_chance_restores_hot():
    fab, lay, res, cache = tree()
    ctx = cache.ctx()
    path = load_path(cache, res.root, 5, ctx)
    leaf, parent = path[-1], path[-2]
    cache.cool_subtree(leaf, ctx)
    addr = leaf.node.addr
    slot = parent.node.vals.index(addr)
    r = cache.resolve(addr, parent, parent.ver, slot, ctx)
    assert r[0] is leaf and leaf.state == HOT
    assert leaf not in cache.cooling.members()
    assert parent.node.vals[slot] == SWIZZLED_BIT | leaf.idx


def test_adopt_rejects_frame_reused_for_another_node():
    # a mapping probe can race with eviction: the frame found for one address may
    # hold a different node by the time the parent is locked
    fab, lay, res, cache = tree()
    ctx = cache.ctx()
    path = load_path(cache, res.root, 5, ctx)
    leaf, parent = path[-1], path[-2]
    cache.cool_subtree(leaf, ctx)
    addr = leaf.node.addr
    slot = parent.node.vals.index(addr)
    other = load_path(cache, res.root, 2900, ctx)[-1]
    owner = other.parent
    assert other.state == HOT and other.node.addr != addr
    assert cache._adopt(other, addr, parent, parent.ver, slot) is RETRY
    assert parent.node.vals[slot] == addr and other.parent is owner
    assert SWIZZLED_BIT | other.idx in owner.node.vals


def test_cooling_remove_checks_address():
    node = type("N", (), {"addr": 64})()
    f = type("F", (), {"idx": 0, "node": node})()
    cm = CoolingMap(1, 3)
    cm.push(f, 64, None)
    assert not cm.remove(f, 128)  # same bucket, different node
    assert cm.remove(f, 64) and len(cm) == 0


def test_uncached_lookup_misses():
    fab, lay, res, cache = tree()
    assert cache.resolve(res.root, None, 0, 0, cache.ctx()) is None


def test_evicting_clean_frame_costs_nothing():
    fab, lay, res, cache = tree()
    ctx = cache.ctx()
    path = load_path(cache, res.root, 5, ctx)
    leaf = path[-1]
    addr = leaf.node.addr
    cache.cool_subtree(leaf, ctx)
    assert len(cache.cooling) == 1
    fab.stats.reset()
    assert cache.evict_one(ctx) is leaf
    assert fab.stats.snapshot().total_verbs == 0
    assert cache.mapping.get(addr) is None and leaf.state == FREE


def test_cache_too_small_when_all_pinned():
    fab, lay, res, cache = tree(frames=4)
    ctx = cache.ctx()
    path = load_path(cache, res.root, 5, ctx)
    for f in path:
        f.pin += 1
    while True:
        try:
            f = cache.get_free_frame(ctx)
        except CacheTooSmall:
            break
        f.state, f.pin = HOT, 1


def test_flush_dirty_counts_and_unswizzles():
    fab, lay, res, cache = tree()
    ctx = cache.ctx()
    assert cache.flush_dirty(ctx=ctx) == 0
    path = load_path(cache, res.root, 5, ctx) + load_path(cache, res.root, 2500, ctx)[1:]
    for f in path:
        f.dirty = True
    fab.stats.reset()
    k = cache.flush_dirty(ctx=ctx)
    s = fab.stats.snapshot()
    assert k == len(path) == s.writes and s.write_bytes == 256 * k
    for f in path:
        img = lay.decode(fab.peek(f.node.addr, 256))
        assert not any(v & SWIZZLED_BIT for v in img.vals) or img.level == 0
    assert cache.check_invariants([path[0]]) == []


def test_cooling_map_bucket_fifo():
    cm = CoolingMap(1, 3)
    evicted = []
    frames = [type("F", (), {"idx": i})() for i in range(5)]
    for i, f in enumerate(frames):
        cm.push(f, i * 64, evicted.append)
    assert [f.idx for f in evicted] == [0, 1]
    assert [f.idx for f in cm.bucket_contents(0)] == [2, 3, 4]
    assert cm.pop_oldest(random.Random(0), evicted.append).idx == 2


@settings(max_examples=15, deadline=None)
@given(st.lists(st.integers(1, 3000), min_size=1, max_size=60), st.sampled_from(["map", "single-queue"]))
def test_invariants_hold_under_churn(keys, structure):
    fab, lay, res, cache = tree(frames=24, cooling_structure=structure)
    ctx = cache.ctx()
    root = None
    for k in keys:
        path = load_path(cache, res.root, k, ctx) if root is None else None
        if root is None:
            root = path[0]
            root.pin += 1
        else:
            f = root
            while f.node.level:
                slot = int(np.searchsorted(f.node.keys, k, side="right"))
                ref = f.node.vals[slot]
                if ref & SWIZZLED_BIT:
                    f = cache.frames[ref & IDX_MASK]
                    continue
                r = cache.resolve(ref, f, f.ver, slot, ctx)
                if r is None:
                    r = cache.fetch(ref, False, f, f.ver, slot, ctx)
                if isinstance(r, Transient):
                    cache.release_transient(r)
                    break
                f = r[0]
            if f.node.level == 0 and k % 3 == 0:
                f.lock()
                f.dirty = True
                f.unlock()
        assert cache.check_invariants([root]) == []
