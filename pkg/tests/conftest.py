import numpy as np
import pytest

from dmtree.cache import CacheConfig
from dmtree.cluster import Cluster, ClusterConfig
from dmtree.fabric import FabricConfig
from dmtree.node import PlacementConfig
from dmtree.offload import OffloadConfig

STEP = 1000


def build_cluster(records=5000, servers=1, node_size=256, frames=512, M=2, offload=False,
                  memory_servers=2, leaf_p=1.0, step=None, explore=0.0, **fabric_kw):
    """Small tree with keys step, 2*step, ... and value == key.

    A single server gets step 1000; with more servers the keys are spread
    over the whole key space so every partition holds records.
    """
    if step is None:
        step = STEP if servers == 1 else (1 << 32) // (records + 1)
    fabric_kw.setdefault("region_bytes_per_server", 16 << 20)
    cfg = ClusterConfig(
        fabric=FabricConfig(num_memory_servers=memory_servers, **fabric_kw),
        placement=PlacementConfig(M=M, node_size=node_size),
        cache=CacheConfig(capacity_bytes=frames * node_size, node_size=node_size,
                          leaf_admission_prob=leaf_p),
        offload=OffloadConfig(enabled=offload, explore_prob=explore),
        compute_servers=servers,
    )
    keys = np.arange(1, records + 1, dtype=np.uint64) * np.uint64(step)
    c = Cluster(cfg, keys, keys)
    c.step = step
    return c


@pytest.fixture
def make_cluster():
    made = []

    def make(**kw):
        c = build_cluster(**kw)
        made.append(c)
        return c

    yield make
    for c in made:
        c.shutdown()
