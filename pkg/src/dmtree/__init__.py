"""A B+-tree over a simulated disaggregated memory pool."""
from .cache import Cache, CacheConfig, CacheTooSmall, CoherenceError, replacement_frequency
from .cluster import Cluster, ClusterConfig
from .fabric import Fabric, FabricConfig, GlobalAddress, StatsSnapshot, make_addr
from .index import ComputeServer
from .node import KEY_INF, NodeLayout, OpResult, PlacementConfig, bulk_load, walk_tree
from .offload import OffloadConfig, OffloadCostModel
from .partition import NotOwner, PartitionTable

__all__ = [
    "Cache", "CacheConfig", "CacheTooSmall", "CoherenceError", "replacement_frequency",
    "Cluster", "ClusterConfig", "Fabric", "FabricConfig", "GlobalAddress", "StatsSnapshot",
    "make_addr", "ComputeServer", "KEY_INF", "NodeLayout", "OpResult", "PlacementConfig",
    "bulk_load", "walk_tree", "OffloadConfig", "OffloadCostModel", "NotOwner", "PartitionTable",
]
