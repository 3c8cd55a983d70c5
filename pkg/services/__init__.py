# Services module
from .cluster import Cluster, ProtocolSettings
from .coordinator import CoordinatorNode, TxnContext
from .network import SimNetwork
from .observer import Observer
from .reads import Freshness, ReadSession

__all__ = [
    "Cluster",
    "ProtocolSettings",
    "CoordinatorNode",
    "TxnContext",
    "SimNetwork",
    "Observer",
    "Freshness",
    "ReadSession",
]
