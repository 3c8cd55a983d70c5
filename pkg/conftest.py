import pytest

from schemas.sim_config import SimConfig, load_sim_config
from services.cluster import Cluster, ProtocolSettings
from services.network import SimNetwork

HOME = "us-west"


@pytest.fixture
def sim_config() -> SimConfig:
    """The default five data center deployment with deterministic delays"""
    return load_sim_config().without_jitter()


@pytest.fixture
def make_cluster(sim_config):
    def build(config: SimConfig = None, seed: int = 7, **overrides) -> Cluster:
        network = SimNetwork(config or sim_config, seed=seed)
        settings = ProtocolSettings(option_log_dir=None)
        for name, value in overrides.items():
            setattr(settings, name, value)
        return Cluster(network, settings)
    return build


@pytest.fixture
def cluster(make_cluster) -> Cluster:
    return make_cluster()


def one_way(cluster: Cluster, a: str, b: str) -> int:
    """Delivery delay in microseconds between two nodes"""
    if a == b:
        return 0
    network = cluster.network
    return max(1, network.one_way_us(network.nodes[a].dc, network.nodes[b].dc))


def nth_rtt(cluster: Cluster, origin: str, n: int) -> int:
    """n-th smallest round trip from origin to the replicas"""
    rtts = sorted(2 * one_way(cluster, origin, node_id) for node_id in cluster.replica_ids)
    return rtts[n - 1]
