import pytest
from pydantic import ValidationError

from schemas.sim_config import SimConfig, load_sim_config
from services.network import SimNetwork, SimNode


class Recorder(SimNode):
    def __init__(self, node_id, dc, network):
        super().__init__(node_id, dc, network)
        self.inbox = []

    def receive(self, msg, src):
        self.inbox.append((self.now, src, msg))


def small_config(**overrides) -> SimConfig:
    data = dict(datacenters=["a", "b"], latency_matrix=[[0.5, 40], [40, 0.5]])
    data.update(overrides)
    return SimConfig(**data)


@pytest.mark.parametrize("overrides", [
    dict(latency_matrix=[[0.5, 40], [41, 0.5]]),
    dict(latency_matrix=[[0.5, 40, 1], [40, 0.5, 1]]),
    dict(latency_matrix=[[50, 40], [40, 0.5]]),
    dict(datacenters=["a", "a"]),
    dict(drop_rate=1.0),
    dict(client_dc="mars"),
])
def test_invalid_configs_are_rejected(overrides):
    with pytest.raises(ValidationError):
        small_config(**overrides)


def test_default_config_loads():
    config = load_sim_config()
    assert len(config.datacenters) == 5
    assert config.max_rtt_us() == 240000


def test_delivery_uses_the_one_way_latency():
    network = SimNetwork(small_config().without_jitter(), seed=1)
    sender = Recorder("a/0", "a", network)
    receiver = Recorder("b/0", "b", network)
    assert sender.send("b/0", "hello") == 40000
    network.run()
    assert receiver.inbox == [(40000, "a/0", "hello")]


def test_self_send_is_immediate():
    network = SimNetwork(small_config().without_jitter(), seed=1)
    node = Recorder("a/0", "a", network)
    node.send("a/0", "ping")
    network.run()
    assert node.inbox == [(0, "a/0", "ping")]


def run_chatter(seed: int) -> str:
    network = SimNetwork(small_config(), seed=seed)
    a = Recorder("a/0", "a", network)
    Recorder("b/0", "b", network)
    for index in range(50):
        network.schedule(index * 1000, lambda i=index: a.send("b/0", f"m{i}"))
    network.run()
    return network.digest.hexdigest()


def test_same_seed_same_digest():
    assert run_chatter(3) == run_chatter(3)
    assert run_chatter(3) != run_chatter(4)


def test_jitter_stays_within_the_truncation():
    network = SimNetwork(small_config(), seed=5)
    delays = [network.sample_delay("a", "b") for _ in range(500)]
    assert min(delays) >= 40000 - 3 * 4000
    assert max(delays) <= 40000 + 3 * 4000
    assert len(set(delays)) > 1


def test_failed_datacenter_drops_both_directions():
    network = SimNetwork(small_config().without_jitter(), seed=1)
    a = Recorder("a/0", "a", network)
    b = Recorder("b/0", "b", network)
    network.fail_datacenter("b")
    assert a.send("b/0", "in") is None
    assert b.send("a/0", "out") is None
    network.heal_datacenter("b", at=10)
    network.run(20)
    a.send("b/0", "again")
    network.run()
    assert [msg for _, _, msg in b.inbox] == ["again"]
    assert a.inbox == []


def test_message_in_flight_to_a_failing_dc_is_lost():
    network = SimNetwork(small_config().without_jitter(), seed=1)
    a = Recorder("a/0", "a", network)
    b = Recorder("b/0", "b", network)
    a.send("b/0", "late")
    network.fail_datacenter("b", at=10000)
    network.run()
    assert b.inbox == []
    assert network.dropped == 1


def test_drop_rate_loses_messages():
    network = SimNetwork(small_config(drop_rate=0.5), seed=2)
    a = Recorder("a/0", "a", network)
    b = Recorder("b/0", "b", network)
    for index in range(200):
        a.send("b/0", index)
    network.run()
    assert 0 < network.dropped < 200
    assert len(b.inbox) + network.dropped == 200


def test_timers_skip_down_owners_and_cancellation():
    network = SimNetwork(small_config().without_jitter(), seed=1)
    a = Recorder("a/0", "a", network)
    fired = []
    a.schedule(100, lambda: fired.append("owned"))
    cancelled = network.schedule(100, lambda: fired.append("cancelled"))
    network.schedule(100, lambda: fired.append("free"))
    cancelled.cancel()
    network.crash_node("a/0", at=50)
    network.run()
    assert fired == ["free"]


def test_duplicate_node_ids_are_rejected():
    network = SimNetwork(small_config(), seed=1)
    Recorder("a/0", "a", network)
    with pytest.raises(ValueError):
        Recorder("a/0", "a", network)
    with pytest.raises(ValueError):
        Recorder("x/0", "x", network)


def test_jitter_reorders_back_to_back_messages():
    network = SimNetwork(small_config(), seed=9)
    a = Recorder("a/0", "a", network)
    b = Recorder("b/0", "b", network)
    for index in range(100):
        network.schedule(index * 500, lambda i=index: a.send("b/0", i))
    network.run()
    received = [msg for _, _, msg in b.inbox]
    assert sorted(received) == list(range(100))
    assert received != sorted(received)
