import logging
from typing import Any, Callable, Dict, List, NamedTuple, Optional

import numpy as np
import simpy

from schemas.sim_config import SimConfig
from utils.digest import RunningDigest, payload_digest

logger = logging.getLogger(__name__)

US_PER_MS = 1000
US_PER_S = 1_000_000


class NetTraceLine(NamedTuple):
    time_us: int
    src: str
    dst: str
    msg_type: str
    digest: str
    status: str  # deliver | drop | failed

    def render(self) -> str:
        return f"{self.time_us}\t{self.src}\t{self.dst}\t{self.msg_type}\t{self.digest}\t{self.status}\n"


class Timer:
    __slots__ = ("cancelled", "fire_at")

    def __init__(self, fire_at: int):
        self.cancelled = False
        self.fire_at = fire_at

    def cancel(self) -> None:
        self.cancelled = True


class SimNetwork:
    """Deterministic multi-DC network on top of a simpy event loop; time is integer microseconds"""

    def __init__(self, config: SimConfig, seed: Optional[int] = None, digest_payloads: bool = True):
        self.config = config
        self.env = simpy.Environment()
        self.rng = np.random.default_rng(config.seed if seed is None else seed)
        self.nodes: Dict[str, "SimNode"] = {}
        self.failed_dcs: Dict[str, bool] = {}
        self.crashed: Dict[str, bool] = {}
        self.digest = RunningDigest()
        self.digest_payloads = digest_payloads
        self.middleware: List[Callable[[NetTraceLine], None]] = []
        self.observer = None
        self.tracer = None
        self.sent = 0
        self.dropped = 0
        self._dc_index = {dc: i for i, dc in enumerate(config.datacenters)}

    @property
    def now(self) -> int:
        return int(self.env.now)

    def add_middleware(self, fn: Callable[[NetTraceLine], None]) -> None:
        self.middleware.append(fn)

    def register(self, node: "SimNode") -> None:
        if node.node_id in self.nodes:
            raise ValueError(f"duplicate node id {node.node_id}")
        if node.dc not in self._dc_index:
            raise ValueError(f"unknown datacenter {node.dc}")
        self.nodes[node.node_id] = node

    # Liveness

    def is_up(self, node_id: str) -> bool:
        node = self.nodes.get(node_id)
        if node is None or self.crashed.get(node_id):
            return False
        return not self.failed_dcs.get(node.dc)

    def fail_datacenter(self, dc: str, at: Optional[int] = None) -> None:
        def fail():
            self.failed_dcs[dc] = True
            logger.info(f"Datacenter {dc} failed at t={self.now}us")
        self._at(at, fail)

    def heal_datacenter(self, dc: str, at: Optional[int] = None) -> None:
        def heal():
            self.failed_dcs.pop(dc, None)
            logger.info(f"Datacenter {dc} healed at t={self.now}us")
        self._at(at, heal)

    def crash_node(self, node_id: str, at: Optional[int] = None) -> None:
        def crash():
            self.crashed[node_id] = True
            logger.info(f"Node {node_id} crashed at t={self.now}us")
        self._at(at, crash)

    def _at(self, at: Optional[int], action: Callable[[], None]) -> None:
        if at is None or at <= self.now:
            action()
            return
        event = self.env.timeout(at - self.now)
        event.callbacks.append(lambda _event: action())

    # Delivery

    def one_way_us(self, dc_a: str, dc_b: str) -> int:
        return int(round(self.config.one_way_ms(dc_a, dc_b) * US_PER_MS))

    def sample_delay(self, dc_a: str, dc_b: str) -> int:
        mean = self.config.one_way_ms(dc_a, dc_b) * US_PER_MS
        sigma = self.config.jitter.fraction * mean
        if sigma <= 0:
            return max(1, int(round(mean)))
        bound = self.config.jitter.truncate_sigmas
        while True:
            z = self.rng.standard_normal()
            if abs(z) <= bound:
                break
        return max(1, int(round(mean + z * sigma)))

    def send(self, msg: Any, src: str, dst: str) -> Optional[int]:
        """Schedule delivery of msg; returns the delivery time or None when the message is lost"""
        if dst not in self.nodes:
            raise KeyError(f"unknown destination {dst}")
        if not self.is_up(src):
            return None
        self.sent += 1
        if src == dst:
            event = self.env.timeout(0)
            event.callbacks.append(lambda _event: self._deliver(msg, src, dst))
            return self.now
        if self.config.drop_rate > 0 and self.rng.random() < self.config.drop_rate:
            self._trace(self.now, src, dst, msg, "drop")
            self.dropped += 1
            return None
        if not self.is_up(dst):
            self._trace(self.now, src, dst, msg, "failed")
            self.dropped += 1
            return None
        delay = self.sample_delay(self.nodes[src].dc, self.nodes[dst].dc)
        event = self.env.timeout(delay)
        event.callbacks.append(lambda _event: self._deliver(msg, src, dst))
        return self.now + delay

    def _deliver(self, msg: Any, src: str, dst: str) -> None:
        if not self.is_up(dst):
            self._trace(self.now, src, dst, msg, "failed")
            self.dropped += 1
            return
        self._trace(self.now, src, dst, msg, "deliver")
        self.nodes[dst].receive(msg, src)

    def _trace(self, time_us: int, src: str, dst: str, msg: Any, status: str) -> None:
        digest = payload_digest(repr(msg)) if self.digest_payloads else "-"
        line = NetTraceLine(time_us, src, dst, type(msg).__name__, digest, status)
        self.digest.update(line.render())
        for fn in self.middleware:
            fn(line)

    # Timers

    def schedule(self, delay_us: int, callback: Callable[[], None], owner: Optional[str] = None) -> Timer:
        """Run callback after delay_us unless cancelled or the owner is down by then"""
        delay_us = max(0, int(delay_us))
        timer = Timer(self.now + delay_us)

        def fire(_event):
            if timer.cancelled:
                return
            if owner is not None and not self.is_up(owner):
                return
            callback()

        event = self.env.timeout(delay_us)
        event.callbacks.append(fire)
        return timer

    def run(self, until_us: Optional[int] = None) -> None:
        if until_us is None:
            self.env.run()
        elif until_us > self.now:
            self.env.run(until=until_us)


class SimNode:
    """Base for anything with an address on the simulated network"""

    def __init__(self, node_id: str, dc: str, network: SimNetwork):
        self.node_id = node_id
        self.dc = dc
        self.network = network
        self.handlers: Dict[type, Callable[[Any, str], None]] = {}
        network.register(self)

    @property
    def now(self) -> int:
        return self.network.now

    @property
    def up(self) -> bool:
        return self.network.is_up(self.node_id)

    def send(self, dst: str, msg: Any) -> Optional[int]:
        return self.network.send(msg, self.node_id, dst)

    def schedule(self, delay_us: int, callback: Callable[[], None]) -> Timer:
        return self.network.schedule(delay_us, callback, owner=self.node_id)

    def receive(self, msg: Any, src: str) -> None:
        handler = self.handlers.get(type(msg))
        if handler is None:
            logger.debug(f"{self.node_id}: no handler for {type(msg).__name__} from {src}")
            return
        handler(msg, src)
