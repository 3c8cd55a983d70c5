from dataclasses import dataclass
import logging
import os
from typing import Any, Callable, Dict, List, Optional

from config import settings as env
from models.core import DEFAULT_META, Ballot, RoundMeta, quorum_sizes
from services.acceptor import ReplicaService
from services.coordinator import CoordinatorNode
from services.network import US_PER_MS, SimNetwork
from services.observer import Observer
from services.replica import ReplicaNode
from services.tracing import TraceLog
from utils.digest import stable_hash
from utils.option_log import OptionLogWriter

logger = logging.getLogger(__name__)


@dataclass
class ProtocolSettings:
    gamma: int = env.GAMMA
    fast_threshold: int = env.FAST_SUCCESS_THRESHOLD
    learn_timeout_factor: float = env.LEARN_TIMEOUT_FACTOR
    master_failover_factor: float = env.MASTER_FAILOVER_FACTOR
    fast_timeout_factor: float = env.FAST_TIMEOUT_FACTOR
    slo_us: int = env.SLO_MS * US_PER_MS
    comm_close_settle_us: int = env.COMM_CLOSE_SETTLE_MS * US_PER_MS
    classic_preset: bool = False  # masters pre-own every round with an implicit classic ballot
    abort_2pc_on_timeout: bool = env.ABORT_2PC_ON_TIMEOUT
    settled_rounds: int = env.SETTLED_ROUNDS
    keep_option_log: bool = True
    option_log_dir: Optional[str] = env.OPTION_LOG_DIR
    observe_reads: bool = True


class Cluster:
    """Replica placement, round masters and the shared plumbing of one simulated deployment"""

    def __init__(self, network: SimNetwork, protocol: Optional[ProtocolSettings] = None,
                 tracer: Optional[TraceLog] = None, observer: Optional[Observer] = None):
        self.network = network
        self.settings = protocol or ProtocolSettings()
        self.tracer = tracer or TraceLog()
        self.observer = observer or Observer()
        network.tracer = self.tracer
        network.observer = self.observer

        config = network.config
        self.datacenters: List[str] = list(config.datacenters)
        self.replicas_per_dc = config.replicas_per_dc
        self.replicas: Dict[str, ReplicaNode] = {}
        self.replica_ids: List[str] = []
        self.server_ids: Dict[str, int] = {}
        for dc in self.datacenters:
            for index in range(self.replicas_per_dc):
                node_id = f"{dc}/r{index}"
                server_id = len(self.replica_ids)
                self.replica_ids.append(node_id)
                self.server_ids[node_id] = server_id
                self.replicas[node_id] = ReplicaNode(node_id, dc, server_id, self)
        self.quorum = quorum_sizes(len(self.replica_ids))
        self.max_rtt_us = config.max_rtt_us()
        self.callbacks: Dict[str, Callable[[str, bool, str], None]] = {}
        self.log_writers: Dict[str, OptionLogWriter] = {}
        self._coordinators = 0
        logger.info(
            f"Cluster of {self.quorum.n} replicas over {len(self.datacenters)} datacenters "
            f"(q_classic={self.quorum.q_classic}, q_fast={self.quorum.q_fast})"
        )

    # Timeouts

    def timeout_us(self, factor: float) -> int:
        return max(1, int(factor * self.max_rtt_us))

    # Placement

    def replicas_for(self, key: str) -> List[str]:
        return self.replica_ids

    @staticmethod
    def table_of(key: str) -> str:
        return key.split(":", 1)[0]

    def local_replicas(self, dc: str) -> List[str]:
        return [node_id for node_id in self.replica_ids if self.replicas[node_id].dc == dc]

    def master_for(self, key: str, round_: int) -> str:
        """Round 0 belongs to the table master, later rounds to the key master"""
        anchor = self.table_of(key) if round_ == 0 else key
        dc = self.datacenters[stable_hash(anchor) % len(self.datacenters)]
        index = stable_hash(f"{anchor}#replica") % self.replicas_per_dc
        return f"{dc}/r{index}"

    def master_candidates(self, key: str, round_: int) -> List[str]:
        """Failover order: the master, then the ring of replicas after it"""
        first = self.replica_ids.index(self.master_for(key, round_))
        return self.replica_ids[first:] + self.replica_ids[:first]

    def server_node(self, server_id: int) -> Optional[str]:
        if 0 <= server_id < len(self.replica_ids):
            return self.replica_ids[server_id]
        return None

    def recovery_leader(self, txn_id: str) -> Optional[str]:
        start = stable_hash(txn_id) % len(self.replica_ids)
        ring = self.replica_ids[start:] + self.replica_ids[:start]
        return next((node_id for node_id in ring if self.network.is_up(node_id)), None)

    # Round metadata

    def default_meta_for(self, key: str) -> RoundMeta:
        if not self.settings.classic_preset:
            return DEFAULT_META
        master = self.server_ids[self.master_for(key, 1)]
        return RoundMeta(0, None, False, Ballot(True, 0, master))

    def insert_meta_for(self, key: str) -> Optional[RoundMeta]:
        if not self.settings.classic_preset:
            return None
        master = self.server_ids[self.master_for(key, 0)]
        return RoundMeta(0, 0, False, Ballot(True, 0, master))

    def option_log_sink(self, node_id: str):
        directory = self.settings.option_log_dir
        if not directory:
            return None
        writer = self.log_writers.get(node_id)
        if writer is None:
            writer = OptionLogWriter(os.path.join(directory, node_id.replace("/", "_") + ".log"))
            self.log_writers[node_id] = writer
        return writer

    # Data

    def seed(self, key: str, value: Any) -> None:
        """Install value as the first committed version of key on every replica"""
        for node_id in self.replicas_for(key):
            node = self.replicas[node_id]
            rec = node.record(key)
            version = ReplicaService.seed(rec, value)
            self.observer.on_execute(node_id, key, version, rec.history[version.round])

    def register_callback(self, name: str, fn: Callable[[str, bool, str], None]) -> None:
        """fn(txn_id, committed, node_id) runs at least once per finished transaction"""
        self.callbacks[name] = fn

    def invoke_callback(self, name: str, txn_id: str, committed: bool, node_id: str) -> None:
        fn = self.callbacks.get(name)
        if fn is None:
            logger.warning(f"{node_id}: no remote callback named {name}")
            return
        fn(txn_id, committed, node_id)

    # Clients

    def add_coordinator(self, dc: Optional[str] = None, protocol: str = "geotxn-fast",
                        node_id: Optional[str] = None) -> CoordinatorNode:
        dc = dc or self.network.config.home_dc
        if node_id is None:
            node_id = f"{dc}/c{self._coordinators}"
        self._coordinators += 1
        return CoordinatorNode(node_id, dc, self, protocol)

    def run(self, until_us: Optional[int] = None) -> None:
        self.network.run(until_us)

    def close(self) -> None:
        for writer in self.log_writers.values():
            writer.close()
