"""Quorum-write baseline: last-writer-wins replicas, no isolation and no cross-key atomicity."""
import logging
from typing import Dict, Tuple, TYPE_CHECKING

from models.core import physical_update
from models.messages import QwAck, QwWrite
from services.acceptor import ReplicaService

if TYPE_CHECKING:
    from services.replica import ReplicaNode

logger = logging.getLogger(__name__)

Stamp = Tuple[int, str]  # (version counter, writer txn id)


class QuorumWriteReplica:
    def __init__(self, node: "ReplicaNode"):
        self.node = node
        self.stamps: Dict[str, Stamp] = {}

    def stamp_of(self, key: str) -> Stamp:
        rec = self.node.record(key)
        return self.stamps.get(key, (max(rec.last_round, 0), ""))

    def on_write(self, msg: QwWrite, src: str) -> None:
        """Store the value unless a newer stamp is already in place, and acknowledge either way"""
        if msg.stamp > self.stamp_of(msg.key):
            rec = self.node.record(msg.key)
            txn_id = msg.stamp[1]
            option = physical_update(txn_id, msg.key, (msg.key,), msg.base_stamp[0], msg.value)
            ReplicaService.install_version(rec, option)
            self.stamps[msg.key] = msg.stamp
        else:
            logger.debug(f"{self.node.node_id}: {msg.key} keeps {self.stamps.get(msg.key)} over {msg.stamp}")
        self.node.send(src, QwAck(msg.key, msg.request_id))
