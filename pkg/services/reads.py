"""Read strategies over the replicated store: local, quorum-latest and master-pinned monotonic reads."""
from dataclasses import dataclass, field
import enum
import logging
from typing import Any, Callable, Dict, List, Optional, TYPE_CHECKING

from models.core import is_absent
from models.messages import ReadReply, ReadRequest
from utils.exceptions import GeoTxnError, QuorumUnavailable, RecordNotFound, ReplicaUnavailable

if TYPE_CHECKING:
    from services.coordinator import CoordinatorNode

logger = logging.getLogger(__name__)

QUORUM_TIMEOUT_FACTOR = 2


class Freshness(enum.Enum):
    LOCAL = "local"
    QUORUM = "quorum-latest"
    MONOTONIC = "monotonic"


@dataclass(frozen=True)
class ReadResult:
    key: str
    value: Any
    round: int
    version_id: Optional[int]
    source: str
    freshness: Freshness

    @property
    def found(self) -> bool:
        return not is_absent(self.value)

    def require(self) -> Any:
        if not self.found:
            raise RecordNotFound(f"{self.key} not found at {self.source}")
        return self.value


@dataclass
class ReadSession:
    """Per-client memory of pinned masters and the newest round known for each key"""

    pinned: Dict[str, str] = field(default_factory=dict)
    seen: Dict[str, ReadResult] = field(default_factory=dict)
    written: Dict[str, int] = field(default_factory=dict)  # rounds learned without the master's vote

    def watermark(self, key: str) -> int:
        result = self.seen.get(key)
        seen = result.round if result is not None else -1
        return max(seen, self.written.get(key, -1))

    def observe(self, result: ReadResult) -> None:
        known = self.seen.get(result.key)
        if known is None or result.round >= known.round:
            self.seen[result.key] = result

    def note_missed_write(self, key: str, round_: int) -> None:
        """The master was not in the quorum that learned round_; it may still lag behind it"""
        if round_ > self.written.get(key, -1):
            self.written[key] = round_


ReadCallback = Callable[[Optional[ReadResult], Optional[GeoTxnError]], None]


@dataclass
class PendingRead:
    request_id: int
    key: str
    freshness: Freshness
    callback: ReadCallback
    targets: List[str]
    needed: int
    replies: Dict[str, ReadReply] = field(default_factory=dict)
    attempt: int = 0
    session: Optional[ReadSession] = None
    timer: Any = None


class ReadService:
    def __init__(self, node: "CoordinatorNode"):
        self.node = node
        self.cluster = node.cluster
        self.pending: Dict[int, PendingRead] = {}
        self._next_id = 0

    def _request_id(self) -> int:
        self._next_id += 1
        return self._next_id

    def read(self, key: str, freshness: Freshness, callback: ReadCallback,
             session: Optional[ReadSession] = None) -> None:
        if freshness is Freshness.QUORUM:
            self.read_quorum(key, callback)
        elif freshness is Freshness.MONOTONIC:
            self.read_monotonic(session if session is not None else ReadSession(), key, callback)
        else:
            self.read_local(key, callback)

    # Local

    def read_local(self, key: str, callback: ReadCallback, dc: Optional[str] = None) -> None:
        """Latest version executed at one replica in dc; may be stale"""
        dc = dc or self.node.dc
        targets = [node_id for node_id in self.cluster.local_replicas(dc) if node_id in self.cluster.replicas_for(key)]
        if not targets:
            callback(None, ReplicaUnavailable(f"no replica of {key} in {dc}"))
            return
        pending = PendingRead(self._request_id(), key, Freshness.LOCAL, callback, targets, 1)
        self.pending[pending.request_id] = pending
        self._send_local(pending)

    def _send_local(self, pending: PendingRead) -> None:
        target = pending.targets[pending.attempt]
        self.node.send(target, ReadRequest(pending.key, pending.request_id))
        pending.timer = self.node.schedule(self.cluster.max_rtt_us, lambda: self._local_timeout(pending))

    def _local_timeout(self, pending: PendingRead) -> None:
        if pending.request_id not in self.pending:
            return
        pending.attempt += 1
        if pending.attempt >= len(pending.targets):
            del self.pending[pending.request_id]
            pending.callback(None, ReplicaUnavailable(f"no local replica of {pending.key} answered"))
            return
        logger.debug(f"{self.node.node_id}: local read of {pending.key} moves to {pending.targets[pending.attempt]}")
        self._send_local(pending)

    # Quorum

    def read_quorum(self, key: str, callback: ReadCallback, session: Optional[ReadSession] = None) -> None:
        """Newest executed round among a classic quorum"""
        targets = list(self.cluster.replicas_for(key))
        pending = PendingRead(self._request_id(), key, Freshness.QUORUM, callback, targets,
                              self.cluster.quorum.q_classic, session=session)
        self.pending[pending.request_id] = pending
        for target in targets:
            self.node.send(target, ReadRequest(key, pending.request_id))
        pending.timer = self.node.schedule(QUORUM_TIMEOUT_FACTOR * self.cluster.max_rtt_us,
                                           lambda: self._quorum_timeout(pending))

    def _quorum_timeout(self, pending: PendingRead) -> None:
        if self.pending.pop(pending.request_id, None) is None:
            return
        pending.callback(None, QuorumUnavailable(
            f"{len(pending.replies)} of {pending.needed} replicas answered a read of {pending.key}"))

    # Monotonic

    def read_monotonic(self, session: ReadSession, key: str, callback: ReadCallback) -> None:
        """Read through the pinned master; fall back to a quorum read when it lags the session"""
        target = session.pinned.get(key)
        if target is None:
            target = self.cluster.master_for(key, 1)
            session.pinned[key] = target
        pending = PendingRead(self._request_id(), key, Freshness.MONOTONIC, callback, [target], 1,
                              session=session)
        self.pending[pending.request_id] = pending
        self.node.send(target, ReadRequest(key, pending.request_id))
        pending.timer = self.node.schedule(self.cluster.max_rtt_us, lambda: self._master_timeout(pending))

    def _master_timeout(self, pending: PendingRead) -> None:
        if self.pending.pop(pending.request_id, None) is None:
            return
        session = pending.session
        candidates = self.cluster.master_candidates(pending.key, 1)
        current = session.pinned.get(pending.key, candidates[0])
        session.pinned[pending.key] = candidates[(candidates.index(current) + 1) % len(candidates)]
        logger.info(f"{self.node.node_id}: master read of {pending.key} timed out, "
                    f"re-pinned to {session.pinned[pending.key]}")
        self._escalate(pending)

    def _escalate(self, pending: PendingRead) -> None:
        session = pending.session

        def done(result: Optional[ReadResult], error: Optional[GeoTxnError]) -> None:
            if result is not None:
                result = ReadResult(result.key, result.value, result.round, result.version_id, result.source,
                                    Freshness.MONOTONIC)
                seen = session.seen.get(result.key)
                if seen is not None and result.round < seen.round:
                    result = seen
                session.observe(result)
            pending.callback(result, error)

        self.read_quorum(pending.key, done, session)

    # Replies

    def on_reply(self, msg: ReadReply, src: str) -> None:
        pending = self.pending.get(msg.request_id)
        if pending is None or src not in pending.targets or src in pending.replies:
            return
        pending.replies[src] = msg
        if len(pending.replies) < pending.needed:
            return
        del self.pending[msg.request_id]
        if pending.timer is not None:
            pending.timer.cancel()

        best_src = max(pending.replies, key=lambda node_id: (pending.replies[node_id].round, node_id))
        best = pending.replies[best_src]
        value = None if is_absent(best.value) else best.value
        result = ReadResult(msg.key, value, best.round, best.version_id, best_src, pending.freshness)
        if pending.freshness is Freshness.MONOTONIC:
            session = pending.session
            if result.round < session.watermark(msg.key):
                logger.debug(f"{self.node.node_id}: {src} is behind the session on {msg.key}, reading a quorum")
                self._escalate(pending)
                return
            session.observe(result)
        pending.callback(result, None)
