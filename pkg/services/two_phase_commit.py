"""Two-phase commit baseline: the client's local storage node coordinates, replicas lock and vote."""
from dataclasses import dataclass, field
import enum
import logging
from typing import Dict, Optional, Tuple, TYPE_CHECKING

from models.core import UpdateOption, Verdict
from models.messages import TpcAck, TpcBegin, TpcDecision, TpcPrepare, TpcResult, TpcVote
from services.acceptor import ReplicaService
from services.tracing import TraceKind

if TYPE_CHECKING:
    from services.replica import ReplicaNode

logger = logging.getLogger(__name__)

RESEND_FACTOR = 2  # resend unanswered prepares/decisions after this many max RTTs
FINISHED_WINDOW = 4096  # decided (txn, key) slots a participant remembers against late prepares

Participant = Tuple[str, str]  # (replica node id, key)


class TwoPCPhase(enum.Enum):
    PREPARING = "preparing"
    COMMITTING = "committing"
    ABORTING = "aborting"


@dataclass
class TwoPCState:
    txn_id: str
    coordinator: str
    client: str
    options: Dict[str, UpdateOption]
    participants: Tuple[Participant, ...]
    phase: TwoPCPhase = TwoPCPhase.PREPARING
    votes: Dict[Participant, bool] = field(default_factory=dict)
    acks: Dict[Participant, bool] = field(default_factory=dict)
    started_us: int = 0
    blocked_since: Optional[int] = None
    timer: object = None

    @property
    def unanimous(self) -> bool:
        return len(self.votes) == len(self.participants) and all(self.votes.values())


class TwoPCManager:
    """Transaction manager side, hosted on a storage node"""

    def __init__(self, node: "ReplicaNode"):
        self.node = node
        self.cluster = node.cluster
        self.active: Dict[str, TwoPCState] = {}

    def on_begin(self, msg: TpcBegin, src: str) -> None:
        if msg.txn_id in self.active:
            return
        options = {option.key: option for option in msg.options}
        participants = tuple(
            (node_id, key) for key in options for node_id in self.cluster.replicas_for(key)
        )
        state = TwoPCState(msg.txn_id, self.node.node_id, src, options, participants, started_us=self.node.now)
        self.active[msg.txn_id] = state
        logger.debug(f"{self.node.node_id}: preparing {msg.txn_id} on {len(participants)} participant(s)")
        for node_id, key in participants:
            self.node.send(node_id, TpcPrepare(msg.txn_id, options[key]))
        self._arm(state)

    def on_vote(self, msg: TpcVote, src: str) -> None:
        state = self.active.get(msg.txn_id)
        if state is None or state.phase is not TwoPCPhase.PREPARING:
            return
        state.votes[(src, msg.key)] = msg.yes
        if not msg.yes:
            self._decide(state, False)
        elif state.unanimous:
            self._decide(state, True)

    def _decide(self, state: TwoPCState, commit: bool) -> None:
        if state.blocked_since is not None:
            blocked = self.node.now - state.blocked_since
            logger.info(f"{self.node.node_id}: {state.txn_id} was blocked for {blocked}us")
            self.cluster.tracer.emit(TraceKind.TWOPC_BLOCKED, self.node.now, txn_id=state.txn_id,
                                     node=self.node.node_id, blocked_us=blocked)
            state.blocked_since = None
        state.phase = TwoPCPhase.COMMITTING if commit else TwoPCPhase.ABORTING
        for node_id, key in state.participants:
            self.node.send(node_id, TpcDecision(state.txn_id, key, commit))
        if not commit:
            self.node.send(state.client, TpcResult(state.txn_id, False))
        self._arm(state)

    def on_ack(self, msg: TpcAck, src: str) -> None:
        state = self.active.get(msg.txn_id)
        if state is None or state.phase is TwoPCPhase.PREPARING:
            return
        state.acks[(src, msg.key)] = True
        if len(state.acks) < len(state.participants):
            return
        if state.phase is TwoPCPhase.COMMITTING:
            self.node.send(state.client, TpcResult(state.txn_id, True))
        if state.timer is not None:
            state.timer.cancel()
        del self.active[state.txn_id]

    def _arm(self, state: TwoPCState) -> None:
        if state.timer is not None:
            state.timer.cancel()
        state.timer = self.node.schedule(RESEND_FACTOR * self.cluster.max_rtt_us, lambda: self._timeout(state))

    def _timeout(self, state: TwoPCState) -> None:
        state.timer = None
        if state.txn_id not in self.active:
            return
        if state.phase is TwoPCPhase.PREPARING:
            if self.cluster.settings.abort_2pc_on_timeout:
                logger.info(f"{self.node.node_id}: aborting {state.txn_id} after prepare timeout")
                self._decide(state, False)
                return
            if state.blocked_since is None:
                state.blocked_since = self.node.now
            for participant in state.participants:
                if participant not in state.votes:
                    node_id, key = participant
                    self.node.send(node_id, TpcPrepare(state.txn_id, state.options[key]))
        else:
            commit = state.phase is TwoPCPhase.COMMITTING
            for participant in state.participants:
                if participant not in state.acks:
                    node_id, key = participant
                    self.node.send(node_id, TpcDecision(state.txn_id, key, commit))
        self._arm(state)


class TwoPCParticipant:
    """No-wait per-record locks; a prepared record stays locked until the decision arrives"""

    def __init__(self, node: "ReplicaNode"):
        self.node = node
        self.locks: Dict[str, str] = {}
        self.prepared: Dict[Tuple[str, str], UpdateOption] = {}
        self.finished: Dict[Tuple[str, str], bool] = {}

    def on_prepare(self, msg: TpcPrepare, src: str) -> None:
        option = msg.option
        key = option.key
        slot = (msg.txn_id, key)
        if slot in self.finished:
            return
        holder = self.locks.get(key)
        if holder == msg.txn_id:
            yes = True
        elif holder is not None:
            yes = False
        else:
            rec = self.node.record(key)
            if option.commutative:
                after = option.apply_to(rec.current_value)
                yes = all(constraint.holds(after.get(constraint.attribute, 0)) for constraint in option.constraints)
            else:
                yes = ReplicaService.validate_option(rec, option) is Verdict.ACCEPT
            if yes:
                self.locks[key] = msg.txn_id
                self.prepared[slot] = option
        self.node.send(src, TpcVote(msg.txn_id, key, yes))

    def on_decision(self, msg: TpcDecision, src: str) -> None:
        slot = (msg.txn_id, msg.key)
        if slot not in self.finished:
            self.finished[slot] = True
            if len(self.finished) > FINISHED_WINDOW:
                del self.finished[next(iter(self.finished))]
            option = self.prepared.pop(slot, None)
            if self.locks.get(msg.key) == msg.txn_id:
                del self.locks[msg.key]
            if msg.commit and option is not None:
                rec = self.node.record(msg.key)
                version = ReplicaService.install_version(rec, option)
                self.node.after_execute(msg.key, [version])
        self.node.send(src, TpcAck(msg.txn_id, msg.key))
