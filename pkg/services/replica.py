"""Storage node: acceptor, learner and (per record) master for every record it replicates."""
import logging
from typing import Any, Dict, List, Optional, Tuple, TYPE_CHECKING

from models.core import Decision, UpdateOption, Version, Vote
from models.messages import (
    CatchUpReply,
    CatchUpRequest,
    Decided,
    Learned,
    MasterRequest,
    Nack,
    OptionLearned,
    Phase1a,
    Phase1b,
    Phase2a,
    Phase2b,
    Propose,
    QwWrite,
    ReadReply,
    ReadRequest,
    Refusal,
    RefusalReason,
    StatusQuery,
    StatusReply,
    TpcAck,
    TpcBegin,
    TpcDecision,
    TpcPrepare,
    TpcVote,
)
from models.record import ReplicaRecord
from models.txn import Stage
from services.acceptor import CATCH_UP_BATCH, ReplicaService
from services.mastership import MasterSession
from services.network import SimNode, Timer
from services.quorum_write import QuorumWriteReplica
from services.recovery import RecoverySession
from services.tracing import TraceKind
from services.two_phase_commit import TwoPCManager, TwoPCParticipant

if TYPE_CHECKING:
    from services.cluster import Cluster

logger = logging.getLogger(__name__)


class ReplicaNode(SimNode):
    def __init__(self, node_id: str, dc: str, server_id: int, cluster: "Cluster"):
        super().__init__(node_id, dc, cluster.network)
        self.server_id = server_id
        self.cluster = cluster
        self.records: Dict[str, ReplicaRecord] = {}
        self.masters: Dict[str, MasterSession] = {}
        self.recoveries: Dict[str, RecoverySession] = {}
        self.dangling: Dict[Tuple[str, str], Timer] = {}
        self.dangling_fired: Dict[str, int] = {}
        self.parked: Dict[str, List[Tuple[Any, str]]] = {}
        self.catch_up_at: Dict[str, int] = {}
        self.callbacks_fired: Dict[str, str] = {}  # txn -> record whose execution ran its callback
        self.twopc = TwoPCManager(self)
        self.twopc_participant = TwoPCParticipant(self)
        self.quorum_writes = QuorumWriteReplica(self)
        self.handlers.update({
            ReadRequest: self.on_read,
            Propose: self.on_propose,
            Phase1a: self.on_phase1a,
            Phase2a: self.on_phase2a,
            Learned: self.on_learned,
            Decided: self.on_decided,
            CatchUpRequest: self.on_catch_up_request,
            CatchUpReply: self.on_catch_up_reply,
            StatusQuery: self.on_status_query,
            StatusReply: self.on_status_reply,
            OptionLearned: self.on_option_learned,
            MasterRequest: self.on_master_request,
            Phase1b: self._to_master("on_phase1b"),
            Phase2b: self._to_master("on_phase2b"),
            Nack: self._to_master("on_nack"),
            Refusal: self._to_master("on_refusal"),
            TpcBegin: self.twopc.on_begin,
            TpcVote: self.twopc.on_vote,
            TpcAck: self.twopc.on_ack,
            TpcPrepare: self.twopc_participant.on_prepare,
            TpcDecision: self.twopc_participant.on_decision,
            QwWrite: self.quorum_writes.on_write,
        })

    def record(self, key: str) -> ReplicaRecord:
        rec = self.records.get(key)
        if rec is None:
            cluster = self.cluster
            rec = ReplicaRecord(
                key,
                default_meta=cluster.default_meta_for(key),
                insert_meta=cluster.insert_meta_for(key),
                quorum=cluster.quorum,
                clock=lambda: self.network.now,
                log_sink=cluster.option_log_sink(self.node_id),
                keep_log=cluster.settings.keep_option_log,
            )
            self.records[key] = rec
        return rec

    def master_session(self, key: str) -> MasterSession:
        session = self.masters.get(key)
        if session is None:
            session = MasterSession(self, key)
            self.masters[key] = session
        return session

    def _to_master(self, method: str):
        def handle(msg, src: str) -> None:
            session = self.masters.get(msg.key)
            if session is None:
                logger.debug(f"{self.node_id}: {type(msg).__name__} for {msg.key} without a master session")
                return
            getattr(session, method)(msg, src)
        return handle

    def _peers(self, key: str) -> List[str]:
        return [node_id for node_id in self.cluster.replicas_for(key) if node_id != self.node_id]

    # Reads

    def on_read(self, msg: ReadRequest, src: str) -> None:
        rec = self.record(msg.key)
        value = rec.current_value
        self.send(src, ReadReply(msg.key, msg.request_id, value, rec.last_round, rec.current_version_id))
        if self.cluster.settings.observe_reads:
            self.cluster.observer.on_read(self.node_id, msg.key, value, rec.last_round)

    # Acceptor

    def on_propose(self, msg: Propose, src: str) -> None:
        rec = self.record(msg.key)
        reply = ReplicaService.handle_fast_propose(rec, msg.option, msg.read_round)
        if isinstance(reply, Refusal) and reply.reason is RefusalReason.BEHIND:
            self._park(msg.key, msg, src)
            self.catch_up(msg.key)
            return
        self.send(src, reply)
        if isinstance(reply, Phase2b):
            self._arm_dangling(rec, reply.votes)

    def on_phase1a(self, msg: Phase1a, src: str) -> None:
        rec = self.record(msg.key)
        self.send(src, ReplicaService.handle_phase1a(rec, msg.ballot, msg.rounds))

    def on_phase2a(self, msg: Phase2a, src: str) -> None:
        rec = self.record(msg.key)
        before = rec.next_round
        reply = ReplicaService.handle_phase2a(rec, msg)
        self._executed_since(msg.key, before)
        if isinstance(reply, Refusal) and reply.reason is RefusalReason.BEHIND:
            self._park(msg.key, msg, src)
            self.catch_up(msg.key, [src])
            return
        self.send(src, reply)
        if isinstance(reply, Phase2b):
            self._arm_dangling(rec, reply.votes)

    # Learner

    def on_learned(self, msg: Learned, src: str) -> None:
        rec = self.record(msg.key)
        option = msg.option
        if msg.round < rec.settled_below:
            return
        if msg.round > rec.next_round:
            self.catch_up(msg.key)
        before = rec.next_round
        ReplicaService.apply_learned(rec, msg.round, option, msg.decision, msg.verdict, msg.primary, msg.fast)
        self._cancel_dangling(msg.key, option.txn_id)
        self._maybe_callback(rec, option, msg.round, msg.decision)
        self._executed_since(msg.key, before)
        if option.commutative and self.node_id == self.cluster.master_for(msg.key, rec.next_round):
            self.master_session(msg.key).maybe_close_drained()

    def on_decided(self, msg: Decided, src: str) -> None:
        rec = self.record(msg.key)
        if msg.round > rec.next_round:
            self.catch_up(msg.key, [src])
        before = rec.next_round
        ReplicaService.apply_decided(rec, msg)
        self._executed_since(msg.key, before)

    def _executed_since(self, key: str, before: int) -> None:
        rec = self.record(key)
        if rec.next_round > before:
            self.after_execute(key, rec.executed[before:])

    def after_execute(self, key: str, versions: List[Version]) -> None:
        """Report new versions, settle their transactions and wake whatever waited on them"""
        if not versions:
            return
        rec = self.record(key)
        observer = self.cluster.observer
        for version in versions:
            executed = rec.history.get(version.round)
            observer.on_execute(self.node_id, key, version, executed)
            if executed is not None:
                for vote in executed.votes:
                    txn_id = vote.option.txn_id
                    decision = rec.outcomes.get(txn_id)
                    if decision is not None:
                        self._cancel_dangling(key, txn_id)
                        self._maybe_callback(rec, vote.option, version.round, decision)
        dropped = rec.prune_settled(self.cluster.settings.settled_rounds)
        for txn_id in dropped:
            if self.callbacks_fired.get(txn_id) == key:
                del self.callbacks_fired[txn_id]
            self.dangling_fired.pop(txn_id, None)
        if dropped and key in self.masters:
            self.masters[key].forget(dropped, rec.settled_below)
        for version in versions:
            session = self.masters.get(key)
            if session is None and self.node_id == self.cluster.master_for(key, version.round):
                session = self.master_session(key)
            if session is not None:
                session.on_executed(version.round)
        parked = self.parked.pop(key, [])
        for msg, src in parked:
            self.receive(msg, src)

    def _maybe_callback(self, rec: ReplicaRecord, option: UpdateOption, round_: int, decision: Decision) -> None:
        name = option.remote_callback
        if not name or option.placeholder or rec.key != option.writeset_keys[0]:
            return
        if option.txn_id in self.callbacks_fired:
            return
        self.callbacks_fired[option.txn_id] = rec.key
        rec.log("callback", round_, option.txn_id, name, decision.value)
        self.cluster.tracer.emit(TraceKind.STAGE, self.now, txn_id=option.txn_id, key=rec.key, node=self.node_id,
                                 stage=Stage.FINALLY_REMOTE.value, success=decision is Decision.COMMIT)
        self.cluster.invoke_callback(name, option.txn_id, decision is Decision.COMMIT, self.node_id)

    # Catch-up

    def _park(self, key: str, msg: Any, src: str) -> None:
        logger.debug(f"{self.node_id}: parking {type(msg).__name__} for {key} until caught up")
        self.parked.setdefault(key, []).append((msg, src))

    def catch_up(self, key: str, targets: Optional[List[str]] = None) -> None:
        """Ask peers for the executed rounds this replica is missing, at most once per max RTT"""
        last = self.catch_up_at.get(key)
        if last is not None and self.now - last < self.cluster.max_rtt_us:
            return
        self.catch_up_at[key] = self.now
        msg = CatchUpRequest(key, self.record(key).next_round)
        for node_id in targets or self._peers(key):
            if node_id != self.node_id:
                self.send(node_id, msg)
        self.schedule(self.cluster.max_rtt_us, lambda: self._catch_up_retry(key))

    def _catch_up_retry(self, key: str) -> None:
        if self.parked.get(key):
            self.catch_up(key)

    def on_catch_up_request(self, msg: CatchUpRequest, src: str) -> None:
        rounds = ReplicaService.executed_since(self.record(msg.key), msg.from_round)
        if rounds:
            self.send(src, CatchUpReply(msg.key, rounds))

    def on_catch_up_reply(self, msg: CatchUpReply, src: str) -> None:
        rec = self.record(msg.key)
        before = rec.next_round
        for executed in sorted(msg.rounds, key=lambda r: r.round):
            ReplicaService.apply_executed(rec, executed)
        self._executed_since(msg.key, before)
        if rec.next_round > before and len(msg.rounds) == CATCH_UP_BATCH:
            self.catch_up_at.pop(msg.key, None)
            self.catch_up(msg.key, [src])

    # Recovery

    def _arm_dangling(self, rec: ReplicaRecord, votes) -> None:
        delay = self.cluster.timeout_us(self.cluster.settings.learn_timeout_factor)
        for vote in votes:
            option = vote.option
            slot = (rec.key, option.txn_id)
            if option.placeholder or option.txn_id in rec.outcomes or slot in self.dangling:
                continue
            self.dangling[slot] = self.schedule(delay, lambda o=option: self._dangling_expired(o))

    def _cancel_dangling(self, key: str, txn_id: str) -> None:
        timer = self.dangling.pop((key, txn_id), None)
        if timer is not None:
            timer.cancel()

    def _dangling_expired(self, option: UpdateOption) -> None:
        txn_id = option.txn_id
        self.dangling.pop((option.key, txn_id), None)
        if txn_id in self.record(option.key).outcomes or txn_id in self.recoveries:
            return
        fired = self.dangling_fired.get(txn_id, 0) + 1
        self.dangling_fired[txn_id] = fired
        if fired == 1 and self.cluster.recovery_leader(txn_id) != self.node_id:
            # give the recovery leader the first attempt
            self._arm_dangling(self.record(option.key), [Vote(option, None)])
            return
        session = RecoverySession(self, option)
        self.recoveries[txn_id] = session
        session.start()

    def recovery_done(self, txn_id: str) -> None:
        self.recoveries.pop(txn_id, None)
        self.dangling_fired.pop(txn_id, None)

    def on_status_query(self, msg: StatusQuery, src: str) -> None:
        self.send(src, ReplicaService.status(self.record(msg.key), msg.txn_id))

    def on_status_reply(self, msg: StatusReply, src: str) -> None:
        session = self.recoveries.get(msg.txn_id)
        if session is not None:
            session.on_status(msg, src)

    def on_option_learned(self, msg: OptionLearned, src: str) -> None:
        session = self.recoveries.get(msg.txn_id)
        if session is not None:
            session.on_option_learned(msg, src)

    # Mastership

    def on_master_request(self, msg: MasterRequest, src: str) -> None:
        self.master_session(msg.key).on_request(msg, src)
