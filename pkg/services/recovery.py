import logging
from typing import Dict, List, Optional, TYPE_CHECKING

from models.core import Decision, UpdateOption, Verdict
from models.messages import Learned, MasterRequest, OptionLearned, RequestReason, StatusQuery, StatusReply
from models.txn import LearnedVerdict
from services.tracing import TraceKind

if TYPE_CHECKING:
    from services.replica import ReplicaNode

logger = logging.getLogger(__name__)

QUERY_TIMEOUT_FACTOR = 2


class KeyRecovery:
    """What recovery has found out about one write-set key"""

    def __init__(self, key: str):
        self.key = key
        self.option: Optional[UpdateOption] = None
        self.replies: Dict[str, StatusReply] = {}
        self.learned: Optional[LearnedVerdict] = None
        self.master_attempt = 0
        self.timer = None


class RecoverySession:
    """Finishes a transaction whose coordinator went quiet, from replica state alone"""

    def __init__(self, node: "ReplicaNode", option: UpdateOption):
        self.node = node
        self.cluster = node.cluster
        self.txn_id = option.txn_id
        self.keys: Dict[str, KeyRecovery] = {key: KeyRecovery(key) for key in option.writeset_keys}
        self.keys[option.key].option = option
        self.decision: Optional[Decision] = None
        self.finished = False
        self.started_us = node.now
        self.timer = None

    def start(self) -> None:
        logger.info(f"{self.node.node_id}: recovering dangling transaction {self.txn_id} "
                    f"over {list(self.keys)}")
        for key in self.keys:
            for node_id in self.cluster.replicas_for(key):
                self.node.send(node_id, StatusQuery(key, self.txn_id))
        self.timer = self.node.schedule(QUERY_TIMEOUT_FACTOR * self.cluster.max_rtt_us, self._query_timeout)

    # Status collection

    def on_status(self, msg: StatusReply, src: str) -> None:
        state = self.keys.get(msg.key)
        if state is None or self.finished:
            return
        state.replies[src] = msg
        if (msg.vote is not None and not msg.vote.option.placeholder
                and (state.option is None or state.option.placeholder)):
            state.option = msg.vote.option
        if msg.decision is not None and self.decision is None:
            self.decision = msg.decision
        if state.learned is None:
            state.learned = self._learned_from(state)
        self._maybe_finish()

    def _learned_from(self, state: KeyRecovery) -> Optional[LearnedVerdict]:
        quorum = self.cluster.quorum
        groups: Dict[tuple, List[StatusReply]] = {}
        for reply in state.replies.values():
            if reply.vote is None or reply.round is None:
                continue
            if reply.learned:
                return LearnedVerdict(reply.round, reply.vote.verdict, reply.vote.primary, reply.fast)
            identity = (reply.round, reply.ballot, reply.vote.verdict, reply.vote.primary)
            groups.setdefault(identity, []).append(reply)
        for (round_, ballot, verdict, primary), replies in groups.items():
            needed = quorum.q_fast if ballot is None or ballot.fast else quorum.q_classic
            if len(replies) >= needed:
                return LearnedVerdict(round_, verdict, primary, ballot is None or ballot.fast)
        return None

    def _query_timeout(self) -> None:
        self.timer = None
        if self.finished:
            return
        for state in self.keys.values():
            if state.learned is None:
                self._ask_master(state)

    def _ask_master(self, state: KeyRecovery) -> None:
        option = state.option
        if option is None:
            writeset = tuple(self.keys)
            option = UpdateOption(self.txn_id, state.key, writeset, placeholder=True)
            state.option = option
        round_hint = max((reply.next_round for reply in state.replies.values()), default=0)
        candidates = self.cluster.master_candidates(state.key, round_hint)
        target = candidates[state.master_attempt % len(candidates)]
        state.master_attempt += 1
        self.node.send(target, MasterRequest(state.key, option, RequestReason.RECOVERY, round_hint,
                                             self.node.node_id))
        state.timer = self.node.schedule(
            int(self.cluster.settings.master_failover_factor * self.cluster.max_rtt_us),
            lambda: self._master_timeout(state.key),
        )

    def _master_timeout(self, key: str) -> None:
        state = self.keys[key]
        state.timer = None
        if not self.finished and state.learned is None:
            self._ask_master(state)

    def on_option_learned(self, msg: OptionLearned, src: str) -> None:
        state = self.keys.get(msg.key)
        if state is None or self.finished or state.learned is not None:
            return
        state.learned = LearnedVerdict(msg.round, msg.verdict, msg.primary, msg.fast)
        if state.timer is not None:
            state.timer.cancel()
            state.timer = None
        self._maybe_finish()

    # Outcome

    def _maybe_finish(self) -> None:
        if self.finished:
            return
        learned = [state.learned for state in self.keys.values()]
        if self.decision is None:
            if any(info is not None and info.verdict is Verdict.REJECT for info in learned):
                self.decision = Decision.ABORT
            elif all(info is not None and info.verdict is Verdict.ACCEPT for info in learned):
                self.decision = Decision.COMMIT
        if self.decision is None or any(info is None for info in learned):
            return
        self._finish()

    def _finish(self) -> None:
        self.finished = True
        if self.timer is not None:
            self.timer.cancel()
        decision = self.decision
        options = [state.option for state in self.keys.values() if state.option is not None]
        self.cluster.observer.on_outcome(self.txn_id, decision, options)
        for state in self.keys.values():
            info = state.learned
            self.cluster.observer.on_learned(state.key, info.round, self.txn_id, info.verdict)
            if state.option is None or (state.option.placeholder and info.verdict is Verdict.ACCEPT):
                continue
            notice = Learned(state.key, info.round, state.option, info.verdict, info.primary, decision, info.fast)
            for node_id in self.cluster.replicas_for(state.key):
                self.node.send(node_id, notice)
        elapsed = self.node.now - self.started_us
        logger.info(f"{self.node.node_id}: recovered {self.txn_id} as {decision.value} in {elapsed}us")
        self.cluster.tracer.emit(TraceKind.RECOVERY, self.node.now, txn_id=self.txn_id, node=self.node.node_id,
                                 outcome=decision.value, elapsed_us=elapsed)
        self.node.recovery_done(self.txn_id)

