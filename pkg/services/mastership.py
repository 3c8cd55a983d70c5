"""Per-record master: classic Paxos rounds, collision recovery, commutative round closing."""
from dataclasses import dataclass, field
import enum
import logging
from typing import Dict, List, Optional, Tuple, TYPE_CHECKING

from models.core import (
    FAST_BALLOT,
    Ballot,
    Decision,
    RoundMeta,
    UpdateOption,
    Verdict,
    Vote,
)
from models.messages import (
    CatchUpReply,
    Decided,
    MasterRequest,
    Nack,
    OptionLearned,
    Phase1a,
    Phase1b,
    Phase2a,
    Phase2b,
    Refusal,
    RefusalReason,
    RequestReason,
    RetryFast,
    RoundReport,
)
from models.record import AcceptedRound
from models.txn import FastPolicyState
from services.acceptor import ReplicaService
from services.collision import possibly_chosen, resolve_collision
from services.deadlock import resolve_deadlock
from services.fast_policy import PolicyEvent, fast_policy_step
from services.tracing import TraceKind

if TYPE_CHECKING:
    from services.replica import ReplicaNode

logger = logging.getLogger(__name__)

PHASE_TIMEOUT_FACTOR = 2  # resend Phase1a/Phase2a after this many max RTTs
MAX_FAST_RETRIES = 2
CONFLICT_REASONS = (RequestReason.CONFLICT, RequestReason.ESCROW, RequestReason.TIMEOUT)


class MasterPhase(enum.Enum):
    IDLE = "idle"
    PREPARING = "preparing"
    PROPOSING = "proposing"
    AWAITING_OUTCOME = "awaiting_outcome"


@dataclass
class WaitingOption:
    option: UpdateOption
    requesters: List[str]
    reason: RequestReason
    round_hint: int


@dataclass
class Proposal:
    round: int
    ballot: Ballot
    votes: Tuple[Vote, ...]
    commutative: bool
    closing: bool
    routine_close: bool = False
    responses: Dict[str, Phase2b] = field(default_factory=dict)

    @property
    def primary(self) -> Optional[Vote]:
        for vote in self.votes:
            if vote.primary:
                return vote
        return None

    def holds(self, txn_id: str) -> bool:
        return any(vote.option.txn_id == txn_id for vote in self.votes)

    def complete_at(self, reply: Phase2b) -> bool:
        for vote in self.votes:
            got = reply.vote_for(vote.option.txn_id)
            if got is None or got.verdict is not vote.verdict:
                return False
        return True


class _Retry:
    """Marker: the collected promises cannot settle the round yet"""


RETRY = _Retry()


class MasterSession:
    def __init__(self, node: "ReplicaNode", key: str):
        self.node = node
        self.key = key
        self.cluster = node.cluster
        settings = self.cluster.settings
        self.policy = FastPolicyState(gamma=settings.gamma, threshold=settings.fast_threshold)
        self.phase = MasterPhase.IDLE
        self.ballot: Optional[Ballot] = None
        self.range: Optional[RoundMeta] = None
        self.granted: Optional[RoundMeta] = None
        self.highest_seen: Ballot = FAST_BALLOT
        self.waiting: Dict[str, WaitingOption] = {}
        self.promises: Dict[str, Phase1b] = {}
        self.prepared_round: Optional[int] = None
        self.prepared_reports: List[Tuple[str, Optional[RoundReport]]] = []
        self.prepared_responders = 0
        self.proposal: Optional[Proposal] = None
        self.decided_votes: Dict[str, Tuple[int, Vote]] = {}
        self.conflict_rounds: Dict[int, bool] = {}
        self.retry_counts: Dict[str, int] = {}
        self.close_requested = False
        self.routine_close = False
        self.timer = None
        self.grace_timer = None
        self.backoff_timer = None
        self.settle_timer = None

    @property
    def rec(self):
        return self.node.record(self.key)

    @property
    def server_id(self) -> int:
        return self.node.server_id

    def _broadcast(self, msg) -> None:
        for node_id in self.cluster.replicas_for(self.key):
            self.node.send(node_id, msg)

    # Requests

    def on_request(self, msg: MasterRequest, src: str) -> None:
        option = msg.option
        txn_id = option.txn_id
        known = self._known_outcome(txn_id)
        if known is not None:
            self.node.send(msg.requester, known)
            return
        if self.proposal is not None and self.proposal.holds(txn_id) and self.phase is MasterPhase.PROPOSING:
            entry = self.waiting.setdefault(
                txn_id, WaitingOption(option, [], msg.reason, msg.round_hint))
            if msg.requester not in entry.requesters:
                entry.requesters.append(msg.requester)
            return

        entry = self.waiting.get(txn_id)
        if entry is None:
            self.waiting[txn_id] = WaitingOption(option, [msg.requester], msg.reason, msg.round_hint)
        else:
            if msg.requester not in entry.requesters:
                entry.requesters.append(msg.requester)
            if entry.option.placeholder and not option.placeholder:
                entry.option = option
            entry.reason = msg.reason
            entry.round_hint = max(entry.round_hint, msg.round_hint)

        if msg.reason in CONFLICT_REASONS:
            self._note_conflict(msg.round_hint)
        if self.phase is MasterPhase.AWAITING_OUTCOME:
            self._maybe_dual_learn()
        self._advance()

    def _known_outcome(self, txn_id: str) -> Optional[OptionLearned]:
        decided = self.decided_votes.get(txn_id)
        if decided is not None:
            round_, vote = decided
            return OptionLearned(self.key, round_, txn_id, vote.verdict, vote.primary, False)
        info = self.rec.learned.get(txn_id)
        if info is not None:
            return OptionLearned(self.key, info.round, txn_id, info.verdict, info.primary, info.fast)
        return None

    def _note_conflict(self, round_: int) -> None:
        if round_ in self.conflict_rounds or round_ < self.rec.next_round:
            return
        if not self.rec.meta_for(round_).fast:
            return
        self.conflict_rounds[round_] = True
        fast_policy_step(self.policy, PolicyEvent.CONFLICT)
        logger.info(f"{self.node.node_id}: collision on {self.key} round {round_}, "
                    f"{self.policy.classic_remaining} classic round(s) follow")
        self.cluster.tracer.emit(TraceKind.COLLISION, self.node.now, key=self.key, node=self.node.node_id,
                                 round=round_, classic_rounds=self.policy.classic_remaining)

    def _drop_settled(self) -> None:
        for txn_id in list(self.waiting):
            known = self._known_outcome(txn_id)
            if known is not None:
                for requester in self.waiting.pop(txn_id).requesters:
                    self.node.send(requester, known)

    # Round driving

    def holds(self, round_: int) -> Optional[Ballot]:
        """Ballot this master may use for round_ without a new Phase1, if any"""
        promise = self.rec.promise_for(round_)
        if not promise.classic or promise.server_id != self.server_id or promise < self.highest_seen:
            return None
        if promise.number == 0:
            return promise
        if self.granted is not None and self.granted.covers(round_) and self.granted.ballot == promise:
            return promise
        return None

    def _advance(self) -> None:
        if self.phase is not MasterPhase.IDLE or self.backoff_timer is not None:
            return
        self._drop_settled()
        if not self.waiting and not self.close_requested:
            return
        round_ = self.rec.next_round
        if not self.close_requested and self._retry_fast(round_):
            return
        ballot = self.holds(round_)
        if ballot is not None and not self.close_requested:
            reports = self.prepared_reports if self.prepared_round == round_ else []
            self._propose(round_, ballot, reports, self.prepared_responders if reports else 0)
        else:
            self._prepare(round_)

    def _retry_fast(self, round_: int) -> bool:
        if not self.rec.meta_for(round_).fast or not self.policy.fast:
            return False
        if self.rec.open_round() is not None:
            return False
        for txn_id, entry in self.waiting.items():
            if self.retry_counts.get(txn_id, 0) >= MAX_FAST_RETRIES:
                return False
            if entry.reason is RequestReason.CLOSED:
                continue
            if entry.reason is RequestReason.CLASSIC and entry.round_hint < round_:
                continue
            return False
        for txn_id, entry in self.waiting.items():
            self.retry_counts[txn_id] = self.retry_counts.get(txn_id, 0) + 1
            for requester in entry.requesters:
                self.node.send(requester, RetryFast(self.key, txn_id))
        logger.debug(f"{self.node.node_id}: {self.key} round {round_} is fast again, "
                     f"sent {len(self.waiting)} option(s) back")
        self.waiting.clear()
        return True

    # Phase 1

    def _prepare(self, round_: int) -> None:
        if round_ == 0 or self.close_requested:
            span = 1
        else:
            span = max(1, self.policy.classic_remaining)
        base = max(self.highest_seen, self.rec.promised)
        if self.ballot is not None:
            base = max(base, self.ballot)
        self.ballot = base.next_classic(self.server_id)
        self.range = RoundMeta(round_, round_ + span - 1, False, self.ballot)
        self.promises = {}
        self.granted = None
        self.phase = MasterPhase.PREPARING
        logger.info(f"{self.node.node_id}: acquiring {self.key} rounds {round_}..{round_ + span - 1} "
                    f"with {self.ballot}")
        self.cluster.tracer.emit(TraceKind.MASTERSHIP, self.node.now, key=self.key, node=self.node.node_id,
                                 start_round=round_, end_round=round_ + span - 1, ballot=repr(self.ballot))
        self._broadcast(Phase1a(self.key, self.ballot, self.range))
        self._arm_timer(self._prepare_timeout)

    def _prepare_timeout(self) -> None:
        self.timer = None
        if self.phase is not MasterPhase.PREPARING:
            return
        msg = Phase1a(self.key, self.ballot, self.range)
        for node_id in self.cluster.replicas_for(self.key):
            if node_id not in self.promises:
                self.node.send(node_id, msg)
        self._arm_timer(self._prepare_timeout)

    def on_phase1b(self, msg: Phase1b, src: str) -> None:
        if self.phase is not MasterPhase.PREPARING or msg.ballot != self.ballot:
            return
        self.promises[src] = msg
        count = len(self.promises)
        if count < self.cluster.quorum.q_classic:
            return
        if count < self.cluster.quorum.n and self._needs_all():
            if self.grace_timer is None:
                self.grace_timer = self.node.schedule(self.cluster.max_rtt_us, self._grace_expired)
            return
        self._prepared()

    def _needs_all(self) -> bool:
        if self.close_requested:
            return True
        start = self.range.start_round
        return any(
            report.commutative for promise in self.promises.values()
            for report in promise.reports if report.round == start
        )

    def _grace_expired(self) -> None:
        self.grace_timer = None
        if self.phase is MasterPhase.PREPARING and len(self.promises) >= self.cluster.quorum.q_classic:
            self._prepared()

    def _prepared(self) -> None:
        self._cancel_timers()
        self.granted = self.range
        rec = self.rec

        executed = {}
        for promise in self.promises.values():
            for round_info in promise.executed:
                executed.setdefault(round_info.round, round_info)
        versions = []
        while rec.next_round in executed:
            versions.extend(ReplicaService.apply_executed(rec, executed[rec.next_round]))
        round_ = rec.next_round
        for src in sorted(self.promises):
            behind = self.promises[src].next_round
            if behind < round_ and src != self.node.node_id:
                self.node.send(src, CatchUpReply(self.key, ReplicaService.executed_since(rec, behind)))

        self.prepared_round = round_
        self.prepared_reports = [(src, self.promises[src].report_for(round_)) for src in sorted(self.promises)]
        self.prepared_responders = len(self.promises)
        self.phase = MasterPhase.IDLE
        if versions:
            # executing may settle waiting options and re-enter _advance
            self.node.after_execute(self.key, versions)
            return
        if not self.granted.covers(round_):
            self._advance()
            return
        self._propose(round_, self.ballot, self.prepared_reports, self.prepared_responders)

    # Phase 2

    def _propose(self, round_: int, ballot: Ballot, reports, responders: int) -> None:
        reported = [report for _, report in reports if report is not None]
        if reported and any(report.commutative for report in reported):
            value = self._close_value(reports, responders)
        elif reported:
            value = self._physical_value(round_, reports)
        else:
            value = self._free_value(round_, ballot)

        if value is RETRY:
            logger.info(f"{self.node.node_id}: cannot settle {self.key} round {round_} from "
                        f"{responders} promise(s), retrying")
            self._abandon()
            return
        if value is None:
            self.phase = MasterPhase.IDLE
            self.close_requested = False
            self.routine_close = False
            return

        votes, commutative, closing = value
        self.prepared_round = None
        self.prepared_reports = []
        self.proposal = Proposal(round_, ballot, votes, commutative, closing,
                                 routine_close=self.routine_close and closing)
        self.phase = MasterPhase.PROPOSING
        self._send_phase2a()
        self._arm_timer(self._propose_timeout)

    def _send_phase2a(self, only_missing: bool = False) -> None:
        p = self.proposal
        msg = Phase2a(self.key, p.ballot, p.round, p.votes, p.commutative, p.closing,
                      previous=self.rec.history.get(p.round - 1))
        for node_id in self.cluster.replicas_for(self.key):
            reply = p.responses.get(node_id)
            if only_missing and reply is not None and p.complete_at(reply):
                continue
            self.node.send(node_id, msg)

    def _propose_timeout(self) -> None:
        self.timer = None
        if self.phase is not MasterPhase.PROPOSING:
            return
        self._send_phase2a(only_missing=True)
        self._arm_timer(self._propose_timeout)

    def _physical_value(self, round_: int, reports):
        quorum = self.cluster.quorum
        reported = [report for _, report in reports if report is not None]
        highest = max(report.ballot for report in reported)
        if highest.classic:
            votes = self._merged(report for report in reported if report.ballot == highest)
        else:
            by_identity = {}
            responses = []
            for _, report in reports:
                vote = next((v for v in report.votes if v.primary), None) if report is not None else None
                if vote is None:
                    responses.append((None, None))
                    continue
                identity = (vote.option.txn_id, vote.verdict)
                by_identity.setdefault(identity, vote)
                responses.append((report.ballot, identity))
            chosen = resolve_collision(responses, quorum)
            if chosen is None:
                losers = [vote.option for vote in by_identity.values()]
                return self._free_value(round_, self.ballot, losers)
            votes = (by_identity[chosen],)
            logger.info(f"{self.node.node_id}: {self.key} round {round_} must keep {chosen[0]} "
                        f"({chosen[1].value})")

        primary = next((vote for vote in votes if vote.primary), None)
        if primary is not None and primary.verdict is Verdict.ACCEPT:
            present = {vote.option.txn_id for vote in votes}
            extra: List[UpdateOption] = []
            for report in reported:
                for vote in report.votes:
                    if vote.option.txn_id not in present:
                        present.add(vote.option.txn_id)
                        extra.append(vote.option)
            for txn_id, entry in self.waiting.items():
                if txn_id not in present and not entry.option.commutative:
                    present.add(txn_id)
                    extra.append(entry.option)
            dual = resolve_deadlock(primary, extra)
            if dual is not None:
                votes = tuple(votes) + dual[1:]
        return tuple(votes), False, False

    @staticmethod
    def _merged(reports) -> Tuple[Vote, ...]:
        """Union of the votes of equal-ballot reports; extensions only ever add votes"""
        merged: List[Vote] = []
        seen = set()
        for report in sorted(reports, key=lambda r: -len(r.votes)):
            for vote in report.votes:
                if vote.option.txn_id not in seen:
                    seen.add(vote.option.txn_id)
                    merged.append(vote)
        return tuple(merged)

    def _free_value(self, round_: int, ballot: Ballot, losers=()):
        rec = self.rec
        waiting = [entry.option for entry in self.waiting.values()]
        if not waiting:
            return None
        if waiting[0].commutative:
            batch = AcceptedRound(round_, ballot, [], True, base=rec.current_value)
            for option in waiting:
                if not option.commutative:
                    continue
                verdict = ReplicaService.escrow_check(rec, option, batch, classic=True)
                batch.votes.append(Vote(option, verdict, True))
            return tuple(batch.votes), True, True

        first = next(option for option in waiting if not option.commutative)
        verdict = ReplicaService.validate_option(rec, first)
        votes = [Vote(first, verdict, True)]
        if verdict is Verdict.ACCEPT:
            others = [option for option in waiting if not option.commutative and option is not first]
            others += [option for option in losers if not option.same_as(first)]
            dual = resolve_deadlock(votes[0], others)
            if dual is not None:
                votes = list(dual)
        return tuple(votes), False, False

    def _close_value(self, reports, responders: int):
        rec = self.rec
        quorum = self.cluster.quorum
        reported = [report for _, report in reports if report is not None]
        highest = max(report.ballot for report in reported)
        if highest.classic:
            return self._merged(report for report in reported if report.ballot == highest), True, True

        counts: Dict[str, int] = {}
        first_vote: Dict[str, Vote] = {}
        for _, report in reports:
            if report is None or report.ballot != highest:
                continue
            for vote in report.votes:
                txn_id = vote.option.txn_id
                first_vote.setdefault(txn_id, vote)
                if vote.verdict is Verdict.ACCEPT:
                    counts[txn_id] = counts.get(txn_id, 0) + 1

        chosen: List[Vote] = []
        dropped: List[Vote] = []
        for txn_id, vote in first_vote.items():
            if possibly_chosen(counts.get(txn_id, 0), responders, quorum):
                chosen.append(Vote(vote.option, Verdict.ACCEPT, True))
            elif txn_id not in self.waiting:
                dropped.append(Vote(vote.option, Verdict.REJECT, False))

        value = rec.current_value
        for vote in chosen:
            if rec.outcomes.get(vote.option.txn_id) is not Decision.ABORT:
                value = vote.option.apply_to(value)
        broken = {}
        for vote in chosen:
            for constraint in vote.option.constraints:
                amount = value.get(constraint.attribute, 0) if isinstance(value, dict) else 0
                if not constraint.holds(amount):
                    broken[constraint] = amount
        if broken:
            if responders < quorum.n:
                return RETRY
            # every chosen option reached a fast quorum and may already be learned, so it stays
            for constraint, amount in broken.items():
                self.cluster.observer.violation(
                    f"{self.node.node_id}: closing {self.key} round {rec.next_round} breaks "
                    f"{constraint} ({amount}) with every replica reporting")
        if not chosen and not dropped:
            return self._free_value(rec.next_round, self.ballot)
        return tuple(chosen + dropped), True, True

    def on_phase2b(self, msg: Phase2b, src: str) -> None:
        p = self.proposal
        if self.phase is not MasterPhase.PROPOSING or p is None:
            return
        if msg.round != p.round or msg.ballot != p.ballot:
            return
        p.responses[src] = msg
        complete = sum(1 for reply in p.responses.values() if p.complete_at(reply))
        if complete >= self.cluster.quorum.q_classic:
            self._learned()

    def _learned(self) -> None:
        p = self.proposal
        self._cancel_timers()
        now = self.node.now
        for vote in p.votes:
            txn_id = vote.option.txn_id
            first_time = txn_id not in self.decided_votes
            self.decided_votes[txn_id] = (p.round, vote)
            entry = self.waiting.pop(txn_id, None)
            targets = list(entry.requesters) if entry is not None else []
            origin = vote.option.origin
            if first_time and origin and not vote.option.placeholder and origin not in targets:
                targets.append(origin)
            notice = OptionLearned(self.key, p.round, txn_id, vote.verdict, vote.primary, False)
            for target in targets:
                self.node.send(target, notice)
            if first_time:
                self.cluster.observer.on_learned(self.key, p.round, txn_id, vote.verdict)
                self.cluster.tracer.emit(TraceKind.LEARN, now, txn_id=txn_id, key=self.key,
                                         node=self.node.node_id, round=p.round, verdict=vote.verdict.value,
                                         primary=vote.primary, fast=False)

        primary = p.primary
        if p.commutative or (primary is not None and primary.verdict is Verdict.REJECT):
            self._broadcast(Decided(self.key, p.round, p.ballot, p.votes, p.commutative))
        self.phase = MasterPhase.AWAITING_OUTCOME
        if self.rec.next_round > p.round:
            self.on_executed(p.round)
            return
        self._maybe_dual_learn()

    def _maybe_dual_learn(self) -> None:
        p = self.proposal
        if self.phase is not MasterPhase.AWAITING_OUTCOME or p is None or p.commutative:
            return
        if self.rec.next_round != p.round:
            return
        primary = p.primary
        if primary is None or primary.verdict is not Verdict.ACCEPT:
            return
        newcomers = [entry.option for txn_id, entry in self.waiting.items()
                     if not entry.option.commutative and not p.holds(txn_id)]
        dual = resolve_deadlock(primary, newcomers)
        if dual is None:
            return
        p.votes = p.votes + dual[1:]
        p.responses = {}
        self.phase = MasterPhase.PROPOSING
        logger.info(f"{self.node.node_id}: dual-learn on {self.key} round {p.round}: keep "
                    f"{primary.option.txn_id}, reject {[vote.option.txn_id for vote in dual[1:]]}")
        self.cluster.tracer.emit(TraceKind.DUAL_LEARN, self.node.now, txn_id=primary.option.txn_id,
                                 key=self.key, node=self.node.node_id, round=p.round,
                                 rejected=[vote.option.txn_id for vote in dual[1:]])
        self._send_phase2a()
        self._arm_timer(self._propose_timeout)

    # Outcomes

    def on_executed(self, round_: int) -> None:
        p = self.proposal
        if p is not None and round_ >= p.round:
            event = PolicyEvent.FAST_SUCCESS if p.routine_close else PolicyEvent.CLASSIC_DONE
            fast_policy_step(self.policy, event)
            if p.closing:
                self.close_requested = False
                self.routine_close = False
            self.proposal = None
            self._cancel_timers()
            self.phase = MasterPhase.IDLE
        else:
            executed = self.rec.history.get(round_)
            if executed is not None and executed.fast:
                fast_policy_step(self.policy, PolicyEvent.FAST_SUCCESS)
        self._advance()

    def forget(self, txn_ids: List[str], horizon: int) -> None:
        """Drop what the master kept about transactions and rounds its record has let go"""
        for txn_id in txn_ids:
            self.retry_counts.pop(txn_id, None)
        self.decided_votes = {txn_id: decided for txn_id, decided in self.decided_votes.items()
                              if decided[0] >= horizon}
        self.conflict_rounds = {round_: seen for round_, seen in self.conflict_rounds.items() if round_ >= horizon}

    def on_nack(self, msg: Nack, src: str) -> None:
        if msg.promised > self.highest_seen:
            self.highest_seen = msg.promised
        if self.phase is MasterPhase.PREPARING and msg.ballot == self.ballot:
            self._abandon()
        elif (self.phase is MasterPhase.PROPOSING and self.proposal is not None
              and msg.ballot == self.proposal.ballot and msg.round == self.proposal.round):
            self._abandon()

    def on_refusal(self, msg: Refusal, src: str) -> None:
        if msg.reason is RefusalReason.EXECUTED and msg.executed is not None:
            rec = self.rec
            if msg.executed.round == rec.next_round:
                versions = ReplicaService.apply_executed(rec, msg.executed)
                self.node.after_execute(self.key, versions)

    def _abandon(self) -> None:
        self._cancel_timers()
        self.phase = MasterPhase.IDLE
        self.proposal = None
        self.granted = None
        self.prepared_round = None
        self.prepared_reports = []
        delay = int(self.node.network.rng.uniform(1.0, 2.0) * self.cluster.max_rtt_us)
        logger.debug(f"{self.node.node_id}: backing off {delay}us on {self.key}")
        self.backoff_timer = self.node.schedule(delay, self._backoff_done)

    def _backoff_done(self) -> None:
        self.backoff_timer = None
        self._advance()

    # Commutative round closing

    def maybe_close_drained(self) -> None:
        if self.settle_timer is not None or not self._drained():
            return
        self.settle_timer = self.node.schedule(self.cluster.settings.comm_close_settle_us, self._settled)

    def _drained(self) -> bool:
        rec = self.rec
        entry = rec.open_round()
        if entry is None or not entry.commutative or entry.closed or not entry.ballot.fast:
            return False
        if not entry.accepted_votes:
            return False
        return all(vote.option.txn_id in rec.outcomes for vote in entry.accepted_votes)

    def _settled(self) -> None:
        self.settle_timer = None
        if not self._drained() or self.close_requested:
            return
        logger.debug(f"{self.node.node_id}: closing drained round {self.rec.next_round} of {self.key}")
        self.close_requested = True
        self.routine_close = True
        self._advance()

    # Timers

    def _arm_timer(self, callback) -> None:
        if self.timer is not None:
            self.timer.cancel()
        self.timer = self.node.schedule(PHASE_TIMEOUT_FACTOR * self.cluster.max_rtt_us, callback)

    def _cancel_timers(self) -> None:
        for name in ("timer", "grace_timer"):
            timer = getattr(self, name)
            if timer is not None:
                timer.cancel()
                setattr(self, name, None)
