import logging
from fractions import Fraction
from typing import Any, List, Optional, Union

from models.core import (
    Ballot,
    Decision,
    ExecutedRound,
    RoundMeta,
    UpdateOption,
    Verdict,
    Version,
    Vote,
    is_absent,
)
from models.messages import (
    Decided,
    Nack,
    Phase1b,
    Phase2a,
    Phase2b,
    Refusal,
    RefusalReason,
    RoundReport,
    StatusReply,
)
from models.record import AcceptedRound, LearnedInfo, PrimaryDecision, ReplicaRecord

logger = logging.getLogger(__name__)

CATCH_UP_BATCH = 64  # executed rounds shipped per Phase1b / catch-up reply


def _attribute(value: Any, attribute: str):
    if is_absent(value):
        return 0
    return value.get(attribute, 0)


class ReplicaService:
    """Acceptor and learner operations on one record"""

    @staticmethod
    def seed(rec: ReplicaRecord, value: Any) -> Version:
        """Install an initial committed version at the next round"""
        round_ = rec.next_round
        option = UpdateOption("seed", rec.key, (rec.key,), v_write=value)
        vote = Vote(option, Verdict.ACCEPT, True)
        version = Version(round_, value, ("seed",))
        rec.executed.append(version)
        rec.history[round_] = ExecutedRound(round_, (vote,), (("seed", Decision.COMMIT),), False)
        rec.log("seed", round_, "seed", value, Decision.COMMIT.value)
        rec.log("executed", round_, payload=value)
        return version

    @staticmethod
    def install_version(rec: ReplicaRecord, option: UpdateOption) -> Version:
        """Commit option at the next round without consensus (lock- and quorum-based baselines)"""
        round_ = rec.next_round
        txn_id = option.txn_id
        vote = Vote(option, Verdict.ACCEPT, True)
        value = option.apply_to(rec.current_value)
        version = Version(round_, value, (txn_id,))
        rec.outcomes[txn_id] = Decision.COMMIT
        rec.learned.setdefault(txn_id, LearnedInfo(round_, Verdict.ACCEPT, True, False))
        rec.executed.append(version)
        rec.history[round_] = ExecutedRound(round_, (vote,), ((txn_id, Decision.COMMIT),), option.commutative)
        rec.log("learned", round_, txn_id, vote, Decision.COMMIT.value)
        rec.log("decided", round_, payload=(vote,))
        rec.log("executed", round_, payload=value)
        return version

    # Paxos acceptor

    @staticmethod
    def handle_phase1a(rec: ReplicaRecord, ballot: Ballot, rounds: RoundMeta) -> Union[Phase1b, Nack]:
        """Promise the round range to ballot and report what was accepted in it"""
        highest = rec.max_promise_over(rounds)
        if ballot < highest:
            return Nack(rec.key, ballot, highest, rounds.start_round)
        if ballot > highest:
            rec.install_meta(RoundMeta(rounds.start_round, rounds.end_round, False, ballot))
            logger.debug(f"{rec.key}: promised {ballot} for rounds {rounds.start_round}..{rounds.end_round}")

        reports = []
        for round_ in sorted(rec.accepted):
            if round_ >= rec.next_round and rounds.covers(round_):
                entry = rec.accepted[round_]
                reports.append(RoundReport(round_, entry.ballot, tuple(entry.votes),
                                           entry.commutative, entry.closed))
        executed = tuple(
            rec.history[r]
            for r in range(rounds.start_round, min(rec.next_round, rounds.start_round + CATCH_UP_BATCH))
            if r in rec.history
        )
        return Phase1b(rec.key, ballot, rec.next_round, tuple(reports), executed)

    @staticmethod
    def handle_phase2a(rec: ReplicaRecord, msg: Phase2a) -> Union[Phase2b, Nack, Refusal]:
        if msg.previous is not None and msg.previous.round == rec.next_round:
            ReplicaService.apply_executed(rec, msg.previous)

        round_ = msg.round
        promise = rec.promise_for(round_)
        if msg.ballot < promise:
            return Nack(rec.key, msg.ballot, promise, round_)
        if round_ < rec.next_round:
            return Refusal(rec.key, round_, "", RefusalReason.EXECUTED, executed=rec.history.get(round_))
        if round_ > rec.next_round:
            return Refusal(rec.key, round_, "", RefusalReason.BEHIND)
        if msg.ballot > promise:
            rec.install_meta(RoundMeta(round_, round_, False, msg.ballot))

        entry = rec.accepted.get(round_)
        previous_votes: List[Vote] = []
        if entry is None or entry.ballot != msg.ballot:
            if entry is not None:
                previous_votes = entry.votes
            entry = AcceptedRound(round_, msg.ballot, [], msg.commutative, base=rec.current_value,
                                  closed=msg.closing)
            rec.accepted[round_] = entry

        for vote in msg.votes:
            if entry.vote_for(vote.option.txn_id) is not None:
                continue
            if vote.verdict is None:
                vote = vote.evaluated(ReplicaService._evaluate_in_round(rec, entry, vote))
            entry.votes.append(vote)
            rec.log("vote", round_, vote.option.txn_id, vote.option, vote.verdict.value, msg.ballot)

        for vote in previous_votes:
            if entry.vote_for(vote.option.txn_id) is None:
                rec.pending_options.pop(vote.option.txn_id, None)
        ReplicaService._track_pending(rec, entry)
        return Phase2b(rec.key, round_, msg.ballot, tuple(entry.votes))

    @staticmethod
    def handle_fast_propose(rec: ReplicaRecord, option: UpdateOption,
                            read_round: Optional[int] = None) -> Union[Phase2b, Refusal]:
        """Vote on an option sent straight from a coordinator"""
        txn_id = option.txn_id
        prior = rec.vote_of(txn_id)
        if prior is not None:
            entry, vote = prior
            return Phase2b(rec.key, entry.round, entry.ballot, (vote,))
        info = rec.learned.get(txn_id)
        if info is not None:
            return Refusal(rec.key, info.round, txn_id, RefusalReason.EXECUTED,
                           executed=rec.history.get(info.round))
        if read_round is not None and read_round >= rec.next_round:
            return Refusal(rec.key, rec.next_round, txn_id, RefusalReason.BEHIND)

        round_ = rec.next_round
        meta = rec.meta_for(round_)
        if not meta.fast:
            return Refusal(rec.key, round_, txn_id, RefusalReason.CLASSIC, meta=meta)

        entry = rec.accepted.get(round_)
        if not option.commutative:
            if entry is not None:
                reason = RefusalReason.CLOSED if entry.closed else RefusalReason.CONFLICT
                return Refusal(rec.key, round_, txn_id, reason)
            vote = Vote(option, ReplicaService.validate_option(rec, option), True)
            entry = AcceptedRound(round_, meta.ballot, [vote])
            rec.accepted[round_] = entry
        else:
            if entry is not None and (entry.closed or not entry.commutative):
                reason = RefusalReason.CLOSED if entry.closed else RefusalReason.CONFLICT
                return Refusal(rec.key, round_, txn_id, reason)
            if entry is None:
                entry = AcceptedRound(round_, meta.ballot, [], True, base=rec.current_value)
                rec.accepted[round_] = entry
            if txn_id in entry.refused:
                return Refusal(rec.key, round_, txn_id, RefusalReason.ESCROW)
            if ReplicaService.escrow_check(rec, option, entry) is Verdict.REJECT:
                entry.refused[txn_id] = True
                logger.debug(f"{rec.key}: escrow refused {txn_id} in round {round_}")
                return Refusal(rec.key, round_, txn_id, RefusalReason.ESCROW)
            vote = Vote(option, Verdict.ACCEPT, True)
            entry.votes.append(vote)

        rec.log("vote", round_, txn_id, option, vote.verdict.value, meta.ballot)
        ReplicaService._track_pending(rec, entry)
        return Phase2b(rec.key, round_, meta.ballot, (vote,))

    # Option evaluation

    @staticmethod
    def validate_option(rec: ReplicaRecord, option: UpdateOption) -> Verdict:
        if option.commutative:
            return ReplicaService.escrow_check(rec, option)
        if option.placeholder:
            return Verdict.REJECT
        if option.v_read is None:
            return Verdict.ACCEPT if rec.absent else Verdict.REJECT
        return Verdict.ACCEPT if rec.current_version_id == option.v_read else Verdict.REJECT

    @staticmethod
    def compute_limit(n: int, q_fast: int, base, bound=0, upper: bool = False) -> Fraction:
        """Per-replica demarcation limit for a round opened on base"""
        share = Fraction(n - q_fast, n)
        if upper:
            return Fraction(bound) - share * (Fraction(bound) - Fraction(base))
        return Fraction(bound) + share * (Fraction(base) - Fraction(bound))

    @staticmethod
    def _limit(rec: ReplicaRecord, entry: Optional[AcceptedRound], attribute: str, bound, upper: bool,
               base_value) -> Fraction:
        if entry is None:
            return ReplicaService.compute_limit(rec.quorum.n, rec.quorum.q_fast, base_value, bound, upper)
        cache_key = (attribute, upper)
        if cache_key not in entry.limits:
            entry.limits[cache_key] = ReplicaService.compute_limit(
                rec.quorum.n, rec.quorum.q_fast, base_value, bound, upper
            )
        return entry.limits[cache_key]

    @staticmethod
    def escrow_check(rec: ReplicaRecord, option: UpdateOption, entry: Optional[AcceptedRound] = None,
                     classic: bool = False) -> Verdict:
        """Accept only if every commit/abort outcome of the pending options stays within the limit"""
        if entry is None:
            entry = rec.open_round()
            if entry is not None and not entry.commutative:
                entry = None
        base = entry.base if entry is not None else rec.current_value
        votes = entry.votes if entry is not None else []

        for constraint in option.constraints:
            attribute = constraint.attribute
            x = _attribute(base, attribute)
            committed = 0
            pending_down = 0
            pending_up = 0
            for vote in votes:
                if vote.verdict is not Verdict.ACCEPT or vote.option.same_as(option):
                    continue
                delta = vote.option.delta_for(attribute)
                outcome = rec.outcomes.get(vote.option.txn_id)
                if outcome is Decision.COMMIT:
                    committed += delta
                elif outcome is Decision.ABORT:
                    continue
                elif delta < 0:
                    pending_down += delta
                else:
                    pending_up += delta
            delta_new = option.delta_for(attribute)

            if constraint.lower is not None:
                worst = x + committed + pending_down + min(delta_new, 0)
                limit = Fraction(constraint.lower) if classic else ReplicaService._limit(
                    rec, entry, attribute, constraint.lower, False, x)
                if worst < limit:
                    return Verdict.REJECT
            if constraint.upper is not None:
                worst = x + committed + pending_up + max(delta_new, 0)
                limit = Fraction(constraint.upper) if classic else ReplicaService._limit(
                    rec, entry, attribute, constraint.upper, True, x)
                if worst > limit:
                    return Verdict.REJECT
        return Verdict.ACCEPT

    @staticmethod
    def _evaluate_in_round(rec: ReplicaRecord, entry: AcceptedRound, vote: Vote) -> Verdict:
        option = vote.option
        if option.commutative:
            return ReplicaService.escrow_check(rec, option, entry, classic=True)
        blocking = entry.primary
        if blocking is not None and blocking.verdict is Verdict.ACCEPT:
            return Verdict.REJECT
        return ReplicaService.validate_option(rec, option)

    @staticmethod
    def _track_pending(rec: ReplicaRecord, entry: AcceptedRound) -> None:
        for vote in entry.votes:
            txn_id = vote.option.txn_id
            if vote.verdict is Verdict.ACCEPT and (vote.primary or entry.commutative):
                if txn_id not in rec.outcomes:
                    rec.pending_options[txn_id] = entry.round
            else:
                rec.pending_options.pop(txn_id, None)

    # Learning and execution

    @staticmethod
    def apply_learned(rec: ReplicaRecord, round_: int, option: UpdateOption, decision: Decision,
                      verdict: Optional[Verdict] = None, primary: bool = True, fast: bool = False,
                      ballot: Optional[Ballot] = None) -> List[Version]:
        """Record a transaction outcome for this record and execute whatever became ready"""
        txn_id = option.txn_id
        if txn_id in rec.outcomes or round_ < rec.settled_below:
            logger.debug(f"{rec.key}: duplicate outcome for {txn_id}")
            return []
        if verdict is None:
            verdict = Verdict.ACCEPT if decision is Decision.COMMIT else Verdict.REJECT
        rec.outcomes[txn_id] = decision
        rec.learned.setdefault(txn_id, LearnedInfo(round_, verdict, primary, fast))
        rec.pending_options.pop(txn_id, None)
        rec.log("learned", round_, txn_id, Vote(option, verdict, primary), decision.value, ballot)
        if round_ < rec.next_round:
            return []
        if not option.commutative and primary:
            rec.decided_primary[round_] = PrimaryDecision(
                Vote(option, verdict, True), decision, fast, ballot or rec.promise_for(round_)
            )
        return ReplicaService.execute_ready(rec)

    @staticmethod
    def apply_decided(rec: ReplicaRecord, msg: Decided) -> List[Version]:
        """Install a master-decided round value"""
        round_ = msg.round
        if round_ < rec.next_round:
            return []
        if msg.commutative:
            entry = AcceptedRound(round_, msg.ballot, list(msg.votes), True,
                                  base=rec.current_value, closed=True)
            rec.accepted[round_] = entry
            for vote in msg.votes:
                if vote.verdict is not Verdict.ACCEPT:
                    rec.pending_options.pop(vote.option.txn_id, None)
            ReplicaService._track_pending(rec, entry)
        else:
            for vote in msg.votes:
                txn_id = vote.option.txn_id
                if vote.verdict is Verdict.REJECT and txn_id not in rec.outcomes:
                    rec.outcomes[txn_id] = Decision.ABORT
                    rec.learned.setdefault(txn_id, LearnedInfo(round_, vote.verdict, vote.primary, False))
                    rec.pending_options.pop(txn_id, None)
                if vote.primary:
                    rec.decided_primary[round_] = PrimaryDecision(vote, Decision.ABORT, False, msg.ballot)
        rec.log("decided", round_, payload=tuple(msg.votes), ballot=msg.ballot)
        return ReplicaService.execute_ready(rec)

    @staticmethod
    def apply_executed(rec: ReplicaRecord, executed: ExecutedRound) -> List[Version]:
        """Apply a round executed elsewhere (catch-up or piggyback)"""
        round_ = executed.round
        if round_ != rec.next_round:
            return []
        for vote in executed.votes:
            txn_id = vote.option.txn_id
            decision = executed.outcome_of(txn_id)
            if decision is None and vote.verdict is Verdict.REJECT:
                decision = Decision.ABORT
            if decision is None:
                continue
            if txn_id not in rec.outcomes:
                rec.outcomes[txn_id] = decision
                rec.log("learned", round_, txn_id, vote, decision.value, executed.ballot)
            rec.learned.setdefault(txn_id, LearnedInfo(round_, vote.verdict, vote.primary, executed.fast))
            rec.pending_options.pop(txn_id, None)
        if executed.commutative:
            rec.accepted[round_] = AcceptedRound(round_, executed.ballot, list(executed.votes), True,
                                                 base=rec.current_value, closed=True)
        else:
            primary = executed.primary
            decision = executed.outcome_of(primary.option.txn_id) or Decision.ABORT
            rec.decided_primary[round_] = PrimaryDecision(primary, decision, executed.fast, executed.ballot)
        rec.log("decided", round_, payload=tuple(executed.votes), ballot=executed.ballot)
        return ReplicaService.execute_ready(rec)

    @staticmethod
    def execute_ready(rec: ReplicaRecord) -> List[Version]:
        versions: List[Version] = []
        while True:
            round_ = rec.next_round
            decided = rec.decided_primary.get(round_)
            entry = rec.accepted.get(round_)
            if decided is not None:
                vote = decided.vote
                txn_id = vote.option.txn_id
                if vote.verdict is Verdict.ACCEPT and decided.decision is Decision.COMMIT:
                    value = vote.option.apply_to(rec.current_value)
                    committed_by = (txn_id,)
                else:
                    value = rec.current_value
                    committed_by = ()
                executed = ExecutedRound(round_, (vote,), ((txn_id, decided.decision),), False,
                                         decided.fast, decided.ballot)
            elif entry is not None and entry.commutative and entry.closed:
                accepted = entry.accepted_votes
                if any(vote.option.txn_id not in rec.outcomes for vote in accepted):
                    break
                value = rec.current_value
                committed = []
                for vote in accepted:
                    if rec.outcomes[vote.option.txn_id] is Decision.COMMIT:
                        value = vote.option.apply_to(value)
                        committed.append(vote.option.txn_id)
                committed_by = tuple(committed)
                executed = ExecutedRound(
                    round_, tuple(entry.votes),
                    tuple((vote.option.txn_id, rec.outcomes[vote.option.txn_id]) for vote in accepted),
                    True, entry.ballot.fast, entry.ballot,
                )
            else:
                break

            version = Version(round_, value, committed_by)
            rec.executed.append(version)
            rec.history[round_] = executed
            rec.accepted.pop(round_, None)
            rec.decided_primary.pop(round_, None)
            for txn_id in [t for t, r in rec.pending_options.items() if r == round_]:
                del rec.pending_options[txn_id]
            for vote in executed.votes:
                info = rec.learned.get(vote.option.txn_id)
                if info is None:
                    rec.learned[vote.option.txn_id] = LearnedInfo(round_, vote.verdict, vote.primary, executed.fast)
            rec.prune_meta()
            # the executed round value goes to the log whichever path closed the round
            rec.log("decided", round_, payload=tuple(executed.votes), ballot=executed.ballot)
            rec.log("executed", round_, payload=value)
            versions.append(version)
        return versions

    # Queries

    @staticmethod
    def status(rec: ReplicaRecord, txn_id: str) -> StatusReply:
        """Everything this replica knows about a transaction's option"""
        decision = rec.outcomes.get(txn_id)
        info = rec.learned.get(txn_id)
        prior = rec.vote_of(txn_id)
        if info is None:
            if prior is None:
                return StatusReply(rec.key, txn_id, rec.next_round, decision=decision)
            entry, vote = prior
            return StatusReply(rec.key, txn_id, rec.next_round, entry.round, entry.ballot, vote,
                               decision, entry.ballot.fast)

        vote, ballot = None, None
        if prior is not None and prior[0].round == info.round:
            vote, ballot = prior[1], prior[0].ballot
        decided = rec.decided_primary.get(info.round)
        if vote is None and decided is not None and decided.vote.option.txn_id == txn_id:
            vote, ballot = decided.vote, decided.ballot
        executed = rec.history.get(info.round)
        if vote is None and executed is not None:
            vote = next((v for v in executed.votes if v.option.txn_id == txn_id), None)
            ballot = executed.ballot
        if vote is not None:
            vote = Vote(vote.option, info.verdict, info.primary)
        return StatusReply(rec.key, txn_id, rec.next_round, info.round, ballot, vote, decision, info.fast,
                           learned=True)

    @staticmethod
    def executed_since(rec: ReplicaRecord, from_round: int) -> tuple:
        stop = min(rec.next_round, from_round + CATCH_UP_BATCH)
        return tuple(rec.history[r] for r in range(from_round, stop) if r in rec.history)
