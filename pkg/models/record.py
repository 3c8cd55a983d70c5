from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Tuple

from models.core import (
    DEFAULT_META,
    FAST_BALLOT,
    Ballot,
    QuorumSpec,
    Decision,
    ExecutedRound,
    RoundMeta,
    Verdict,
    Version,
    Vote,
    is_absent,
)


class LogEntry(NamedTuple):
    time_us: int
    key: str
    round: int
    ballot: Optional[Ballot]
    txn_id: str
    kind: str  # seed | vote | learned | decided | executed | callback
    payload: Any
    verdict: Optional[str]


@dataclass
class AcceptedRound:
    """What one acceptor holds for one open round"""

    round: int
    ballot: Ballot
    votes: List[Vote] = field(default_factory=list)
    commutative: bool = False
    base: Any = None
    limits: Dict[Tuple[str, bool], Fraction] = field(default_factory=dict)  # (attribute, upper)
    closed: bool = False
    refused: Dict[str, bool] = field(default_factory=dict)

    def vote_for(self, txn_id: str) -> Optional[Vote]:
        for vote in self.votes:
            if vote.option.txn_id == txn_id:
                return vote
        return None

    @property
    def primary(self) -> Optional[Vote]:
        for vote in self.votes:
            if vote.primary:
                return vote
        return None

    @property
    def accepted_votes(self) -> List[Vote]:
        return [vote for vote in self.votes if vote.verdict is Verdict.ACCEPT]


@dataclass
class PrimaryDecision:
    vote: Vote
    decision: Decision
    fast: bool
    ballot: Ballot


@dataclass
class LearnedInfo:
    round: int
    verdict: Verdict
    primary: bool
    fast: bool


@dataclass
class ReplicaRecord:
    key: str
    default_meta: RoundMeta = DEFAULT_META
    insert_meta: Optional[RoundMeta] = None  # table-wide round 0 metadata
    quorum: QuorumSpec = QuorumSpec(1, 1, 1)
    promised: Ballot = FAST_BALLOT
    meta: List[RoundMeta] = field(default_factory=list)
    accepted: Dict[int, AcceptedRound] = field(default_factory=dict)
    executed: List[Version] = field(default_factory=list)
    pending_options: Dict[str, int] = field(default_factory=dict)
    outcomes: Dict[str, Decision] = field(default_factory=dict)
    decided_primary: Dict[int, PrimaryDecision] = field(default_factory=dict)
    history: Dict[int, ExecutedRound] = field(default_factory=dict)
    learned: Dict[str, LearnedInfo] = field(default_factory=dict)
    option_log: List[LogEntry] = field(default_factory=list)
    clock: Callable[[], int] = field(default=lambda: 0, repr=False)
    log_sink: Optional[Callable[[LogEntry], None]] = field(default=None, repr=False)
    keep_log: bool = True
    settled_below: int = 0  # per-transaction state of rounds below this has been dropped

    # Version chain

    @property
    def next_round(self) -> int:
        return len(self.executed)

    @property
    def current_value(self) -> Any:
        return self.executed[-1].value if self.executed else None

    @property
    def absent(self) -> bool:
        return is_absent(self.current_value)

    @property
    def current_version_id(self) -> Optional[int]:
        """Round of the version that produced the current value"""
        for version in reversed(self.executed):
            if version.changed:
                return version.round
        return None

    @property
    def last_round(self) -> int:
        return len(self.executed) - 1

    # Round metadata

    def meta_for(self, round_: int) -> RoundMeta:
        for meta in reversed(self.meta):
            if meta.covers(round_):
                return meta
        if round_ == 0 and self.insert_meta is not None:
            return self.insert_meta
        return self.default_meta

    def promise_for(self, round_: int) -> Ballot:
        return self.meta_for(round_).ballot

    def max_promise_over(self, rounds: RoundMeta) -> Ballot:
        highest = self.default_meta.ballot
        if rounds.start_round == 0 and self.insert_meta is not None:
            highest = max(highest, self.insert_meta.ballot)
        for meta in self.meta:
            if meta.overlaps(rounds):
                highest = max(highest, meta.ballot)
        return highest

    def install_meta(self, meta: RoundMeta) -> None:
        self.meta.append(meta)
        if meta.ballot > self.promised:
            self.promised = meta.ballot

    def prune_meta(self) -> None:
        floor = self.next_round
        self.meta = [m for m in self.meta if m.end_round is None or m.end_round >= floor]

    def prune_settled(self, keep_rounds: int) -> List[str]:
        """Forget transactions learned more than keep_rounds executed rounds ago; returns their ids"""
        if self.next_round - self.settled_below < 2 * keep_rounds:
            return []
        horizon = self.next_round - keep_rounds
        dropped = [txn_id for txn_id, info in self.learned.items() if info.round < horizon]
        for txn_id in dropped:
            del self.learned[txn_id]
            self.outcomes.pop(txn_id, None)
        self.settled_below = horizon
        return dropped

    # Votes

    def open_round(self) -> Optional[AcceptedRound]:
        return self.accepted.get(self.next_round)

    def vote_of(self, txn_id: str) -> Optional[Tuple[AcceptedRound, Vote]]:
        for round_ in sorted(self.accepted):
            entry = self.accepted[round_]
            vote = entry.vote_for(txn_id)
            if vote is not None:
                return entry, vote
        return None

    def log(self, kind: str, round_: int, txn_id: str = "", payload: Any = None,
            verdict: Optional[str] = None, ballot: Optional[Ballot] = None) -> None:
        if not self.keep_log and self.log_sink is None:
            return
        entry = LogEntry(self.clock(), self.key, round_, ballot, txn_id, kind, payload, verdict)
        if self.keep_log:
            self.option_log.append(entry)
        if self.log_sink is not None:
            self.log_sink(entry)
