"""Wire messages exchanged over the simulated network."""
from dataclasses import dataclass
import enum
from typing import Any, Optional, Tuple

from models.core import (
    Ballot,
    Decision,
    ExecutedRound,
    RoundMeta,
    UpdateOption,
    Verdict,
    Vote,
)


class RefusalReason(enum.Enum):
    CONFLICT = "conflict"  # another option holds the fast round
    ESCROW = "escrow"  # demarcation limit would be crossed
    CLASSIC = "classic"  # round is classic, go through the master
    CLOSED = "closed"  # commutative round is being closed
    BEHIND = "behind"  # replica has not executed the version that was read
    EXECUTED = "executed"  # round already executed at this replica


class RequestReason(enum.Enum):
    CLASSIC = "classic"
    CONFLICT = "conflict"
    ESCROW = "escrow"
    CLOSED = "closed"
    TIMEOUT = "timeout"
    RECOVERY = "recovery"


# Reads

@dataclass(frozen=True)
class ReadRequest:
    key: str
    request_id: int


@dataclass(frozen=True)
class ReadReply:
    key: str
    request_id: int
    value: Any
    round: int  # last executed round, -1 when nothing executed
    version_id: Optional[int]


# Fast path

@dataclass(frozen=True)
class Propose:
    key: str
    option: UpdateOption
    read_round: Optional[int] = None


@dataclass(frozen=True)
class Phase2b:
    key: str
    round: int
    ballot: Ballot
    votes: Tuple[Vote, ...]

    def vote_for(self, txn_id: str) -> Optional[Vote]:
        for vote in self.votes:
            if vote.option.txn_id == txn_id:
                return vote
        return None


@dataclass(frozen=True)
class Refusal:
    key: str
    round: int
    txn_id: str
    reason: RefusalReason
    meta: Optional[RoundMeta] = None
    executed: Optional[ExecutedRound] = None


# Master interaction

@dataclass(frozen=True)
class MasterRequest:
    key: str
    option: UpdateOption
    reason: RequestReason
    round_hint: int
    requester: str


@dataclass(frozen=True)
class OptionLearned:
    key: str
    round: int
    txn_id: str
    verdict: Verdict
    primary: bool
    fast: bool = False


@dataclass(frozen=True)
class RetryFast:
    key: str
    txn_id: str


@dataclass(frozen=True)
class Learned:
    key: str
    round: int
    option: UpdateOption
    verdict: Verdict
    primary: bool
    decision: Decision
    fast: bool = False


# Classic Paxos

@dataclass(frozen=True)
class Phase1a:
    key: str
    ballot: Ballot
    rounds: RoundMeta


@dataclass(frozen=True)
class RoundReport:
    round: int
    ballot: Ballot
    votes: Tuple[Vote, ...]
    commutative: bool
    closed: bool = False


@dataclass(frozen=True)
class Phase1b:
    key: str
    ballot: Ballot
    next_round: int
    reports: Tuple[RoundReport, ...]
    executed: Tuple[ExecutedRound, ...] = ()

    def report_for(self, round_: int) -> Optional[RoundReport]:
        for report in self.reports:
            if report.round == round_:
                return report
        return None


@dataclass(frozen=True)
class Nack:
    key: str
    ballot: Ballot
    promised: Ballot
    round: int


@dataclass(frozen=True)
class Phase2a:
    key: str
    ballot: Ballot
    round: int
    votes: Tuple[Vote, ...]
    commutative: bool = False
    closing: bool = False
    previous: Optional[ExecutedRound] = None


@dataclass(frozen=True)
class Decided:
    key: str
    round: int
    ballot: Ballot
    votes: Tuple[Vote, ...]
    commutative: bool


@dataclass(frozen=True)
class CatchUpRequest:
    key: str
    from_round: int


@dataclass(frozen=True)
class CatchUpReply:
    key: str
    rounds: Tuple[ExecutedRound, ...]


# Recovery

@dataclass(frozen=True)
class StatusQuery:
    key: str
    txn_id: str


@dataclass(frozen=True)
class StatusReply:
    key: str
    txn_id: str
    next_round: int
    round: Optional[int] = None
    ballot: Optional[Ballot] = None
    vote: Optional[Vote] = None
    decision: Optional[Decision] = None
    fast: bool = False
    learned: bool = False  # round, vote and fast describe the learned value


# Two-phase commit

@dataclass(frozen=True)
class TpcBegin:
    txn_id: str
    options: Tuple[UpdateOption, ...]


@dataclass(frozen=True)
class TpcPrepare:
    txn_id: str
    option: UpdateOption


@dataclass(frozen=True)
class TpcVote:
    txn_id: str
    key: str
    yes: bool


@dataclass(frozen=True)
class TpcDecision:
    txn_id: str
    key: str
    commit: bool


@dataclass(frozen=True)
class TpcAck:
    txn_id: str
    key: str


@dataclass(frozen=True)
class TpcResult:
    txn_id: str
    committed: bool


# Quorum writes

@dataclass(frozen=True)
class QwWrite:
    key: str
    value: Any
    stamp: Tuple[int, str]
    base_stamp: Tuple[int, str]
    request_id: int


@dataclass(frozen=True)
class QwAck:
    key: str
    request_id: int
