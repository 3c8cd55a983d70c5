from dataclasses import dataclass, field
import enum
from typing import Any, Callable, Dict, List, Optional, Tuple

from models.core import UpdateOption, Verdict


class KeyStatus(enum.Enum):
    UNSENT = "unsent"
    PROPOSED = "proposed"
    PHASE2B_SEEN = "phase2b_seen"
    LEARNED_ACCEPT = "learned_accept"
    LEARNED_REJECT = "learned_reject"


class TxnOutcome(enum.Enum):
    PENDING = "pending"
    COMMITTED = "committed"
    ABORTED = "aborted"
    UNKNOWN = "unknown"


class Stage(enum.Enum):
    ON_FAILURE = "on_failure"
    ON_ACCEPT = "on_accept"
    ON_COMMIT = "on_commit"
    FINALLY = "finally"
    FINALLY_REMOTE = "finally_remote"


class RoundMode(enum.Enum):
    FAST = "fast"
    CLASSIC = "classic"


@dataclass
class Stages:
    """Callbacks fired relative to the transaction's SLO"""

    on_failure: Optional[Callable[["TxnHandle"], None]] = None
    on_accept: Optional[Callable[["TxnHandle"], None]] = None
    on_commit: Optional[Callable[["TxnHandle", bool], None]] = None
    finally_: Optional[Callable[["TxnHandle", bool, bool], None]] = None
    finally_remote: Optional[str] = None


@dataclass
class LearnedVerdict:
    round: int
    verdict: Verdict
    primary: bool
    fast: bool


@dataclass
class KeyProgress:
    """Coordinator-side state for one write-set option"""

    option: UpdateOption
    status: KeyStatus = KeyStatus.UNSENT
    read_round: Optional[int] = None
    votes: Dict[str, Tuple[int, Any, Verdict]] = field(default_factory=dict)  # replica -> (round, ballot, verdict)
    refusals: Dict[str, Any] = field(default_factory=dict)  # replica -> RefusalReason
    learned: Optional[LearnedVerdict] = None
    via_master: bool = False
    master_attempt: int = 0
    round_hint: int = 0
    learned_sent: bool = False
    acks: Dict[str, bool] = field(default_factory=dict)  # baseline replies per replica
    timer: Any = None


@dataclass
class TxnHandle:
    txn_id: str
    coordinator: str
    protocol: str
    start_us: int
    slo_deadline_us: int
    stages: Stages = field(default_factory=Stages)
    read_set: Dict[str, Optional[int]] = field(default_factory=dict)
    read_rounds: Dict[str, int] = field(default_factory=dict)
    read_values: Dict[str, Any] = field(default_factory=dict)
    read_sources: Dict[str, str] = field(default_factory=dict)
    record_cache: Dict[str, Any] = field(default_factory=dict)
    write_set: Dict[str, UpdateOption] = field(default_factory=dict)
    keys: Dict[str, KeyProgress] = field(default_factory=dict)
    outcome: TxnOutcome = TxnOutcome.PENDING
    stage_trace: List[Tuple[str, int]] = field(default_factory=list)
    stage_fired: Optional[Stage] = None
    finally_fired: bool = False
    propose_us: Optional[int] = None
    decide_us: Optional[int] = None
    msgs: int = 0
    conflicts: int = 0
    phase2b_seen: bool = False
    classic_keys: int = 0
    error: Optional[str] = None

    @property
    def per_key_status(self) -> Dict[str, KeyStatus]:
        return {key: progress.status for key, progress in self.keys.items()}

    @property
    def mode(self) -> RoundMode:
        return RoundMode.CLASSIC if self.classic_keys else RoundMode.FAST

    @property
    def decided(self) -> bool:
        return self.outcome in (TxnOutcome.COMMITTED, TxnOutcome.ABORTED)

    def record_stage(self, stage: Stage, time_us: int) -> None:
        self.stage_trace.append((stage.value, time_us))


@dataclass
class FastPolicyState:
    """Per-record choice between fast and classic rounds"""

    gamma: int = 10
    threshold: int = 4
    successes: int = 0
    classic_remaining: int = 0

    @property
    def fast(self) -> bool:
        return self.classic_remaining == 0
