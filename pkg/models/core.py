from dataclasses import dataclass, field
import enum
from typing import Any, Dict, Optional, Tuple

NIL_SERVER = -1


class Verdict(enum.Enum):
    ACCEPT = "accept"
    REJECT = "reject"


class Decision(enum.Enum):
    COMMIT = "commit"
    ABORT = "abort"


class _Tombstone:
    """Value of a deleted record"""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "TOMBSTONE"

    def __reduce__(self):
        return (_Tombstone, ())


TOMBSTONE = _Tombstone()


def is_absent(value: Any) -> bool:
    return value is None or value is TOMBSTONE


@dataclass(frozen=True, order=True)
class Ballot:
    """Ordered proposal id; the classic bit is the most significant field"""

    classic: bool
    number: int
    server_id: int = NIL_SERVER

    def __post_init__(self):
        if self.number < 0:
            raise ValueError("ballot number must be non-negative")

    @property
    def fast(self) -> bool:
        return not self.classic

    def next_classic(self, server_id: int) -> "Ballot":
        """Smallest classic ballot owned by server_id that outranks this one"""
        if not self.classic:
            return Ballot(True, 1, server_id)
        if server_id > self.server_id:
            return Ballot(True, self.number, server_id)
        return Ballot(True, self.number + 1, server_id)

    def __repr__(self) -> str:
        kind = "classic" if self.classic else "fast"
        server = "nil" if self.server_id == NIL_SERVER else str(self.server_id)
        return f"({kind},{self.number},{server})"


FAST_BALLOT = Ballot(False, 0, NIL_SERVER)


def ballot_compare(a: Ballot, b: Ballot) -> int:
    """-1, 0 or 1: classic over fast, then number, then server id"""
    return (a > b) - (a < b)


@dataclass(frozen=True)
class RoundMeta:
    start_round: int
    end_round: Optional[int]  # None: unbounded
    fast: bool
    ballot: Ballot

    def __post_init__(self):
        if self.start_round < 0:
            raise ValueError("start_round must be non-negative")
        if self.end_round is not None and self.end_round < self.start_round:
            raise ValueError("start_round must not exceed end_round")

    def covers(self, round_: int) -> bool:
        return self.start_round <= round_ and (self.end_round is None or round_ <= self.end_round)

    def overlaps(self, other: "RoundMeta") -> bool:
        if self.end_round is not None and self.end_round < other.start_round:
            return False
        if other.end_round is not None and other.end_round < self.start_round:
            return False
        return True


DEFAULT_META = RoundMeta(0, None, True, FAST_BALLOT)


@dataclass(frozen=True)
class QuorumSpec:
    n: int
    q_classic: int
    q_fast: int

    def is_valid(self) -> bool:
        return (
            2 * self.q_classic > self.n
            and 2 * self.q_fast + self.q_classic - 2 * self.n >= 1
            and self.q_fast + self.q_classic > self.n
            and self.q_classic <= self.n
            and self.q_fast <= self.n
        )


def quorum_sizes(n: int) -> QuorumSpec:
    if n < 1:
        raise ValueError("replica count must be at least 1")
    q_classic = n // 2 + 1
    for q_fast in range(q_classic, n + 1):
        spec = QuorumSpec(n, q_classic, q_fast)
        if spec.is_valid():
            return spec
    raise ValueError(f"no fast quorum for n={n}")


@dataclass(frozen=True)
class Constraint:
    """Domain bound on one numeric attribute"""

    attribute: str
    lower: Optional[int] = None
    upper: Optional[int] = None

    def holds(self, value) -> bool:
        if self.lower is not None and value < self.lower:
            return False
        if self.upper is not None and value > self.upper:
            return False
        return True


@dataclass(frozen=True, eq=False)
class UpdateOption:
    """A proposed change to one record, tagged with its transaction"""

    txn_id: str
    key: str
    writeset_keys: Tuple[str, ...]
    origin: str = ""
    v_read: Optional[int] = None
    v_write: Any = None
    deltas: Tuple[Tuple[str, int], ...] = ()
    constraints: Tuple[Constraint, ...] = ()
    commutative: bool = False
    remote_callback: Optional[str] = None
    placeholder: bool = False

    def __post_init__(self):
        if self.key not in self.writeset_keys:
            raise ValueError(f"writeset_keys of {self.txn_id} must contain {self.key}")

    @property
    def is_insert(self) -> bool:
        return not self.commutative and self.v_read is None

    def delta_for(self, attribute: str) -> int:
        for name, amount in self.deltas:
            if name == attribute:
                return amount
        return 0

    def constraint_for(self, attribute: str) -> Optional[Constraint]:
        for constraint in self.constraints:
            if constraint.attribute == attribute:
                return constraint
        return None

    def apply_to(self, value: Any) -> Any:
        """Value after this option commits on top of value"""
        if not self.commutative:
            return self.v_write
        updated: Dict[str, Any] = dict(value) if not is_absent(value) else {}
        for name, amount in self.deltas:
            updated[name] = updated.get(name, 0) + amount
        return updated

    def same_as(self, other: Optional["UpdateOption"]) -> bool:
        return other is not None and self.txn_id == other.txn_id and self.key == other.key

    def __repr__(self) -> str:
        if self.commutative:
            body = ",".join(f"{a}{d:+d}" for a, d in self.deltas)
        else:
            body = f"v{self.v_read}->{self.v_write!r}"
        return f"Option({self.txn_id}@{self.key}:{body})"


def physical_update(txn_id: str, key: str, writeset_keys, v_read: Optional[int], v_write: Any,
                    origin: str = "", remote_callback: Optional[str] = None) -> UpdateOption:
    return UpdateOption(txn_id, key, tuple(writeset_keys), origin, v_read, v_write,
                        remote_callback=remote_callback)


def delete_update(txn_id: str, key: str, writeset_keys, v_read: int, origin: str = "") -> UpdateOption:
    return UpdateOption(txn_id, key, tuple(writeset_keys), origin, v_read, TOMBSTONE)


def commutative_update(txn_id: str, key: str, writeset_keys, deltas: Dict[str, int],
                       constraints=(), origin: str = "",
                       remote_callback: Optional[str] = None) -> UpdateOption:
    return UpdateOption(
        txn_id, key, tuple(writeset_keys), origin,
        deltas=tuple(sorted(deltas.items())),
        constraints=tuple(constraints),
        commutative=True,
        remote_callback=remote_callback,
    )


@dataclass(frozen=True)
class Version:
    round: int
    value: Any
    committed_by: Tuple[str, ...] = ()

    @property
    def changed(self) -> bool:
        return bool(self.committed_by)


@dataclass(frozen=True)
class Vote:
    """One option inside a round value; verdict None means the acceptor evaluates it"""

    option: UpdateOption
    verdict: Optional[Verdict]
    primary: bool = True

    def evaluated(self, verdict: Verdict) -> "Vote":
        return Vote(self.option, verdict, self.primary)


@dataclass(frozen=True)
class ExecutedRound:
    """A decided and executed round, as shipped in catch-up and piggyback"""

    round: int
    votes: Tuple[Vote, ...]
    outcomes: Tuple[Tuple[str, Decision], ...]
    commutative: bool
    fast: bool = False
    ballot: Ballot = field(default=FAST_BALLOT)

    def outcome_of(self, txn_id: str) -> Optional[Decision]:
        for tid, decision in self.outcomes:
            if tid == txn_id:
                return decision
        return None

    @property
    def primary(self) -> Optional[Vote]:
        for vote in self.votes:
            if vote.primary:
                return vote
        return None
