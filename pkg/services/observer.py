import logging
from typing import Any, Dict, Iterable, List, Optional, Tuple

from models.core import Decision, ExecutedRound, UpdateOption, Verdict, Version, is_absent
from utils.exceptions import InvariantViolation
from utils.option_log import replay_versions

logger = logging.getLogger(__name__)


def _attribute(value: Any, attribute: str):
    if is_absent(value):
        return 0
    return value.get(attribute, 0)


class Observer:
    """Omniscient safety checker fed by every node of a simulation"""

    def __init__(self):
        self.violations: List[str] = []
        self.learned: Dict[Tuple[str, int, str], Verdict] = {}
        self.outcomes: Dict[str, Decision] = {}
        self.canonical: Dict[str, Dict[int, Tuple[Any, Tuple[str, ...]]]] = {}
        self.version_ids: Dict[str, Dict[int, Optional[int]]] = {}
        self.committed_pending: Dict[str, Dict[str, UpdateOption]] = {}  # key -> txn -> commutative option
        self.qw_commits: Dict[Tuple[str, Tuple[int, str]], str] = {}
        self.lost_updates = 0
        self.reads = 0
        self.executions = 0

    @property
    def ok(self) -> bool:
        return not self.violations

    def violation(self, detail: str) -> None:
        logger.error(f"Invariant violation: {detail}")
        self.violations.append(detail)

    def raise_if_violated(self) -> None:
        if self.violations:
            raise InvariantViolation(f"{len(self.violations)} violation(s), first: {self.violations[0]}")

    # Learning and outcomes

    def on_learned(self, key: str, round_: int, txn_id: str, verdict: Verdict) -> None:
        slot = (key, round_, txn_id)
        known = self.learned.get(slot)
        if known is None:
            self.learned[slot] = verdict
        elif known is not verdict:
            self.violation(f"divergent learned verdict for {txn_id} on {key} round {round_}: "
                           f"{known.value} vs {verdict.value}")

    def on_outcome(self, txn_id: str, decision: Decision, options: Iterable[UpdateOption] = ()) -> None:
        known = self.outcomes.get(txn_id)
        if known is not None:
            if known is not decision:
                self.violation(f"divergent outcome for {txn_id}: {known.value} vs {decision.value}")
            return
        self.outcomes[txn_id] = decision
        if decision is not Decision.COMMIT:
            return
        for option in options:
            if option.commutative and not option.placeholder:
                self.committed_pending.setdefault(option.key, {})[txn_id] = option
                self._check_committed_bound(option.key)

    def _latest(self, key: str) -> Any:
        chain = self.canonical.get(key)
        if not chain:
            return None
        return chain[max(chain)][0]

    def _check_committed_bound(self, key: str) -> None:
        pending = self.committed_pending.get(key, {})
        base = self._latest(key)
        checked = set()
        for option in pending.values():
            for constraint in option.constraints:
                if constraint.attribute in checked:
                    continue
                checked.add(constraint.attribute)
                total = _attribute(base, constraint.attribute) + sum(
                    other.delta_for(constraint.attribute) for other in pending.values()
                )
                if not constraint.holds(total):
                    self.violation(f"committed value of {key}.{constraint.attribute} is {total}, "
                                   f"outside [{constraint.lower}, {constraint.upper}]")

    # Execution

    def on_execute(self, node: str, key: str, version: Version, executed: Optional[ExecutedRound]) -> None:
        self.executions += 1
        chain = self.canonical.setdefault(key, {})
        known = chain.get(version.round)
        if known is not None:
            if known[0] != version.value or known[1] != version.committed_by:
                self.violation(f"{node} executed {key} round {version.round} as {version.value!r} "
                               f"by {version.committed_by}, canonical is {known[0]!r} by {known[1]}")
            return

        ids = self.version_ids.setdefault(key, {})
        previous_value = chain.get(version.round - 1, (None, ()))[0]
        previous_id = ids.get(version.round - 1)
        if executed is not None and version.changed and not executed.commutative:
            option = executed.primary.option if executed.primary is not None else None
            if option is not None and option.txn_id != "seed":
                if option.is_insert:
                    if not is_absent(previous_value):
                        self.violation(f"insert {option.txn_id} on {key} committed over an existing record")
                elif option.v_read != previous_id:
                    self.violation(f"lost update on {key} round {version.round}: {option.txn_id} read "
                                   f"v{option.v_read}, current is v{previous_id}")
        chain[version.round] = (version.value, version.committed_by)
        ids[version.round] = version.round if version.changed else previous_id

        pending = self.committed_pending.get(key)
        if pending:
            for txn_id in version.committed_by:
                pending.pop(txn_id, None)
        if executed is not None and executed.commutative:
            for vote in executed.votes:
                if executed.outcome_of(vote.option.txn_id) is Decision.COMMIT:
                    for constraint in vote.option.constraints:
                        if not constraint.holds(_attribute(version.value, constraint.attribute)):
                            self.violation(f"{key} round {version.round} violates {constraint}")

    # Reads

    def on_read(self, node: str, key: str, value: Any, round_: int) -> None:
        self.reads += 1
        if round_ < 0:
            if value is not None:
                self.violation(f"{node} returned {value!r} for {key} with nothing executed")
            return
        known = self.canonical.get(key, {}).get(round_)
        if known is None:
            self.violation(f"{node} read {key} at round {round_} which was never executed")
        elif known[0] != value:
            self.violation(f"dirty read of {key} at {node}: {value!r}, committed {known[0]!r}")

    # Quorum-write baseline

    def on_qw_commit(self, key: str, base_stamp: Tuple[int, str], txn_id: str) -> None:
        """Two acknowledged writes built on the same base version: one of them is lost"""
        slot = (key, base_stamp)
        if slot in self.qw_commits and self.qw_commits[slot] != txn_id:
            self.lost_updates += 1
            logger.debug(f"lost update on {key}: {txn_id} and {self.qw_commits[slot]} share {base_stamp}")
        else:
            self.qw_commits[slot] = txn_id

    # Logs

    def check_logs(self, replicas) -> int:
        """Replay each replica's option log and compare it with the executed chain"""
        checked = 0
        for node in replicas:
            for key, rec in node.records.items():
                if not rec.keep_log:
                    continue
                replayed = replay_versions(rec.option_log)
                actual = [(version.round, version.value) for version in rec.executed]
                if replayed != actual:
                    self.violation(f"option log replay of {key} at {node.node_id} diverges "
                                   f"from its executed chain")
                checked += 1
        return checked
