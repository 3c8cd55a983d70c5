from fractions import Fraction
from itertools import combinations, combinations_with_replacement, permutations

import pytest

from models.core import Ballot, Constraint, Decision, QuorumSpec, Verdict, Vote, commutative_update, quorum_sizes
from models.messages import Phase2b, Refusal, RefusalReason
from models.record import AcceptedRound, ReplicaRecord
from services.acceptor import ReplicaService

KEY = "item:1"
STOCK = 4
NON_NEGATIVE = Constraint("stock", lower=0)


def stocked(stock: int = STOCK, quorum: QuorumSpec = None) -> ReplicaRecord:
    rec = ReplicaRecord(KEY, quorum=quorum or quorum_sizes(5))
    ReplicaService.seed(rec, {"stock": stock})
    return rec


def decrement(txn_id: str, amount: int = 1):
    return commutative_update(txn_id, KEY, (KEY,), {"stock": -amount}, [NON_NEGATIVE])


def accepted(reply) -> bool:
    return isinstance(reply, Phase2b)


@pytest.mark.parametrize("n,q_fast,base,limit", [
    (5, 4, 4, Fraction(4, 5)),
    (5, 5, 10, Fraction(0)),
    (5, 4, 100, Fraction(20)),
])
def test_compute_limit(n, q_fast, base, limit):
    assert ReplicaService.compute_limit(n, q_fast, base) == limit


def test_compute_limit_for_upper_bounds():
    assert ReplicaService.compute_limit(5, 4, 2, bound=10, upper=True) == Fraction(42, 5)


def test_escrow_accepts_three_unit_decrements_of_four():
    rec = stocked()
    verdicts = [accepted(ReplicaService.handle_fast_propose(rec, decrement(f"t{i}"))) for i in range(4)]
    assert verdicts == [True, True, True, False]
    assert rec.open_round().refused == {"t3": True}
    assert set(rec.pending_options) == {"t0", "t1", "t2"}


def test_refused_option_stays_refused():
    rec = stocked()
    for index in range(4):
        ReplicaService.handle_fast_propose(rec, decrement(f"t{index}"))
    reply = ReplicaService.handle_fast_propose(rec, decrement("t3"))
    assert isinstance(reply, Refusal)
    assert reply.reason is RefusalReason.ESCROW


def test_single_replica_uses_the_whole_stock():
    rec = stocked(quorum=quorum_sizes(1))
    verdicts = [accepted(ReplicaService.handle_fast_propose(rec, decrement(f"t{i}"))) for i in range(5)]
    assert verdicts == [True, True, True, True, False]


def test_increments_are_always_accepted():
    rec = stocked(0)
    option = commutative_update("t1", KEY, (KEY,), {"stock": 5}, [NON_NEGATIVE])
    assert ReplicaService.escrow_check(rec, option) is Verdict.ACCEPT


def test_committed_options_count_against_the_base():
    rec = stocked()
    for index in range(3):
        ReplicaService.handle_fast_propose(rec, decrement(f"t{index}"))
    ReplicaService.apply_learned(rec, 1, decrement("t0"), Decision.COMMIT)
    # 4 - 1 committed - 2 pending - 1 new
    assert ReplicaService.escrow_check(rec, decrement("t9")) is Verdict.REJECT


def test_aborted_options_release_their_share():
    rec = stocked()
    for index in range(3):
        ReplicaService.handle_fast_propose(rec, decrement(f"t{index}"))
    ReplicaService.apply_learned(rec, 1, decrement("t0"), Decision.ABORT)
    assert ReplicaService.escrow_check(rec, decrement("t9")) is Verdict.ACCEPT


def test_classic_round_checks_against_the_bound_itself():
    rec = stocked()
    entry = AcceptedRound(1, Ballot(True, 1, 0), [], True, base=rec.current_value)
    verdicts = []
    for index in range(5):
        option = decrement(f"t{index}")
        verdict = ReplicaService.escrow_check(rec, option, entry, classic=True)
        entry.votes.append(Vote(option, verdict))
        verdicts.append(verdict)
    assert verdicts == [Verdict.ACCEPT] * 4 + [Verdict.REJECT]


# Five replicas, a fast quorum of four, stock 4 and six competing unit decrements

OPTIONS = 6


def accepted_sets():
    """Every set of options a single replica can end up accepting, over all arrival orders"""
    seen = set()
    for order in permutations(range(OPTIONS)):
        rec = stocked()
        seen.add(frozenset(
            index for index in order
            if accepted(ReplicaService.handle_fast_propose(rec, decrement(f"t{index}")))
        ))
    return seen


def most_commits(replica_sets, q_fast: int = 4) -> int:
    """Largest number of options that some assignment of accepted sets to five replicas lets commit"""
    worst = 0
    for schedule in combinations_with_replacement(sorted(replica_sets, key=sorted), 5):
        votes = [sum(1 for chosen in schedule if index in chosen) for index in range(OPTIONS)]
        worst = max(worst, sum(1 for count in votes if count >= q_fast))
    return worst


def test_no_schedule_commits_more_than_the_stock():
    sets = accepted_sets()
    assert sets == {frozenset(c) for c in combinations(range(OPTIONS), 3)}
    assert most_commits(sets) <= STOCK


def test_without_demarcation_some_schedule_oversells(monkeypatch):
    monkeypatch.setattr(ReplicaService, "compute_limit",
                        staticmethod(lambda n, q_fast, base, bound=0, upper=False: Fraction(bound)))
    sets = accepted_sets()
    assert sets == {frozenset(c) for c in combinations(range(OPTIONS), 4)}
    assert most_commits(sets) > STOCK
