from itertools import combinations, product

import pytest

from models.core import (
    Ballot,
    Constraint,
    RoundMeta,
    ballot_compare,
    commutative_update,
    physical_update,
    quorum_sizes,
)


def all_ballots():
    return [Ballot(classic, number, server) for classic, number, server in product((False, True), range(3), range(3))]


def test_ballot_order_is_total_and_transitive():
    ballots = all_ballots()
    for a, b in product(ballots, repeat=2):
        assert ballot_compare(a, b) == -ballot_compare(b, a)
        if ballot_compare(a, b) == 0:
            assert a == b
    for a, b, c in product(ballots, repeat=3):
        if a < b and b < c:
            assert a < c


def test_classic_ballot_outranks_every_fast_ballot():
    assert Ballot(True, 0, 0) > Ballot(False, 99, 4)
    assert Ballot(True, 1, 0) > Ballot(True, 0, 4)
    assert Ballot(True, 1, 2) > Ballot(True, 1, 1)


def test_ballot_number_must_be_non_negative():
    with pytest.raises(ValueError):
        Ballot(True, -1, 0)


def test_next_classic_outranks_current():
    assert Ballot(False, 7, 1).next_classic(3) == Ballot(True, 1, 3)
    assert Ballot(True, 3, 2).next_classic(4) == Ballot(True, 3, 4)
    assert Ballot(True, 3, 2).next_classic(1) == Ballot(True, 4, 1)
    for ballot in all_ballots():
        for server in range(3):
            assert ballot.next_classic(server) > ballot


@pytest.mark.parametrize("n,q_classic,q_fast", [(1, 1, 1), (3, 2, 3), (4, 3, 3), (5, 3, 4), (7, 4, 6)])
def test_quorum_sizes(n, q_classic, q_fast):
    spec = quorum_sizes(n)
    assert (spec.n, spec.q_classic, spec.q_fast) == (n, q_classic, q_fast)
    assert spec.is_valid()


def test_quorum_intersection_for_five_replicas():
    spec = quorum_sizes(5)
    nodes = range(5)
    classic = [set(c) for c in combinations(nodes, spec.q_classic)]
    fast = [set(f) for f in combinations(nodes, spec.q_fast)]
    for c in classic:
        for other in classic:
            assert c & other
        for f1 in fast:
            assert c & f1
            for f2 in fast:
                assert c & f1 & f2


def test_quorum_sizes_rejects_empty_cluster():
    with pytest.raises(ValueError):
        quorum_sizes(0)


def test_round_meta_ranges():
    meta = RoundMeta(3, 7, False, Ballot(True, 1, 0))
    assert meta.covers(3) and meta.covers(7)
    assert not meta.covers(2) and not meta.covers(8)
    assert meta.overlaps(RoundMeta(7, None, True, Ballot(False, 0)))
    assert not meta.overlaps(RoundMeta(8, 9, True, Ballot(False, 0)))
    assert RoundMeta(5, None, True, Ballot(False, 0)).covers(10 ** 9)
    with pytest.raises(ValueError):
        RoundMeta(4, 3, False, Ballot(True, 1, 0))


def test_option_must_name_its_key_in_the_write_set():
    with pytest.raises(ValueError):
        physical_update("t1", "item:1", ("item:2",), 0, {"stock": 1})


def test_commutative_option_applies_deltas():
    option = commutative_update("t1", "item:1", ("item:1",), {"stock": -3, "sold": 3},
                                [Constraint("stock", lower=0)])
    assert option.apply_to({"stock": 10, "name": "pen"}) == {"stock": 7, "sold": 3, "name": "pen"}
    assert option.apply_to(None) == {"stock": -3, "sold": 3}
    assert option.delta_for("stock") == -3
    assert option.delta_for("missing") == 0
    assert not option.is_insert


def test_insert_and_update_options():
    insert = physical_update("t1", "order:1", ("order:1",), None, {"lines": 2})
    update = physical_update("t2", "order:1", ("order:1",), 4, {"lines": 3})
    assert insert.is_insert
    assert not update.is_insert
    assert update.apply_to({"lines": 2}) == {"lines": 3}


def test_constraint_bounds():
    bound = Constraint("stock", lower=0, upper=10)
    assert bound.holds(0) and bound.holds(10)
    assert not bound.holds(-1) and not bound.holds(11)
