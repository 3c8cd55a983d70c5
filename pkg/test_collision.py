from itertools import combinations_with_replacement

from models.core import Ballot, quorum_sizes
from services.collision import possibly_chosen, resolve_collision

QUORUM = quorum_sizes(5)


def fast(number: int) -> Ballot:
    return Ballot(False, number)


def test_majority_at_highest_fast_ballot_wins():
    responses = [(fast(4), "v2"), (fast(4), "v2"), (fast(3), "v1"), (fast(4), "v1")]
    assert resolve_collision(responses, QUORUM) == "v2"


def test_lower_ballot_votes_are_ignored():
    responses = [(fast(3), "v1"), (fast(3), "v1"), (fast(4), "v2")]
    assert resolve_collision(responses, QUORUM) == "v2"


def test_highest_classic_ballot_value_is_kept():
    responses = [(fast(9), "a"), (fast(9), "a"), (Ballot(True, 1, 2), "b")]
    assert resolve_collision(responses, QUORUM) == "b"


def test_nothing_accepted_leaves_a_free_choice():
    assert resolve_collision([(None, None)] * 3, QUORUM) is None


def test_split_vote_leaves_a_free_choice():
    responses = [(fast(1), "a"), (fast(1), "b"), (fast(1), "c")]
    assert resolve_collision(responses, QUORUM) is None


def test_possibly_chosen():
    assert possibly_chosen(2, 3, QUORUM)
    assert not possibly_chosen(1, 3, QUORUM)
    assert possibly_chosen(4, 5, QUORUM)
    assert not possibly_chosen(3, 5, QUORUM)


STATES = [(None, None)] + [(fast(b), v) for b in range(1, 5) for v in "abc"]


def test_a_possibly_chosen_value_is_always_proposed():
    for size in range(QUORUM.q_classic, QUORUM.n + 1):
        for responses in combinations_with_replacement(STATES, size):
            voted = [(b, v) for b, v in responses if b is not None]
            if not voted:
                assert resolve_collision(responses, QUORUM) is None
                continue
            highest = max(b for b, _ in voted)
            at_highest = [v for b, v in voted if b == highest]
            chosen = {v for v in at_highest if possibly_chosen(at_highest.count(v), len(responses), QUORUM)}
            assert len(chosen) <= 1
            if chosen:
                assert resolve_collision(responses, QUORUM) == chosen.pop()
