from typing import Hashable, List, Optional, Sequence, Tuple

from models.core import Ballot, QuorumSpec

Response = Tuple[Optional[Ballot], Optional[Hashable]]


def possibly_chosen(votes: int, responders: int, quorum: QuorumSpec) -> bool:
    """Could a fast quorum hold a value given votes among responders?"""
    return votes + (quorum.n - responders) >= quorum.q_fast


def resolve_collision(responses: Sequence[Response], quorum: QuorumSpec) -> Optional[Hashable]:
    """Value a new classic ballot must propose for a collided round, or None for free choice.

    responses holds one (ballot, value) pair per Phase1b responder, (None, None) when the
    responder accepted nothing in the round.
    """
    voted = [(ballot, value) for ballot, value in responses if ballot is not None and value is not None]
    if not voted:
        return None
    highest = max(ballot for ballot, _ in voted)
    at_highest = [value for ballot, value in voted if ballot == highest]
    if highest.classic:
        return at_highest[0]

    counts = {}
    for value in at_highest:
        counts[value] = counts.get(value, 0) + 1
    candidates: List[Hashable] = [
        value for value, count in counts.items() if possibly_chosen(count, len(at_highest), quorum)
    ]
    if len(candidates) > 1:
        candidates = [value for value in candidates if possibly_chosen(counts[value], len(responses), quorum)]
    if len(candidates) == 1:
        return candidates[0]
    return None
