import logging
from typing import Optional, Sequence, Tuple

from models.core import UpdateOption, Verdict, Vote

logger = logging.getLogger(__name__)


def resolve_deadlock(blocking: Vote, competing: Sequence[UpdateOption]) -> Optional[Tuple[Vote, ...]]:
    """Round value that learns the blocking option together with every newcomer rejected"""
    if blocking.verdict is not Verdict.ACCEPT:
        return None
    newcomers = [option for option in competing if not option.same_as(blocking.option)]
    if not newcomers:
        return None
    logger.debug(
        f"dual-learn on {blocking.option.key}: keep {blocking.option.txn_id}, "
        f"reject {[option.txn_id for option in newcomers]}"
    )
    return (blocking,) + tuple(Vote(option, Verdict.REJECT, False) for option in newcomers)
