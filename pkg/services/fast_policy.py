import enum
import logging

from models.txn import FastPolicyState, RoundMode

logger = logging.getLogger(__name__)


class PolicyEvent(enum.Enum):
    FAST_SUCCESS = "fast-success"
    CONFLICT = "conflict"
    CLASSIC_DONE = "classic-done"


def fast_policy_step(state: FastPolicyState, event: PolicyEvent) -> RoundMode:
    """Advance the policy and return the mode of the next round to run"""
    if event is PolicyEvent.FAST_SUCCESS:
        state.successes += 1
    elif event is PolicyEvent.CONFLICT:
        # the conflicted round itself is always resolved classically
        if state.successes >= state.threshold:
            state.classic_remaining = 1
        else:
            state.classic_remaining = max(1, state.gamma)
        state.successes = 0
    elif event is PolicyEvent.CLASSIC_DONE:
        if state.classic_remaining > 0:
            state.classic_remaining -= 1
    return RoundMode.FAST if state.fast else RoundMode.CLASSIC
