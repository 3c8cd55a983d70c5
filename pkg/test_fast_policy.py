from models.txn import FastPolicyState, RoundMode
from services.fast_policy import PolicyEvent, fast_policy_step


def test_starts_fast():
    assert FastPolicyState().fast


def test_late_conflict_costs_one_classic_round():
    state = FastPolicyState(gamma=10, threshold=4)
    for _ in range(6):
        assert fast_policy_step(state, PolicyEvent.FAST_SUCCESS) is RoundMode.FAST
    assert fast_policy_step(state, PolicyEvent.CONFLICT) is RoundMode.CLASSIC
    assert fast_policy_step(state, PolicyEvent.CLASSIC_DONE) is RoundMode.FAST


def test_early_conflict_runs_gamma_classic_rounds():
    state = FastPolicyState(gamma=10, threshold=4)
    fast_policy_step(state, PolicyEvent.FAST_SUCCESS)
    assert fast_policy_step(state, PolicyEvent.CONFLICT) is RoundMode.CLASSIC
    modes = [fast_policy_step(state, PolicyEvent.CLASSIC_DONE) for _ in range(10)]
    assert modes == [RoundMode.CLASSIC] * 9 + [RoundMode.FAST]


def test_conflict_resets_the_success_count():
    state = FastPolicyState(gamma=3, threshold=4)
    for _ in range(5):
        fast_policy_step(state, PolicyEvent.FAST_SUCCESS)
    fast_policy_step(state, PolicyEvent.CONFLICT)
    fast_policy_step(state, PolicyEvent.CLASSIC_DONE)
    assert state.successes == 0
    fast_policy_step(state, PolicyEvent.CONFLICT)
    assert state.classic_remaining == 3


def test_zero_gamma_still_resolves_the_conflict_classically():
    state = FastPolicyState(gamma=0)
    assert fast_policy_step(state, PolicyEvent.CONFLICT) is RoundMode.CLASSIC
    assert fast_policy_step(state, PolicyEvent.CLASSIC_DONE) is RoundMode.FAST


def test_classic_done_while_fast_is_a_no_op():
    state = FastPolicyState()
    assert fast_policy_step(state, PolicyEvent.CLASSIC_DONE) is RoundMode.FAST
    assert state.classic_remaining == 0
