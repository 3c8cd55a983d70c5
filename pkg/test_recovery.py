import pytest

from conftest import HOME
from models.core import Constraint, Decision
from models.txn import TxnOutcome
from services.network import US_PER_S
from services.tracing import TraceKind

KEYS = ("item:1", "item:2")
FLOOR = [Constraint("stock", lower=0)]


def two_key_purchase(ctx):
    for key in KEYS:
        ctx.add(key, {"stock": -1}, FLOOR)


def outcomes_of(cluster, txn_id):
    return {
        node.record(key).outcomes.get(txn_id)
        for node in cluster.replicas.values()
        for key in KEYS
    }


# 10 proposals, then 10 Learned notices once decided
@pytest.mark.parametrize("crash_after", range(1, 21))
def test_replicas_finish_a_transaction_whose_coordinator_crashed(make_cluster, crash_after):
    cluster = make_cluster()
    for key in KEYS:
        cluster.seed(key, {"stock": 10})
    coordinator = cluster.add_coordinator(HOME)
    coordinator.arm_crash(crash_after)
    handle = coordinator.execute_transaction(two_key_purchase)
    cluster.run(30 * US_PER_S)

    outcomes = outcomes_of(cluster, handle.txn_id)
    assert len(outcomes) == 1
    decision = outcomes.pop()
    assert decision is not None
    if handle.outcome is TxnOutcome.COMMITTED:
        assert decision is Decision.COMMIT
    elif handle.outcome is TxnOutcome.ABORTED:
        assert decision is Decision.ABORT
    assert cluster.observer.ok


def test_lone_proposal_is_recovered_as_abort(make_cluster):
    cluster = make_cluster()
    for key in KEYS:
        cluster.seed(key, {"stock": 10})
    coordinator = cluster.add_coordinator(HOME)
    coordinator.arm_crash(1)
    handle = coordinator.execute_transaction(two_key_purchase)
    cluster.run(30 * US_PER_S)
    assert handle.outcome is TxnOutcome.PENDING
    assert outcomes_of(cluster, handle.txn_id) == {Decision.ABORT}
    recovered = cluster.tracer.first(TraceKind.RECOVERY, handle.txn_id)
    assert recovered is not None
    assert recovered.detail["outcome"] == "abort"
    for node in cluster.replicas.values():
        assert node.record("item:2").current_value == {"stock": 10}


def test_fully_proposed_transaction_is_recovered_as_commit(make_cluster):
    cluster = make_cluster()
    for key in KEYS:
        cluster.seed(key, {"stock": 10})
    coordinator = cluster.add_coordinator(HOME)
    coordinator.arm_crash(10)
    handle = coordinator.execute_transaction(two_key_purchase)
    cluster.run(30 * US_PER_S)
    assert not handle.decided
    assert outcomes_of(cluster, handle.txn_id) == {Decision.COMMIT}
    for node in cluster.replicas.values():
        assert node.record("item:1").current_value == {"stock": 9}
        assert node.record("item:2").current_value == {"stock": 9}
    assert cluster.observer.ok
