from conftest import HOME, one_way
from models.core import FAST_BALLOT, Ballot, Constraint, Verdict, Vote, commutative_update, physical_update
from models.messages import MasterRequest, RequestReason, RoundReport
from models.txn import TxnOutcome
from services.deadlock import resolve_deadlock
from services.mastership import RETRY
from services.tracing import TraceKind

KEY = "item:1"


def take(*keys):
    def body(ctx):
        rows = []
        for key in keys:
            rows.append((key, (yield ctx.read(key))))
        for key, row in rows:
            ctx.write(key, {**row, "stock": row["stock"] - 1})
    return body


def master_dc(cluster, key: str) -> str:
    return cluster.replicas[cluster.master_for(key, 1)].dc


def keys_with_distinct_masters(cluster):
    first = "item:0"
    second = next(f"item:{i}" for i in range(1, 100)
                  if master_dc(cluster, f"item:{i}") != master_dc(cluster, first))
    return first, second


def nearest_other_dc(cluster, dc: str) -> str:
    network = cluster.network
    return min((other for other in cluster.datacenters if other != dc),
               key=lambda other: network.one_way_us(dc, other))


# Dual-learn value

def test_deadlock_resolution_keeps_the_blocking_option():
    blocking = Vote(physical_update("t1", KEY, (KEY,), 0, {"stock": 9}), Verdict.ACCEPT)
    late = physical_update("t2", KEY, (KEY,), 0, {"stock": 8})
    later = physical_update("t3", KEY, (KEY,), 0, {"stock": 7})
    value = resolve_deadlock(blocking, [late, blocking.option, later])
    assert value[0] is blocking
    assert [(vote.option.txn_id, vote.verdict, vote.primary) for vote in value[1:]] == [
        ("t2", Verdict.REJECT, False),
        ("t3", Verdict.REJECT, False),
    ]


def test_deadlock_resolution_needs_an_accepted_blocker_and_newcomers():
    option = physical_update("t1", KEY, (KEY,), 0, {"stock": 9})
    late = physical_update("t2", KEY, (KEY,), 0, {"stock": 8})
    assert resolve_deadlock(Vote(option, Verdict.REJECT), [late]) is None
    assert resolve_deadlock(Vote(option, Verdict.ACCEPT), [option]) is None
    assert resolve_deadlock(Vote(option, Verdict.ACCEPT), []) is None


# Dual-learn in classic rounds

def test_blocked_round_rejects_the_newcomer(make_cluster):
    cluster = make_cluster(classic_preset=True)
    cluster.seed(KEY, {"stock": 10})
    home = master_dc(cluster, KEY)
    first = cluster.add_coordinator(home, protocol="geotxn-classic")
    second = cluster.add_coordinator(nearest_other_dc(cluster, home), protocol="geotxn-classic")
    winner = first.execute_transaction(take(KEY))
    loser = second.execute_transaction(take(KEY))
    cluster.run()

    assert winner.outcome is TxnOutcome.COMMITTED
    assert loser.outcome is TxnOutcome.ABORTED
    dual = cluster.tracer.of_kind(TraceKind.DUAL_LEARN)
    assert [(event.txn_id, event.detail["rejected"]) for event in dual] == [(winner.txn_id, [loser.txn_id])]
    for node in cluster.replicas.values():
        assert node.record(KEY).current_value == {"stock": 9}
    assert cluster.observer.ok


def test_crossing_transactions_both_abort(make_cluster):
    cluster = make_cluster(classic_preset=True)
    a, b = keys_with_distinct_masters(cluster)
    cluster.seed(a, {"stock": 10})
    cluster.seed(b, {"stock": 10})
    near_a = cluster.add_coordinator(master_dc(cluster, a), protocol="geotxn-classic")
    near_b = cluster.add_coordinator(master_dc(cluster, b), protocol="geotxn-classic")
    first = near_a.execute_transaction(take(a, b))
    second = near_b.execute_transaction(take(a, b))
    cluster.run()

    # each master keeps the option it saw first, so each transaction loses one key
    assert first.outcome is TxnOutcome.ABORTED
    assert second.outcome is TxnOutcome.ABORTED
    dual = cluster.tracer.of_kind(TraceKind.DUAL_LEARN)
    assert {(event.key, event.txn_id) for event in dual} == {(a, first.txn_id), (b, second.txn_id)}
    for node in cluster.replicas.values():
        assert node.record(a).current_value == {"stock": 10}
        assert node.record(b).current_value == {"stock": 10}
    assert cluster.observer.ok


# Mastership acquisition

def test_new_master_reproposes_the_accepted_option(make_cluster):
    cluster = make_cluster(classic_preset=True, master_failover_factor=1.5, learn_timeout_factor=20)
    key = next(f"item:{i}" for i in range(100) if master_dc(cluster, f"item:{i}") != HOME)
    cluster.seed(key, {"stock": 10})
    coordinator = cluster.add_coordinator(HOME, protocol="geotxn-classic")
    master = cluster.master_for(key, 1)
    successor = cluster.master_candidates(key, 1)[1]
    # the master dies right after sending its Phase2a
    arrival = 1000 + one_way(cluster, coordinator.node_id, master)
    cluster.network.crash_node(master, at=arrival + 1)

    handle = coordinator.execute_transaction(take(key))
    cluster.run()

    assert handle.outcome is TxnOutcome.COMMITTED
    acquired = [event for event in cluster.tracer.of_kind(TraceKind.MASTERSHIP) if event.node == successor]
    assert acquired and acquired[0].detail["start_round"] == 1
    learned = [event for event in cluster.tracer.of_kind(TraceKind.LEARN)
               if event.txn_id == handle.txn_id and event.node == successor]
    assert [(event.detail["round"], event.detail["verdict"]) for event in learned] == [(1, "accept")]
    for node_id, node in cluster.replicas.items():
        if node_id != master:
            assert node.record(key).current_value == {"stock": 9}
    assert cluster.observer.ok


def test_dueling_masters_lower_ballot_retries_above_the_higher(cluster):
    cluster.seed(KEY, {"stock": 10})
    client = cluster.add_coordinator(HOME)
    low_node, high_node = cluster.replicas["us-west/r0"], cluster.replicas["tokyo/r0"]
    low_ballot, high_ballot = Ballot(True, 1, low_node.server_id), Ballot(True, 1, high_node.server_id)
    assert low_ballot < high_ballot

    for node, txn_id in ((low_node, "t1"), (high_node, "t2")):
        option = physical_update(txn_id, KEY, (KEY,), 0, {"stock": 9})
        node.receive(MasterRequest(KEY, option, RequestReason.CONFLICT, 1, client.node_id), client.node_id)
    cluster.run(until_us=1_000_000)

    low = low_node.master_session(KEY)
    attempts = [event.detail["ballot"] for event in cluster.tracer.of_kind(TraceKind.MASTERSHIP)
                if event.node == low_node.node_id]
    assert attempts[0] == repr(low_ballot)
    assert len(attempts) >= 2
    assert low.highest_seen == high_ballot
    assert low.ballot > high_ballot
    high_learned = [event for event in cluster.tracer.of_kind(TraceKind.LEARN)
                    if event.node == high_node.node_id and event.txn_id == "t2"]
    assert high_learned and high_learned[0].detail["round"] == 1


# Closing commutative rounds

def test_closing_past_a_constraint_with_every_replica_reporting_is_a_violation(cluster):
    cluster.seed(KEY, {"stock": 1})
    floor = (Constraint("stock", lower=0),)
    votes = tuple(Vote(commutative_update(txn_id, KEY, (KEY,), {"stock": -1}, floor), Verdict.ACCEPT)
                  for txn_id in ("t1", "t2"))
    reports = [(node_id, RoundReport(1, FAST_BALLOT, votes, True)) for node_id in cluster.replica_ids]
    session = cluster.replicas[cluster.master_for(KEY, 1)].master_session(KEY)

    # a quorum short of everyone may still hide an abort, so the master asks again
    assert session._close_value(reports[:4], 4) is RETRY
    assert cluster.observer.ok

    chosen, commutative, closing = session._close_value(reports, len(reports))
    assert [(vote.option.txn_id, vote.verdict) for vote in chosen] == [("t1", Verdict.ACCEPT), ("t2", Verdict.ACCEPT)]
    assert commutative and closing
    assert len(cluster.observer.violations) == 1
    assert KEY in cluster.observer.violations[0]
