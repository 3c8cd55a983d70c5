import os

from conftest import HOME
from models.core import (
    Ballot,
    Constraint,
    Decision,
    RoundMeta,
    Verdict,
    Vote,
    commutative_update,
    physical_update,
    quorum_sizes,
)
from models.messages import Nack, Phase1b, Phase2a, Phase2b, Refusal, RefusalReason
from models.record import ReplicaRecord
from services.acceptor import ReplicaService
from services.network import US_PER_S
from utils.option_log import read_option_log, replay_versions

KEY = "item:1"


def seeded(stock: int = 10) -> ReplicaRecord:
    rec = ReplicaRecord(KEY, quorum=quorum_sizes(5))
    ReplicaService.seed(rec, {"stock": stock})
    return rec


def take_one(ctx):
    row = yield ctx.read(KEY)
    ctx.write(KEY, {**row, "stock": row["stock"] - 1})


def test_phase1a_promises_and_reports_open_votes():
    rec = seeded()
    option = physical_update("t1", KEY, (KEY,), 0, {"stock": 9})
    ReplicaService.handle_fast_propose(rec, option)
    ballot = Ballot(True, 1, 2)
    reply = ReplicaService.handle_phase1a(rec, ballot, RoundMeta(1, 1, False, ballot))
    assert isinstance(reply, Phase1b)
    assert reply.next_round == 1
    report = reply.report_for(1)
    assert report.votes[0].option.txn_id == "t1"
    assert rec.promise_for(1) == ballot

    lower = Ballot(True, 1, 1)
    nack = ReplicaService.handle_phase1a(rec, lower, RoundMeta(1, 1, False, lower))
    assert isinstance(nack, Nack) and nack.promised == ballot


def test_fast_proposals_are_refused_in_classic_rounds():
    rec = seeded()
    ballot = Ballot(True, 1, 0)
    ReplicaService.handle_phase1a(rec, ballot, RoundMeta(1, 3, False, ballot))
    reply = ReplicaService.handle_fast_propose(rec, physical_update("t1", KEY, (KEY,), 0, {"stock": 9}))
    assert isinstance(reply, Refusal)
    assert reply.reason is RefusalReason.CLASSIC
    assert reply.meta.ballot == ballot
    # rounds after the granted range are fast again
    assert rec.meta_for(4).fast


def test_phase2a_below_the_promise_is_nacked():
    rec = seeded()
    high = Ballot(True, 2, 0)
    ReplicaService.handle_phase1a(rec, high, RoundMeta(1, 1, False, high))
    option = physical_update("t1", KEY, (KEY,), 0, {"stock": 9})
    low = Ballot(True, 1, 4)
    reply = ReplicaService.handle_phase2a(rec, Phase2a(KEY, low, 1, (Vote(option, None),)))
    assert isinstance(reply, Nack)
    accepted = ReplicaService.handle_phase2a(rec, Phase2a(KEY, high, 1, (Vote(option, None),)))
    assert isinstance(accepted, Phase2b)
    assert accepted.votes[0].verdict is Verdict.ACCEPT


def test_stale_read_is_rejected():
    rec = seeded()
    option = physical_update("t1", KEY, (KEY,), 0, {"stock": 9})
    ReplicaService.install_version(rec, physical_update("t0", KEY, (KEY,), 0, {"stock": 5}))
    assert ReplicaService.validate_option(rec, option) is Verdict.REJECT


def test_replica_behind_the_read_parks_and_catches_up(cluster):
    cluster.seed(KEY, {"stock": 10})
    network = cluster.network
    coordinator = cluster.add_coordinator(HOME)
    network.fail_datacenter("eu")
    for second in range(3):
        network.schedule(second * US_PER_S, lambda: coordinator.execute_transaction(take_one))
    network.heal_datacenter("eu", at=3 * US_PER_S)
    handles = []
    network.schedule(4 * US_PER_S, lambda: handles.append(coordinator.execute_transaction(take_one)))
    cluster.run(10 * US_PER_S)

    home = cluster.replicas["us-west/r0"].record(KEY)
    lagging = cluster.replicas["eu/r0"].record(KEY)
    assert home.current_value == {"stock": 6}
    assert lagging.current_value == home.current_value
    assert lagging.next_round == home.next_round == 5
    assert handles[0].decided
    assert not cluster.replicas["eu/r0"].parked.get(KEY)
    assert cluster.observer.ok


def test_status_reports_learned_outcomes():
    rec = seeded()
    option = physical_update("t1", KEY, (KEY,), 0, {"stock": 9})
    ReplicaService.handle_fast_propose(rec, option)
    pending = ReplicaService.status(rec, "t1")
    assert pending.vote.option.txn_id == "t1" and not pending.learned
    ReplicaService.apply_learned(rec, 1, option, Decision.COMMIT, fast=True)
    done = ReplicaService.status(rec, "t1")
    assert done.learned and done.decision is Decision.COMMIT
    assert rec.current_value == {"stock": 9}
    assert ReplicaService.status(rec, "nobody").vote is None


def test_master_closed_commutative_round_replays_from_the_log():
    rec = seeded()
    ballot = Ballot(True, 1, 0)
    ReplicaService.handle_phase1a(rec, ballot, RoundMeta(1, 1, False, ballot))
    floor = (Constraint("stock", lower=0),)
    taken = commutative_update("t1", KEY, (KEY,), {"stock": -2}, floor)
    dropped = commutative_update("t2", KEY, (KEY,), {"stock": -1}, floor)
    votes = (Vote(taken, Verdict.ACCEPT), Vote(dropped, Verdict.ACCEPT))
    reply = ReplicaService.handle_phase2a(rec, Phase2a(KEY, ballot, 1, votes, commutative=True, closing=True))
    assert isinstance(reply, Phase2b)

    assert ReplicaService.apply_learned(rec, 1, taken, Decision.COMMIT) == []
    versions = ReplicaService.apply_learned(rec, 1, dropped, Decision.ABORT)
    assert [version.round for version in versions] == [1]
    assert rec.current_value == {"stock": 8}
    assert replay_versions(rec.option_log) == [(0, {"stock": 10}), (1, {"stock": 8})]


def test_option_log_replays_to_the_executed_chain(make_cluster, tmp_path):
    cluster = make_cluster(option_log_dir=str(tmp_path))
    cluster.seed(KEY, {"stock": 10})
    coordinator = cluster.add_coordinator(HOME)
    for _ in range(3):
        coordinator.execute_transaction(take_one)
        cluster.run()
    assert cluster.observer.check_logs(cluster.replicas.values()) >= 5
    cluster.close()

    path = os.path.join(tmp_path, "tokyo_r0.log")
    entries = read_option_log(path, KEY)
    rec = cluster.replicas["tokyo/r0"].record(KEY)
    assert replay_versions(entries) == [(version.round, version.value) for version in rec.executed]
    assert rec.current_value == {"stock": 7}
    assert cluster.observer.ok


def test_settled_transactions_are_forgotten_behind_the_window(make_cluster):
    cluster = make_cluster(settled_rounds=4)
    cluster.seed(KEY, {"stock": 30})
    coordinator = cluster.add_coordinator(HOME)
    for _ in range(20):
        coordinator.execute_transaction(take_one)
        cluster.run()

    for node in cluster.replicas.values():
        rec = node.record(KEY)
        assert rec.current_value == {"stock": 10}
        assert rec.settled_below == 16
        assert sorted(info.round for info in rec.learned.values()) == [16, 17, 18, 19, 20]
        assert set(rec.outcomes) == set(rec.learned)
        for session in node.masters.values():
            assert all(round_ >= 16 for round_, _ in session.decided_votes.values())

    rec = cluster.replicas["tokyo/r0"].record(KEY)
    late = physical_update("late", KEY, (KEY,), 0, {"stock": 0})
    assert ReplicaService.apply_learned(rec, 3, late, Decision.COMMIT) == []
    assert "late" not in rec.outcomes
    assert cluster.observer.check_logs(cluster.replicas.values()) == 5
    assert cluster.observer.ok
