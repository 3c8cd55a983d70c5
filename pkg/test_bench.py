import csv

import pytest

from main import main
from schemas.sim_config import SimConfig, load_sim_config
from schemas.trace import TXN_CSV_COLUMNS, TxnRecord
from schemas.workload import BenchProtocol, FailureScript, WorkloadKind, WorkloadSpec
from services.bench import report_from_trace, run_failure_experiment, run_sweep, run_workload
from services.metrics import build_report, failure_series, latency_cdf, write_txn_csv
from utils.exceptions import InvalidWorkload


def quiet(protocol: BenchProtocol, **fields) -> WorkloadSpec:
    values = dict(protocol=protocol, items=10000, clients=1, duration_s=5.0, seed=11, drain_s=2.0)
    values.update(fields)
    return WorkloadSpec(**values)


def median(result) -> float:
    return result.report.percentiles_ms[50]


@pytest.fixture(scope="module")
def exact_sim() -> SimConfig:
    return load_sim_config().without_jitter()


@pytest.fixture(scope="module")
def medians(exact_sim):
    return {protocol: median(run_workload(quiet(protocol), exact_sim)) for protocol in BenchProtocol}


def test_single_client_never_conflicts(exact_sim):
    result = run_workload(quiet(BenchProtocol.GEOTXN_FAST_COMM), exact_sim)
    report = result.report
    assert report.total > 10
    assert report.conflicts == 0
    assert report.commit_rate == 1.0
    assert report.fast_share == 1.0
    # fourth closest replica from us-west answers after 150 ms
    assert median(result) == pytest.approx(150.0, abs=0.01)
    assert result.ok


def test_two_phase_commit_takes_about_twice_as_long(medians):
    assert medians[BenchProtocol.TWO_PC] > 1.9 * medians[BenchProtocol.GEOTXN_FAST_COMM]


def test_latency_ordering(medians):
    qw3, qw4 = medians[BenchProtocol.QW3], medians[BenchProtocol.QW4]
    fast = medians[BenchProtocol.GEOTXN_FAST_COMM]
    assert qw3 * 1.05 <= qw4
    assert qw4 == pytest.approx(fast, rel=0.05)
    assert fast * 1.05 < medians[BenchProtocol.GEOTXN_CLASSIC]
    assert fast * 1.05 < medians[BenchProtocol.TWO_PC]


@pytest.fixture(scope="module")
def throughputs(exact_sim):
    everywhere = list(exact_sim.datacenters)
    return {
        protocol: run_workload(quiet(protocol, clients=50, duration_s=4.0, client_dcs=everywhere),
                               exact_sim).report.throughput
        for protocol in BenchProtocol
    }


def test_throughput_ordering(throughputs):
    qw3, qw4 = throughputs[BenchProtocol.QW3], throughputs[BenchProtocol.QW4]
    classic, two_pc = throughputs[BenchProtocol.GEOTXN_CLASSIC], throughputs[BenchProtocol.TWO_PC]
    for fast in (throughputs[BenchProtocol.GEOTXN_FAST_NONCOMM], throughputs[BenchProtocol.GEOTXN_FAST_COMM]):
        assert qw3 > qw4 > fast
        # same write quorum size as a fast quorum
        assert fast >= 0.75 * qw4
        assert fast >= classic
    assert classic > two_pc


def test_report_recomputes_from_saved_trace(exact_sim, tmp_path):
    spec = quiet(BenchProtocol.GEOTXN_FAST_NONCOMM, items=20, clients=4, duration_s=3.0)
    trace = tmp_path / "trace.jsonl"
    result = run_workload(spec, exact_sim, trace_path=str(trace))
    report, records = report_from_trace(str(trace), spec.duration_s, spec.protocol.value)
    assert report == result.report
    assert records == result.records

    first, second = tmp_path / "live.csv", tmp_path / "replayed.csv"
    write_txn_csv(result.records, str(first))
    write_txn_csv(records, str(second))
    assert first.read_bytes() == second.read_bytes()


def test_same_seed_gives_the_same_run(exact_sim):
    spec = quiet(BenchProtocol.GEOTXN_FAST_COMM, items=50, clients=5, duration_s=2.0)
    assert run_workload(spec, exact_sim).digest == run_workload(spec, exact_sim).digest


def test_failure_experiment_keeps_committing():
    sim = load_sim_config()
    spec = quiet(BenchProtocol.GEOTXN_FAST_COMM, clients=5, duration_s=20.0,
                 failure_script=FailureScript(dc="us-east", fail_at_s=10.0))
    result, series = run_failure_experiment(spec, sim)
    assert result.ok
    assert series.max_gap_s < 5.0
    assert series.post_mean_ms > series.pre_mean_ms
    assert series.post_var > series.pre_var


def test_failure_experiment_needs_a_script(exact_sim):
    with pytest.raises(InvalidWorkload):
        run_failure_experiment(quiet(BenchProtocol.GEOTXN_FAST_COMM), exact_sim)


def test_unknown_client_datacenter_is_rejected(exact_sim):
    with pytest.raises(InvalidWorkload) as excinfo:
        run_workload(quiet(BenchProtocol.QW3, client_dcs=["atlantis"]), exact_sim)
    assert excinfo.value.status_code == 400


def test_tpcw_lite_commits_orders(exact_sim):
    spec = quiet(BenchProtocol.GEOTXN_FAST_COMM, kind=WorkloadKind.TPCW_LITE, items=100, users=10,
                 clients=3, duration_s=3.0)
    result = run_workload(spec, exact_sim)
    assert result.report.committed > 0
    assert result.ok


def test_quorum_writes_lose_updates_under_contention(exact_sim):
    result = run_workload(quiet(BenchProtocol.QW3, items=1, clients=5, duration_s=3.0), exact_sim)
    assert result.lost_updates > 0


def test_optimistic_commit_loses_no_updates_under_contention(exact_sim):
    result = run_workload(quiet(BenchProtocol.GEOTXN_FAST_NONCOMM, items=1, clients=5, duration_s=3.0), exact_sim)
    assert result.lost_updates == 0
    assert result.report.aborted > 0
    assert result.ok


@pytest.mark.parametrize("seed", [1, 3, 5])
def test_contended_commutative_run_replays_its_option_logs(seed):
    spec = WorkloadSpec(protocol=BenchProtocol.GEOTXN_FAST_COMM, items=3, clients=10, duration_s=3.0,
                        seed=seed, client_dcs=["us-west", "tokyo", "eu"])
    result = run_workload(spec, load_sim_config())
    assert result.report.committed > 0
    assert not result.observer.violations


def test_sweep_with_faults_is_clean():
    sim = SimConfig.model_validate({**load_sim_config().model_dump(), "drop_rate": 0.02})
    spec = WorkloadSpec(items=5, clients=4, duration_s=2.0, seed=100, kill_probability=0.1,
                        failure_script=FailureScript(dc="eu", fail_at_s=0.5, heal_at_s=1.5),
                        client_dcs=["us-west", "tokyo"])
    outcomes = run_sweep(spec, sim, runs=4)
    assert [outcome.seed for outcome in outcomes] == [100, 101, 102, 103]
    assert all(not outcome.violations for outcome in outcomes)
    assert sum(outcome.committed for outcome in outcomes) > 0


def test_sweep_over_processes_matches_in_process(exact_sim):
    spec = quiet(BenchProtocol.GEOTXN_FAST_COMM, items=10, clients=2, duration_s=1.0)
    serial = run_sweep(spec, exact_sim, runs=2, jobs=1)
    parallel = run_sweep(spec, exact_sim, runs=2, jobs=2)
    assert [o.digest for o in serial] == [o.digest for o in parallel]


def test_sweep_needs_a_run(exact_sim):
    with pytest.raises(InvalidWorkload):
        run_sweep(quiet(BenchProtocol.QW3), exact_sim, runs=0)


# Metrics

def record(txn_id, start_us, decide_us, outcome="committed"):
    return TxnRecord(txn_id=txn_id, protocol="qw3", start_us=start_us, decide_us=decide_us,
                     outcome=outcome, mode="fast", msgs=4)


def test_failure_series_statistics():
    records = [
        record("a", 0, 100_000),
        record("b", 1_000_000, 1_100_000),
        record("c", 3_000_000, 3_200_000),
        record("d", 3_500_000, 3_900_000),
        record("e", 2_000_000, 2_050_000, outcome="aborted"),
    ]
    series = failure_series(records, fail_at_s=2.0, end_s=5.0)
    assert series.pre_mean_ms == 100.0
    assert series.pre_var == 0.0
    assert series.post_mean_ms == 300.0
    assert series.post_var == 10000.0
    assert series.max_gap_s == pytest.approx(2.1)
    assert series.per_second == [(0, 100.0, 1), (1, 100.0, 1), (3, 300.0, 2)]


def test_build_report_counts_outcomes():
    records = [record("a", 0, 100_000), record("b", 0, 300_000),
               record("c", 0, 50_000, outcome="aborted"), record("d", 0, None, outcome="unknown")]
    report = build_report(records, window_s=2.0)
    assert (report.total, report.committed, report.aborted, report.unknown) == (4, 2, 1, 1)
    assert report.protocol == "qw3"
    assert report.throughput == 1.0
    assert report.commit_rate == pytest.approx(2 / 3)
    assert report.percentiles_ms[50] == 200.0
    assert report.mean_msgs == 4.0


def test_latency_cdf():
    records = [record(str(i), 0, (i + 1) * 1000) for i in range(10)]
    cdf = latency_cdf(records, points=10)
    assert cdf[0] == (1.0, 0.1)
    assert cdf[-1] == (10.0, 1.0)
    assert [v for v, _ in cdf] == sorted(v for v, _ in cdf)
    assert latency_cdf([record("x", 0, 10, outcome="aborted")]) == []


# Command line

def run_cli(*argv) -> int:
    return main([*argv, "--log-file", ""])


def test_cli_short_run_writes_csvs(tmp_path):
    out, cdf = tmp_path / "txns.csv", tmp_path / "cdf.csv"
    code = run_cli("--clients", "2", "--items", "50", "--duration", "1", "--seed", "3",
                   "--out", str(out), "--cdf", str(cdf))
    assert code == 0
    with open(out, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == TXN_CSV_COLUMNS
    assert len(rows) > 1
    assert cdf.read_text().splitlines()[0] == "latency_ms,fraction"


def test_cli_recomputes_from_trace(tmp_path):
    trace, first, second = tmp_path / "t.jsonl", tmp_path / "a.csv", tmp_path / "b.csv"
    assert run_cli("--clients", "2", "--items", "50", "--duration", "1",
                   "--trace", str(trace), "--out", str(first)) == 0
    assert run_cli("--from-trace", str(trace), "--duration", "1", "--out", str(second)) == 0
    assert first.read_bytes() == second.read_bytes()


@pytest.mark.parametrize("argv", [
    ("--failure", "eu"),
    ("--failure", "atlantis:1"),
    ("--failure", "eu:5:1"),
    ("--client-dcs", "us-west,mars"),
    ("--clients", "0"),
    ("--runs", "0", "--duration", "1"),
])
def test_cli_rejects_bad_input(argv):
    assert run_cli(*argv) == 2
