import argparse
import logging
import sys
from typing import List, Optional

from pydantic import ValidationError

from config import settings
from middleware import setup_logging
from schemas.sim_config import SimConfig, load_sim_config
from schemas.workload import BenchProtocol, FailureScript, WorkloadKind, WorkloadSpec
from services.bench import report_from_trace, run_failure_experiment, run_sweep, run_workload
from services.metrics import latency_cdf, write_cdf_csv, write_txn_csv
from utils.exceptions import InvalidWorkload

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_USAGE = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="geotxn",
        description="Benchmark optimistic multi-data-center commit against 2PC and quorum writes "
                    "over a simulated WAN",
    )
    parser.add_argument("--workload", choices=[kind.value for kind in WorkloadKind],
                        default=WorkloadKind.MICRO_PURCHASE.value)
    parser.add_argument("--protocol", choices=[protocol.value for protocol in BenchProtocol],
                        default=BenchProtocol.GEOTXN_FAST_COMM.value)
    parser.add_argument("--clients", type=int, default=100)
    parser.add_argument("--items", type=int, default=10000)
    parser.add_argument("--users", type=int, default=1000, help="customer rows for tpcw-lite-ordering")
    parser.add_argument("--duration", type=float, default=60.0, help="simulated seconds")
    parser.add_argument("--seed", type=int, default=settings.SEED)
    parser.add_argument("--sim-config", default=None, help=f"simulator config (default {settings.SIM_CONFIG_PATH})")
    parser.add_argument("--failure", default=None, metavar="DC:FAIL_AT[:HEAL_AT]",
                        help="fail a data center at a simulated time, optionally healing it later")
    parser.add_argument("--client-dcs", default=None, help="comma separated client data centers")
    parser.add_argument("--slo-ms", type=int, default=settings.SLO_MS)
    parser.add_argument("--gamma", type=int, default=None, help="classic rounds after an early conflict")
    parser.add_argument("--drop-rate", type=float, default=None)
    parser.add_argument("--kill-coordinators", type=float, default=0.0, metavar="P",
                        help="probability that a transaction's coordinator crashes mid-commit")
    parser.add_argument("--out", default=None, help="per-transaction CSV")
    parser.add_argument("--cdf", default=None, help="latency CDF CSV")
    parser.add_argument("--trace", default=None, help="protocol event trace (JSON lines)")
    parser.add_argument("--net-trace", default=None, help="message-level network trace (tab separated)")
    parser.add_argument("--from-trace", default=None, help="recompute the report from a saved --trace file")
    parser.add_argument("--runs", type=int, default=1, help="seeded runs for a safety sweep")
    parser.add_argument("--jobs", type=int, default=1, help="worker processes for a sweep")
    parser.add_argument("--log-level", default=None)
    parser.add_argument("--log-file", default=None)
    return parser


def spec_from_args(args: argparse.Namespace) -> WorkloadSpec:
    failure = FailureScript.parse(args.failure) if args.failure else None
    client_dcs = [dc.strip() for dc in args.client_dcs.split(",")] if args.client_dcs else []
    return WorkloadSpec(
        kind=WorkloadKind(args.workload),
        protocol=BenchProtocol(args.protocol),
        items=args.items,
        clients=args.clients,
        users=args.users,
        duration_s=args.duration,
        failure_script=failure,
        seed=args.seed,
        slo_ms=args.slo_ms,
        kill_probability=args.kill_coordinators,
        client_dcs=client_dcs,
    )


def _write_outputs(args: argparse.Namespace, records) -> None:
    if args.out:
        write_txn_csv(records, args.out)
    if args.cdf:
        write_cdf_csv(latency_cdf(records), args.cdf)


def run(args: argparse.Namespace) -> int:
    if args.from_trace:
        report, records = report_from_trace(args.from_trace, args.duration)
        print(report.render())
        _write_outputs(args, records)
        return EXIT_OK

    spec = spec_from_args(args)
    sim = load_sim_config(args.sim_config)
    if args.drop_rate is not None:
        sim = SimConfig.model_validate({**sim.model_dump(), "drop_rate": args.drop_rate})

    if args.runs != 1:
        outcomes = run_sweep(spec, sim, args.runs, args.jobs)
        failed = [outcome for outcome in outcomes if outcome.violations]
        print(f"{len(outcomes)} run(s), {len(failed)} with invariant violations")
        for outcome in failed:
            print(f"  seed {outcome.seed}: {outcome.violations[0]}")
        return EXIT_VIOLATION if failed else EXIT_OK

    kwargs = dict(trace_path=args.trace, net_trace_path=args.net_trace, gamma=args.gamma)
    if spec.failure_script is not None:
        result, series = run_failure_experiment(spec, sim, **kwargs)
        print(series.render())
    else:
        result = run_workload(spec, sim, **kwargs)
    print(result.report.render())
    if result.lost_updates:
        print(f"lost updates    {result.lost_updates}")
    print(f"trace digest    {result.digest}")
    _write_outputs(args, result.records)

    if not result.ok:
        for violation in result.observer.violations[:10]:
            print(f"violation: {violation}", file=sys.stderr)
        return EXIT_VIOLATION
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level, args.log_file)
    try:
        return run(args)
    except (InvalidWorkload, ValidationError, ValueError) as exc:
        parser.print_usage(sys.stderr)
        print(f"geotxn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
