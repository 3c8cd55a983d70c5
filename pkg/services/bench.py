"""Runs a workload against one protocol over the simulated network and collects its metrics."""
from dataclasses import dataclass, field
import logging
from multiprocessing import Pool
from typing import List, Optional, Tuple

import numpy as np

from middleware import setup_middleware
from schemas.sim_config import SimConfig
from schemas.trace import TxnRecord
from schemas.workload import BenchProtocol, WorkloadSpec
from services.cluster import Cluster, ProtocolSettings
from services.metrics import FailureSeries, MetricsReport, build_report, failure_series, latency_cdf
from services.network import US_PER_MS, US_PER_S, SimNetwork
from services.observer import Observer
from services.tracing import TraceLog
from services.workload import Workload, duration_us, start_clients
from utils.exceptions import InvalidWorkload

logger = logging.getLogger(__name__)


@dataclass
class BenchResult:
    report: MetricsReport
    records: List[TxnRecord]
    tracer: TraceLog
    observer: Observer
    digest: str
    cdf: List[Tuple[float, float]] = field(default_factory=list)

    @property
    def lost_updates(self) -> int:
        return self.observer.lost_updates

    @property
    def ok(self) -> bool:
        return self.observer.ok


def build_cluster(spec: WorkloadSpec, sim: SimConfig, keep_trace: bool = False,
                  net_trace_path: Optional[str] = None, gamma: Optional[int] = None,
                  option_log_dir: Optional[str] = None) -> Tuple[Cluster, object]:
    network = SimNetwork(sim, seed=spec.seed)
    settings = ProtocolSettings(
        classic_preset=spec.protocol is BenchProtocol.GEOTXN_CLASSIC,
        slo_us=spec.slo_ms * US_PER_MS,
        observe_reads=spec.protocol not in (BenchProtocol.QW3, BenchProtocol.QW4),
        option_log_dir=option_log_dir,
    )
    if gamma is not None:
        settings.gamma = gamma
    cluster = Cluster(network, settings, tracer=TraceLog(keep=keep_trace))
    trace_writer = setup_middleware(network, net_trace_path)
    return cluster, trace_writer


def _check_dcs(spec: WorkloadSpec, sim: SimConfig) -> None:
    unknown = [dc for dc in spec.client_dcs if dc not in sim.datacenters]
    if spec.failure_script is not None and spec.failure_script.dc not in sim.datacenters:
        unknown.append(spec.failure_script.dc)
    if unknown:
        raise InvalidWorkload(f"unknown datacenter(s) {unknown}; known: {sim.datacenters}")


def run_workload(spec: WorkloadSpec, sim: SimConfig, trace_path: Optional[str] = None,
                 net_trace_path: Optional[str] = None, gamma: Optional[int] = None,
                 option_log_dir: Optional[str] = None) -> BenchResult:
    _check_dcs(spec, sim)
    cluster, trace_writer = build_cluster(spec, sim, keep_trace=trace_path is not None,
                                          net_trace_path=net_trace_path, gamma=gamma,
                                          option_log_dir=option_log_dir)
    network = cluster.network
    rng = np.random.default_rng(spec.seed)
    workload = Workload(spec, rng)
    workload.populate(cluster)

    end_us = duration_us(spec)
    clients = start_clients(spec, cluster, workload, end_us, rng)
    script = spec.failure_script
    if script is not None:
        network.fail_datacenter(script.dc, at=int(script.fail_at_s * US_PER_S))
        if script.heal_at_s is not None:
            network.heal_datacenter(script.dc, at=int(script.heal_at_s * US_PER_S))

    logger.info(f"Running {spec.kind.value} on {spec.protocol.value} for {spec.duration_s}s "
                f"with {spec.clients} client(s), seed {spec.seed}")
    network.run(end_us)
    # stragglers finish and dangling transactions recover; clients issue nothing new past end_us
    network.run(end_us + int(spec.drain_s * US_PER_S))

    lost = 0
    for client in clients:
        for coordinator in client.coordinators():
            lost += coordinator.abandon_pending()
    if lost:
        logger.info(f"{lost} transaction(s) still undecided at the end of the run")

    checked = cluster.observer.check_logs(cluster.replicas.values())
    logger.debug(f"Replayed {checked} option log(s)")
    cluster.close()
    if trace_writer is not None:
        trace_writer.close()
    if trace_path is not None:
        cluster.tracer.save(trace_path)

    records = cluster.tracer.txn_records()
    report = build_report(records, spec.duration_s, spec.protocol.value)
    logger.info(f"{spec.protocol.value}: {report.committed}/{report.total} committed, "
                f"{network.sent} message(s) sent, {network.dropped} dropped")
    if cluster.observer.lost_updates:
        logger.info(f"{cluster.observer.lost_updates} lost update(s) under {spec.protocol.value}")
    return BenchResult(report, records, cluster.tracer, cluster.observer, network.digest.hexdigest(),
                       latency_cdf(records))


def report_from_trace(path: str, window_s: float, protocol: str = "") -> Tuple[MetricsReport, List[TxnRecord]]:
    """Recompute metrics from a saved protocol trace"""
    records = TraceLog.load(path).txn_records()
    return build_report(records, window_s, protocol), records


def run_failure_experiment(spec: WorkloadSpec, sim: SimConfig, **kwargs) -> Tuple[BenchResult, FailureSeries]:
    if spec.failure_script is None:
        raise InvalidWorkload("the failure experiment needs a failure script (--failure dc:fail_at[:heal_at])")
    result = run_workload(spec, sim, **kwargs)
    series = failure_series(result.records, spec.failure_script.fail_at_s, end_s=spec.duration_s)
    logger.info(series.render())
    return result, series


# Seeded sweeps

@dataclass
class SweepOutcome:
    seed: int
    committed: int
    total: int
    violations: List[str]
    lost_updates: int
    digest: str


def _sweep_one(job: Tuple[WorkloadSpec, SimConfig]) -> SweepOutcome:
    spec, sim = job
    result = run_workload(spec, sim)
    return SweepOutcome(spec.seed, result.report.committed, result.report.total,
                        list(result.observer.violations), result.lost_updates, result.digest)


def run_sweep(spec: WorkloadSpec, sim: SimConfig, runs: int, jobs: int = 1) -> List[SweepOutcome]:
    """runs independent simulations with seeds spec.seed, spec.seed + 1, ..."""
    if runs < 1:
        raise InvalidWorkload("--runs must be at least 1")
    work = [(spec.model_copy(update={"seed": spec.seed + i}), sim.model_copy(update={"seed": spec.seed + i}))
            for i in range(runs)]
    if jobs <= 1:
        outcomes = [_sweep_one(job) for job in work]
    else:
        with Pool(processes=jobs) as pool:
            outcomes = pool.map(_sweep_one, work)
    failed = [outcome for outcome in outcomes if outcome.violations]
    logger.info(f"Sweep of {runs} run(s): {len(failed)} with violations")
    return outcomes
