"""Latency and throughput figures computed from per-transaction trace records only."""
import csv
from dataclasses import dataclass, field
import logging
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from schemas.trace import TXN_CSV_COLUMNS, TxnRecord
from services.network import US_PER_MS, US_PER_S

logger = logging.getLogger(__name__)

PERCENTILES = (50, 90, 99)


@dataclass
class MetricsReport:
    protocol: str
    total: int
    committed: int
    aborted: int
    unknown: int
    window_s: float
    throughput: float  # committed transactions per simulated second
    percentiles_ms: Dict[int, float] = field(default_factory=dict)
    mean_ms: float = 0.0
    fast_share: float = 0.0
    mean_msgs: float = 0.0
    conflicts: int = 0

    @property
    def commit_rate(self) -> float:
        decided = self.committed + self.aborted
        return self.committed / decided if decided else 0.0

    def render(self) -> str:
        lines = [
            f"protocol        {self.protocol}",
            f"transactions    {self.total} ({self.committed} committed, {self.aborted} aborted, "
            f"{self.unknown} unknown)",
            f"commit rate     {self.commit_rate:.3f}",
            f"throughput      {self.throughput:.1f} txn/s",
        ]
        if self.percentiles_ms:
            spread = ", ".join(f"p{p}={v:.1f}" for p, v in sorted(self.percentiles_ms.items()))
            lines.append(f"latency (ms)    mean={self.mean_ms:.1f}, {spread}")
        lines.append(f"fast decisions  {self.fast_share:.3f}")
        lines.append(f"msgs per txn    {self.mean_msgs:.1f}")
        lines.append(f"conflicts       {self.conflicts}")
        return "\n".join(lines)


def committed_latencies_ms(records: Iterable[TxnRecord]) -> np.ndarray:
    values = [r.latency_us / US_PER_MS for r in records if r.outcome == "committed" and r.latency_us is not None]
    return np.asarray(values, dtype=float)


def build_report(records: Sequence[TxnRecord], window_s: float, protocol: str = "") -> MetricsReport:
    committed = [r for r in records if r.outcome == "committed"]
    latencies = committed_latencies_ms(committed)
    report = MetricsReport(
        protocol=protocol or (records[0].protocol if records else ""),
        total=len(records),
        committed=len(committed),
        aborted=sum(1 for r in records if r.outcome == "aborted"),
        unknown=sum(1 for r in records if r.outcome == "unknown"),
        window_s=window_s,
        throughput=len(committed) / window_s if window_s > 0 else 0.0,
        conflicts=sum(r.conflicts for r in records),
    )
    if latencies.size:
        report.mean_ms = float(np.mean(latencies))
        report.percentiles_ms = {p: float(np.percentile(latencies, p)) for p in PERCENTILES}
    if committed:
        report.fast_share = sum(1 for r in committed if r.mode == "fast") / len(committed)
    if records:
        report.mean_msgs = float(np.mean([r.msgs for r in records]))
    return report


def latency_cdf(records: Iterable[TxnRecord], points: int = 100) -> List[Tuple[float, float]]:
    """(latency_ms, fraction of committed transactions at or below it)"""
    latencies = np.sort(committed_latencies_ms(records))
    if not latencies.size:
        return []
    fractions = np.linspace(1.0 / points, 1.0, points)
    values = np.quantile(latencies, fractions, method="inverted_cdf")
    return [(float(v), float(f)) for v, f in zip(values, fractions)]


def write_txn_csv(records: Iterable[TxnRecord], path: str) -> int:
    count = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TXN_CSV_COLUMNS)
        for record in records:
            writer.writerow(record.csv_row())
            count += 1
    logger.info(f"Wrote {count} transaction record(s) to {path}")
    return count


def write_cdf_csv(cdf: Sequence[Tuple[float, float]], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["latency_ms", "fraction"])
        for latency, fraction in cdf:
            writer.writerow([f"{latency:.3f}", f"{fraction:.4f}"])
    logger.info(f"Wrote latency CDF to {path}")


# Failure experiment

@dataclass
class FailureSeries:
    fail_at_s: float
    per_second: List[Tuple[int, float, int]]  # (second, mean latency ms, commits)
    pre_mean_ms: float
    post_mean_ms: float
    pre_var: float
    post_var: float
    max_gap_s: float

    def render(self) -> str:
        return (f"failure at {self.fail_at_s:.1f}s: mean {self.pre_mean_ms:.1f} -> {self.post_mean_ms:.1f} ms, "
                f"variance {self.pre_var:.1f} -> {self.post_var:.1f}, longest commit gap {self.max_gap_s:.2f}s")


def failure_series(records: Sequence[TxnRecord], fail_at_s: float,
                   end_s: Optional[float] = None) -> FailureSeries:
    committed = sorted((r for r in records if r.outcome == "committed" and r.decide_us is not None),
                       key=lambda r: r.decide_us)
    buckets: Dict[int, List[float]] = {}
    for record in committed:
        buckets.setdefault(record.decide_us // US_PER_S, []).append(record.latency_us / US_PER_MS)
    per_second = [(second, float(np.mean(values)), len(values)) for second, values in sorted(buckets.items())]

    fail_us = fail_at_s * US_PER_S
    pre = np.asarray([r.latency_us / US_PER_MS for r in committed if r.start_us < fail_us], dtype=float)
    post = np.asarray([r.latency_us / US_PER_MS for r in committed if r.start_us >= fail_us], dtype=float)

    times = [r.decide_us for r in committed]
    if end_s is not None:
        times.append(int(end_s * US_PER_S))
    gaps = np.diff(np.asarray(times, dtype=float)) if len(times) > 1 else np.asarray([0.0])
    return FailureSeries(
        fail_at_s=fail_at_s,
        per_second=per_second,
        pre_mean_ms=float(np.mean(pre)) if pre.size else 0.0,
        post_mean_ms=float(np.mean(post)) if post.size else 0.0,
        pre_var=float(np.var(pre)) if pre.size else 0.0,
        post_var=float(np.var(post)) if post.size else 0.0,
        max_gap_s=float(np.max(gaps)) / US_PER_S if gaps.size else 0.0,
    )
