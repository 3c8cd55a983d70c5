import enum
import logging
from typing import Any, List, Optional

from schemas.trace import TraceEvent, TxnRecord

logger = logging.getLogger(__name__)


class TraceKind(enum.Enum):
    TXN_START = "txn_start"
    PROPOSE = "propose"
    LEARN = "learn"
    COLLISION = "collision"
    DUAL_LEARN = "dual_learn"
    RECOVERY = "recovery"
    STAGE = "stage"
    TXN_DECIDE = "txn_decide"
    TWOPC_BLOCKED = "twopc_blocked"
    MASTERSHIP = "mastership"


class TraceLog:
    """Structured protocol event stream; metrics are computed from it alone"""

    def __init__(self, keep: bool = True):
        self.keep = keep
        self.events: List[TraceEvent] = []
        self.counts = {}

    def emit(self, kind: TraceKind, time_us: int, txn_id: str = "", key: str = "", node: str = "",
             **detail: Any) -> None:
        self.counts[kind.value] = self.counts.get(kind.value, 0) + 1
        if not self.keep and kind is not TraceKind.TXN_DECIDE:
            return
        self.events.append(TraceEvent(time_us=time_us, kind=kind.value, txn_id=txn_id, key=key,
                                      node=node, detail=detail))

    def of_kind(self, kind: TraceKind) -> List[TraceEvent]:
        return [event for event in self.events if event.kind == kind.value]

    def txn_records(self) -> List[TxnRecord]:
        records = []
        for event in self.of_kind(TraceKind.TXN_DECIDE):
            detail = event.detail
            records.append(TxnRecord(
                txn_id=event.txn_id,
                protocol=detail.get("protocol", ""),
                start_us=detail["start_us"],
                decide_us=event.time_us if detail.get("outcome") != "unknown" else None,
                outcome=detail.get("outcome", "unknown"),
                mode=detail.get("mode", ""),
                msgs=detail.get("msgs", 0),
                conflicts=detail.get("conflicts", 0),
            ))
        return records

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for event in self.events:
                fh.write(event.model_dump_json() + "\n")
        logger.info(f"Saved {len(self.events)} trace events to {path}")

    @staticmethod
    def load(path: str) -> "TraceLog":
        log = TraceLog()
        with open(path, encoding="utf-8") as fh:
            for raw in fh:
                raw = raw.strip()
                if raw:
                    event = TraceEvent.model_validate_json(raw)
                    log.events.append(event)
                    log.counts[event.kind] = log.counts.get(event.kind, 0) + 1
        return log

    def first(self, kind: TraceKind, txn_id: Optional[str] = None) -> Optional[TraceEvent]:
        for event in self.events:
            if event.kind == kind.value and (txn_id is None or event.txn_id == txn_id):
                return event
        return None
