from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field

TXN_CSV_COLUMNS = ["txn_id", "protocol", "start_us", "decide_us", "outcome", "mode", "msgs", "conflicts"]


class TraceEvent(BaseModel):
    """One protocol event on the structured trace stream"""

    time_us: int
    kind: str
    txn_id: str = ""
    key: str = ""
    node: str = ""
    detail: Dict[str, Any] = Field(default_factory=dict)


class TxnRecord(BaseModel):
    txn_id: str
    protocol: str
    start_us: int
    decide_us: Optional[int] = None
    outcome: str
    mode: str
    msgs: int = 0
    conflicts: int = 0

    @property
    def latency_us(self) -> Optional[int]:
        if self.decide_us is None:
            return None
        return self.decide_us - self.start_us

    def csv_row(self) -> List[Any]:
        return [getattr(self, column) if getattr(self, column) is not None else "" for column in TXN_CSV_COLUMNS]


class OptionLogLine(BaseModel):
    """On-disk form of one replica option-log entry"""

    time_us: int
    key: str
    round: int
    ballot: Optional[List[Any]] = None  # [classic, number, server_id]
    txn_id: str = ""
    kind: str
    payload: Any = None
    verdict: Optional[str] = None
