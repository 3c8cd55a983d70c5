import enum
from typing import List, Optional

from pydantic import BaseModel, Field, field_validator, model_validator

from config import settings


class WorkloadKind(str, enum.Enum):
    MICRO_PURCHASE = "micro-purchase"
    TPCW_LITE = "tpcw-lite-ordering"


class BenchProtocol(str, enum.Enum):
    GEOTXN_CLASSIC = "geotxn-classic"
    GEOTXN_FAST_NONCOMM = "geotxn-fast-noncomm"
    GEOTXN_FAST_COMM = "geotxn-fast-comm"
    TWO_PC = "2pc"
    QW3 = "qw3"
    QW4 = "qw4"

    @property
    def coordinator_protocol(self) -> str:
        if self in (BenchProtocol.GEOTXN_FAST_NONCOMM, BenchProtocol.GEOTXN_FAST_COMM):
            return "geotxn-fast"
        return self.value

    @property
    def commutative(self) -> bool:
        return self is BenchProtocol.GEOTXN_FAST_COMM


class FailureScript(BaseModel):
    dc: str
    fail_at_s: float = Field(..., ge=0)
    heal_at_s: Optional[float] = Field(default=None, ge=0)

    @model_validator(mode="after")
    def heal_after_fail(self):
        if self.heal_at_s is not None and self.heal_at_s < self.fail_at_s:
            raise ValueError("heal_at must not precede fail_at")
        return self

    @classmethod
    def parse(cls, text: str) -> "FailureScript":
        """dc:fail_at[:heal_at], times in simulated seconds"""
        parts = text.split(":")
        if len(parts) not in (2, 3) or not parts[0]:
            raise ValueError(f"expected dc:fail_at[:heal_at], got {text!r}")
        heal = float(parts[2]) if len(parts) == 3 and parts[2] else None
        return cls(dc=parts[0], fail_at_s=float(parts[1]), heal_at_s=heal)


class WorkloadSpec(BaseModel):
    kind: WorkloadKind = WorkloadKind.MICRO_PURCHASE
    protocol: BenchProtocol = BenchProtocol.GEOTXN_FAST_COMM
    items: int = Field(default=10000, ge=1)
    clients: int = Field(default=100, ge=1)
    duration_s: float = Field(default=60.0, gt=0)
    failure_script: Optional[FailureScript] = None
    users: int = Field(default=1000, ge=1)  # TPC-W-lite customer rows
    seed: int = Field(default=settings.SEED, ge=0, lt=2**64)
    slo_ms: int = Field(default=settings.SLO_MS, gt=0)
    kill_probability: float = Field(default=0.0, ge=0, le=1)  # coordinator crash chance per transaction
    initial_stock: int = Field(default=100, ge=0)
    max_items_per_txn: int = Field(default=4, ge=1)
    max_decrement: int = Field(default=3, ge=1)
    drain_s: float = Field(default=5.0, ge=0)  # quiet time after the run for stragglers and recovery
    client_dcs: List[str] = Field(default_factory=list)  # empty: every client in the home data center

    @field_validator("client_dcs")
    @classmethod
    def unique_dcs(cls, value):
        if len(set(value)) != len(value):
            raise ValueError("client_dcs must be unique")
        return value
