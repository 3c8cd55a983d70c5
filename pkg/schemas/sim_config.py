import json
from typing import List, Optional

from pydantic import BaseModel, Field, field_validator, model_validator

from config import settings


class JitterConfig(BaseModel):
    fraction: float = Field(default=settings.JITTER_FRACTION, ge=0)  # stddev as a share of the mean
    truncate_sigmas: float = Field(default=3.0, gt=0)


class SimConfig(BaseModel):
    datacenters: List[str] = Field(..., min_length=1)
    replicas_per_dc: int = Field(default=1, ge=1)
    latency_matrix: List[List[float]]
    jitter: JitterConfig = Field(default_factory=JitterConfig)
    drop_rate: float = Field(default=settings.DROP_RATE, ge=0, lt=1)
    seed: int = Field(default=settings.SEED, ge=0, lt=2**64)
    client_dc: Optional[str] = None

    @field_validator("datacenters")
    @classmethod
    def unique_datacenters(cls, value):
        if len(set(value)) != len(value):
            raise ValueError("datacenter names must be unique")
        return value

    @model_validator(mode="after")
    def check_matrix(self):
        size = len(self.datacenters)
        matrix = self.latency_matrix
        if len(matrix) != size or any(len(row) != size for row in matrix):
            raise ValueError(f"latency_matrix must be {size}x{size}")
        for i in range(size):
            for j in range(size):
                if matrix[i][j] < 0:
                    raise ValueError("latencies must be non-negative")
                if matrix[i][j] != matrix[j][i]:
                    raise ValueError("latency_matrix must be symmetric")
                if i != j and matrix[i][i] >= matrix[i][j]:
                    raise ValueError("intra-DC latency must be below every inter-DC latency")
        if self.client_dc is not None and self.client_dc not in self.datacenters:
            raise ValueError(f"unknown client_dc {self.client_dc}")
        return self

    @property
    def home_dc(self) -> str:
        return self.client_dc or self.datacenters[0]

    def one_way_ms(self, dc_a: str, dc_b: str) -> float:
        return self.latency_matrix[self.datacenters.index(dc_a)][self.datacenters.index(dc_b)]

    def max_rtt_us(self) -> int:
        return int(round(2000 * max(max(row) for row in self.latency_matrix)))

    def without_jitter(self) -> "SimConfig":
        return self.model_copy(update={"jitter": JitterConfig(fraction=0.0), "drop_rate": 0.0})


def load_sim_config(path: Optional[str] = None) -> SimConfig:
    """Load and validate a simulator config file"""
    with open(path or settings.SIM_CONFIG_PATH, encoding="utf-8") as fh:
        data = json.load(fh)
    data.pop("_comment", None)
    return SimConfig(**data)
