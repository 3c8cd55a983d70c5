from .sim_config import SimConfig, JitterConfig, load_sim_config
from .workload import WorkloadSpec, WorkloadKind, BenchProtocol, FailureScript
from .trace import TraceEvent, TxnRecord
