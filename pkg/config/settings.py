import os
from dotenv import load_dotenv

load_dotenv()


def _getenv_bool(name: str, default: str = "false") -> bool:
    return os.getenv(name, default).strip().lower() in ("1", "true", "yes", "on")


# Fast policy
GAMMA = int(os.getenv("GEOTXN_GAMMA", "10"))  # classic rounds after an early conflict
FAST_SUCCESS_THRESHOLD = int(os.getenv("GEOTXN_FAST_SUCCESS_THRESHOLD", "4"))

# Timeouts, in multiples of the deployment's max RTT
LEARN_TIMEOUT_FACTOR = float(os.getenv("GEOTXN_LEARN_TIMEOUT_FACTOR", "4"))
MASTER_FAILOVER_FACTOR = float(os.getenv("GEOTXN_MASTER_FAILOVER_FACTOR", "6"))
FAST_TIMEOUT_FACTOR = float(os.getenv("GEOTXN_FAST_TIMEOUT_FACTOR", "2"))

# Simulated network
JITTER_FRACTION = float(os.getenv("GEOTXN_JITTER_FRACTION", "0.1"))
DROP_RATE = float(os.getenv("GEOTXN_DROP_RATE", "0.0"))
SEED = int(os.getenv("GEOTXN_SEED", "42"))
SIM_CONFIG_PATH = os.getenv(
    "GEOTXN_SIM_CONFIG",
    os.path.join(os.path.dirname(os.path.abspath(__file__)), "default_sim.json"),
)

# Transactions
SLO_MS = int(os.getenv("GEOTXN_SLO_MS", "300"))
COMM_CLOSE_SETTLE_MS = int(os.getenv("GEOTXN_COMM_CLOSE_SETTLE_MS", "20"))
ABORT_2PC_ON_TIMEOUT = _getenv_bool("GEOTXN_ABORT_2PC_ON_TIMEOUT")
# per-transaction outcomes kept for this many executed rounds of a record
SETTLED_ROUNDS = int(os.getenv("GEOTXN_SETTLED_ROUNDS", "256"))

# Logging
LOG_LEVEL = os.getenv("GEOTXN_LOG_LEVEL", "INFO")
LOG_FILE = os.getenv("GEOTXN_LOG_FILE", "geotxn.log")
OPTION_LOG_DIR = os.getenv("GEOTXN_OPTION_LOG_DIR")  # unset: option logs stay in memory
