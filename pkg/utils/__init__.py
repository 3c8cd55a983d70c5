from .exceptions import (
    GeoTxnError,
    ReplicaUnavailable,
    QuorumUnavailable,
    RecordNotFound,
    InvalidWorkload,
    InvariantViolation
)
