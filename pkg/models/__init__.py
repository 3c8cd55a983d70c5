from .core import (
    Ballot, RoundMeta, QuorumSpec, Constraint, UpdateOption, Version,
    Verdict, Decision, Vote, quorum_sizes
)
from .record import ReplicaRecord
from .txn import TxnHandle, TxnOutcome, Stage, Stages
