import logging
import os
from typing import Any, Dict, Iterable, List, Optional, Tuple

from models.core import (
    TOMBSTONE,
    Ballot,
    Constraint,
    Decision,
    UpdateOption,
    Verdict,
    Vote,
)
from models.record import LogEntry
from schemas.trace import OptionLogLine

logger = logging.getLogger(__name__)


# Payload encoding

def encode_value(value: Any) -> Any:
    if value is TOMBSTONE:
        return {"__tombstone__": True}
    if isinstance(value, UpdateOption):
        return {"__option__": encode_option(value)}
    if isinstance(value, Vote):
        return {"__vote__": encode_vote(value)}
    if isinstance(value, (list, tuple)):
        return [encode_value(item) for item in value]
    if isinstance(value, dict):
        return {str(k): encode_value(v) for k, v in value.items()}
    return value


def decode_value(data: Any) -> Any:
    if isinstance(data, list):
        return tuple(decode_value(item) for item in data)
    if isinstance(data, dict):
        if data.get("__tombstone__"):
            return TOMBSTONE
        if "__option__" in data:
            return decode_option(data["__option__"])
        if "__vote__" in data:
            return decode_vote(data["__vote__"])
        return {k: decode_value(v) for k, v in data.items()}
    return data


def encode_option(option: UpdateOption) -> Dict[str, Any]:
    return {
        "txn_id": option.txn_id,
        "key": option.key,
        "writeset_keys": list(option.writeset_keys),
        "origin": option.origin,
        "v_read": option.v_read,
        "v_write": encode_value(option.v_write),
        "deltas": [[name, amount] for name, amount in option.deltas],
        "constraints": [[c.attribute, c.lower, c.upper] for c in option.constraints],
        "commutative": option.commutative,
        "remote_callback": option.remote_callback,
        "placeholder": option.placeholder,
    }


def decode_option(data: Dict[str, Any]) -> UpdateOption:
    return UpdateOption(
        txn_id=data["txn_id"],
        key=data["key"],
        writeset_keys=tuple(data["writeset_keys"]),
        origin=data.get("origin", ""),
        v_read=data.get("v_read"),
        v_write=decode_value(data.get("v_write")),
        deltas=tuple((name, amount) for name, amount in data.get("deltas", [])),
        constraints=tuple(Constraint(a, lo, hi) for a, lo, hi in data.get("constraints", [])),
        commutative=data.get("commutative", False),
        remote_callback=data.get("remote_callback"),
        placeholder=data.get("placeholder", False),
    )


def encode_vote(vote: Vote) -> Dict[str, Any]:
    return {
        "option": encode_option(vote.option),
        "verdict": vote.verdict.value if vote.verdict is not None else None,
        "primary": vote.primary,
    }


def decode_vote(data: Dict[str, Any]) -> Vote:
    verdict = Verdict(data["verdict"]) if data.get("verdict") is not None else None
    return Vote(decode_option(data["option"]), verdict, data.get("primary", True))


def to_line(entry: LogEntry) -> OptionLogLine:
    ballot = None
    if entry.ballot is not None:
        ballot = [entry.ballot.classic, entry.ballot.number, entry.ballot.server_id]
    return OptionLogLine(
        time_us=entry.time_us,
        key=entry.key,
        round=entry.round,
        ballot=ballot,
        txn_id=entry.txn_id,
        kind=entry.kind,
        payload=encode_value(entry.payload),
        verdict=entry.verdict,
    )


def from_line(line: OptionLogLine) -> LogEntry:
    ballot = Ballot(*line.ballot) if line.ballot is not None else None
    return LogEntry(line.time_us, line.key, line.round, ballot, line.txn_id, line.kind,
                    decode_value(line.payload), line.verdict)


class OptionLogWriter:
    """Append-only line-delimited option log of one replica"""

    def __init__(self, path: str):
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        self.path = path
        self._fh = open(path, "a", encoding="utf-8")

    def __call__(self, entry: LogEntry) -> None:
        self._fh.write(to_line(entry).model_dump_json() + "\n")

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.close()


def read_option_log(path: str, key: Optional[str] = None) -> List[LogEntry]:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            raw = raw.strip()
            if not raw:
                continue
            entry = from_line(OptionLogLine.model_validate_json(raw))
            if key is None or entry.key == key:
                entries.append(entry)
    return entries


# Replay

def replay_versions(entries: Iterable[LogEntry]) -> List[Tuple[int, Any]]:
    """Rebuild one record's (round, value) chain from its option log alone"""
    outcomes: Dict[str, Decision] = {}
    learned_primary: Dict[int, Vote] = {}
    decided: Dict[int, Tuple[Vote, ...]] = {}
    seeds: Dict[int, Any] = {}
    versions: List[Tuple[int, Any]] = []
    current: Any = None

    for entry in entries:
        if entry.kind == "seed":
            seeds[entry.round] = entry.payload
        elif entry.kind == "learned":
            outcomes[entry.txn_id] = Decision(entry.verdict)
            vote = entry.payload
            if isinstance(vote, Vote) and vote.primary and not vote.option.commutative:
                learned_primary.setdefault(entry.round, vote)
        elif entry.kind == "decided":
            decided[entry.round] = tuple(entry.payload or ())
        elif entry.kind == "executed":
            round_ = entry.round
            if round_ in seeds:
                current = seeds[round_]
            elif round_ in decided and not decided[round_]:
                pass  # closed without options
            elif round_ in decided and any(v.option.commutative for v in decided[round_]):
                for vote in decided[round_]:
                    if vote.verdict is Verdict.ACCEPT and outcomes.get(vote.option.txn_id) is Decision.COMMIT:
                        current = vote.option.apply_to(current)
            else:
                primary = None
                if round_ in decided:
                    primary = next((v for v in decided[round_] if v.primary), None)
                if primary is None:
                    primary = learned_primary.get(round_)
                if primary is None:
                    logger.warning(f"replay: no decision for round {round_} of {entry.key}")
                elif (primary.verdict is Verdict.ACCEPT
                      and outcomes.get(primary.option.txn_id) is Decision.COMMIT):
                    current = primary.option.apply_to(current)
            versions.append((round_, current))
    return versions
