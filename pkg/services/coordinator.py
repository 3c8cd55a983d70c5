"""Stateless transaction coordinator: runs transaction bodies and commits their write sets."""
from dataclasses import dataclass
import inspect
import logging
from typing import Any, Callable, Dict, List, Optional, Tuple, TYPE_CHECKING

from models.core import (
    Constraint,
    Decision,
    UpdateOption,
    Verdict,
    commutative_update,
    delete_update,
    physical_update,
)
from models.messages import (
    Learned,
    MasterRequest,
    OptionLearned,
    Phase2b,
    Propose,
    QwAck,
    QwWrite,
    ReadReply,
    Refusal,
    RefusalReason,
    RequestReason,
    RetryFast,
    TpcBegin,
    TpcResult,
)
from models.txn import KeyProgress, KeyStatus, LearnedVerdict, Stage, Stages, TxnHandle, TxnOutcome
from services.network import SimNode
from services.reads import Freshness, ReadResult, ReadService, ReadSession
from services.tracing import TraceKind
from utils.exceptions import GeoTxnError, RecordNotFound

if TYPE_CHECKING:
    from services.cluster import Cluster

logger = logging.getLogger(__name__)

PROTOCOLS = ("geotxn-fast", "geotxn-classic", "2pc", "qw3", "qw4")
QW_RESEND_FACTOR = 2


class AbortTransaction(Exception):
    """Raised inside a transaction body to give up before anything is proposed"""


@dataclass(frozen=True)
class ReadOp:
    key: str
    freshness: Optional[Freshness] = None


class TxnContext:
    """What a transaction body sees: reads, buffered writes and its own uncommitted values"""

    def __init__(self, handle: TxnHandle):
        self.handle = handle
        self.writes: Dict[str, Tuple[str, Any, Tuple[Constraint, ...]]] = {}

    @property
    def txn_id(self) -> str:
        return self.handle.txn_id

    def read(self, key: str, freshness: Optional[Freshness] = None) -> ReadOp:
        """Yield the result to obtain the record's value (None when absent)"""
        return ReadOp(key, freshness)

    def write(self, key: str, value: Any) -> None:
        """Overwrite key; a key that was not read is written as an insert"""
        self.writes[key] = ("write", value, ())
        self.handle.record_cache[key] = value

    def insert(self, key: str, value: Any) -> None:
        self.handle.read_set.pop(key, None)
        self.writes[key] = ("write", value, ())
        self.handle.record_cache[key] = value

    def delete(self, key: str) -> None:
        if self.handle.read_set.get(key) is None:
            raise RecordNotFound(f"{key} must be read before it is deleted")
        self.writes[key] = ("delete", None, ())
        self.handle.record_cache[key] = None

    def add(self, key: str, deltas: Dict[str, int], constraints=()) -> None:
        """Commutative update of numeric attributes, bounded by constraints"""
        kind, merged, bounds = self.writes.get(key, ("add", {}, ()))
        if kind != "add":
            raise ValueError(f"{key} already has a physical write in {self.txn_id}")
        merged = dict(merged)
        for name, amount in deltas.items():
            merged[name] = merged.get(name, 0) + amount
        bounds = tuple(bounds) + tuple(c for c in constraints if c not in bounds)
        self.writes[key] = ("add", merged, bounds)
        cached = self.handle.record_cache.get(key)
        updated = dict(cached) if isinstance(cached, dict) else {}
        for name, amount in deltas.items():
            updated[name] = updated.get(name, 0) + amount
        self.handle.record_cache[key] = updated

    def abort(self, reason: str = "") -> None:
        raise AbortTransaction(reason)


class TxnRun:
    def __init__(self, handle: TxnHandle, context: TxnContext, body, on_done, freshness: Freshness):
        self.handle = handle
        self.context = context
        self.body = body
        self.generator = None
        self.on_done = on_done
        self.freshness = freshness
        self.slo_timer = None
        self.requests: Dict[str, int] = {}  # key -> quorum-write request id


class CoordinatorNode(SimNode):
    def __init__(self, node_id: str, dc: str, cluster: "Cluster", protocol: str = "geotxn-fast"):
        if protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {protocol}")
        super().__init__(node_id, dc, cluster.network)
        self.cluster = cluster
        self.protocol = protocol
        self.runs: Dict[str, TxnRun] = {}
        self.reads = ReadService(self)
        self.session = ReadSession()
        self.counter = 0
        self.sent_count = 0
        self.crash_after: Optional[int] = None
        self._qw_requests: Dict[int, Tuple[str, str]] = {}
        self._qw_next = 0
        self.handlers.update({
            ReadReply: self.reads.on_reply,
            Phase2b: self.on_phase2b,
            Refusal: self.on_refusal,
            OptionLearned: self.on_option_learned,
            RetryFast: self.on_retry_fast,
            TpcResult: self.on_tpc_result,
            QwAck: self.on_qw_ack,
        })

    # Failure injection

    def arm_crash(self, after_sends: int) -> None:
        """Crash this coordinator right after its after_sends-th further message"""
        self.crash_after = self.sent_count + after_sends

    def send(self, dst: str, msg: Any) -> Optional[int]:
        result = super().send(dst, msg)
        self.sent_count += 1
        if self.crash_after is not None and self.sent_count >= self.crash_after:
            self.crash_after = None
            logger.info(f"{self.node_id}: crashing after {self.sent_count} messages")
            self.network.crash_node(self.node_id)
        return result

    @property
    def _optimistic(self) -> bool:
        return self.protocol.startswith("geotxn")

    def _send(self, handle: TxnHandle, dst: str, msg: Any) -> None:
        handle.msgs += 1
        self.send(dst, msg)

    def _replicas(self, key: str) -> List[str]:
        return self.cluster.replicas_for(key)

    # Transactions

    def execute_transaction(self, body, slo_us: Optional[int] = None, stages: Optional[Stages] = None,
                            on_done: Optional[Callable[[TxnHandle], None]] = None,
                            read_strategy: Freshness = Freshness.LOCAL) -> TxnHandle:
        """Run body, commit its writes and fire stage callbacks around the SLO deadline"""
        self.counter += 1
        txn_id = f"{self.node_id}#{self.counter}"
        slo_us = self.cluster.settings.slo_us if slo_us is None else slo_us
        handle = TxnHandle(txn_id, self.node_id, self.protocol, self.now, self.now + slo_us,
                           stages=stages or Stages())
        run = TxnRun(handle, TxnContext(handle), body, on_done, read_strategy)
        self.runs[txn_id] = run
        self.cluster.tracer.emit(TraceKind.TXN_START, self.now, txn_id=txn_id, node=self.node_id,
                                 protocol=self.protocol)
        run.slo_timer = self.schedule(slo_us, lambda: self._slo_expired(run))
        if inspect.isgeneratorfunction(body):
            run.generator = body(run.context)
            self._step(run, None)
        else:
            try:
                body(run.context)
            except (AbortTransaction, GeoTxnError) as exc:
                self._abort_before_commit(run, exc)
                return handle
            self._commit(run)
        return handle

    def _step(self, run: TxnRun, value: Any, error: Optional[Exception] = None) -> None:
        try:
            if error is not None:
                op = run.generator.throw(error)
            else:
                op = run.generator.send(value)
        except StopIteration:
            self._commit(run)
            return
        except (AbortTransaction, GeoTxnError) as exc:
            self._abort_before_commit(run, exc)
            return
        if not isinstance(op, ReadOp):
            self._step(run, None, TypeError(f"transaction bodies may only yield reads, got {op!r}"))
            return
        self._read(run, op)

    def _read(self, run: TxnRun, op: ReadOp) -> None:
        handle = run.handle
        if op.key in handle.record_cache:
            self._step(run, handle.record_cache[op.key])
            return

        def done(result: Optional[ReadResult], error: Optional[GeoTxnError]) -> None:
            if handle.txn_id not in self.runs:
                return
            handle.msgs += 2
            if error is not None:
                self._step(run, None, error)
                return
            handle.read_set[op.key] = result.version_id
            handle.read_rounds[op.key] = result.round
            handle.read_values[op.key] = result.value
            handle.read_sources[op.key] = result.source
            handle.record_cache[op.key] = result.value
            self._step(run, result.value)

        self.reads.read(op.key, op.freshness or run.freshness, done, self.session)

    def _abort_before_commit(self, run: TxnRun, exc: Exception) -> None:
        run.handle.error = str(exc)
        logger.debug(f"{self.node_id}: {run.handle.txn_id} gave up before commit: {exc}")
        self._decide(run, Decision.ABORT)

    def _build_options(self, run: TxnRun) -> Dict[str, UpdateOption]:
        handle = run.handle
        writes = run.context.writes
        keys = tuple(writes)
        callback = handle.stages.finally_remote
        options = {}
        for key, (kind, value, constraints) in writes.items():
            if kind == "add":
                option = commutative_update(handle.txn_id, key, keys, value, constraints, self.node_id, callback)
            elif kind == "delete":
                option = delete_update(handle.txn_id, key, keys, handle.read_set[key], self.node_id)
            else:
                v_read = handle.read_set.get(key)
                option = physical_update(handle.txn_id, key, keys, v_read, value, self.node_id, callback)
            options[key] = option
        return options

    def _commit(self, run: TxnRun) -> None:
        handle = run.handle
        if not run.context.writes:
            self._decide(run, Decision.COMMIT)
            return
        handle.write_set = self._build_options(run)
        handle.propose_us = self.now
        for key, option in handle.write_set.items():
            handle.keys[key] = KeyProgress(option, read_round=handle.read_rounds.get(key))
        self.cluster.tracer.emit(TraceKind.PROPOSE, self.now, txn_id=handle.txn_id, node=self.node_id,
                                 keys=list(handle.write_set), protocol=self.protocol)
        if self.protocol == "2pc":
            self._commit_2pc(run)
        elif self.protocol in ("qw3", "qw4"):
            self._commit_qw(run)
        else:
            for key in handle.keys:
                self.propose_option(run, key)

    # Option proposal

    def propose_option(self, run: TxnRun, key: str) -> None:
        """Fast path: the option goes straight to every replica. Classic path: to the round's master"""
        progress = run.handle.keys[key]
        progress.status = KeyStatus.PROPOSED
        if self.protocol == "geotxn-classic":
            self._go_master(run, key, RequestReason.CLASSIC)
            return
        msg = Propose(key, progress.option, progress.read_round)
        for node_id in self._replicas(key):
            self._send(run.handle, node_id, msg)
        self._arm_key_timer(run, key, self.cluster.settings.fast_timeout_factor, self._fast_timeout)

    def _arm_key_timer(self, run: TxnRun, key: str, factor: float, callback) -> None:
        progress = run.handle.keys[key]
        if progress.timer is not None:
            progress.timer.cancel()
        progress.timer = self.schedule(self.cluster.timeout_us(factor), lambda: callback(run, key))

    def _fast_timeout(self, run: TxnRun, key: str) -> None:
        progress = run.handle.keys[key]
        progress.timer = None
        if progress.learned is None and not progress.via_master:
            self._go_master(run, key, RequestReason.TIMEOUT)

    def _default_round(self, progress: KeyProgress) -> int:
        if progress.read_round is not None:
            return progress.read_round + 1
        return 0 if progress.option.is_insert else 1

    def _go_master(self, run: TxnRun, key: str, reason: RequestReason, target: Optional[str] = None) -> None:
        handle = run.handle
        progress = handle.keys[key]
        if progress.learned is not None:
            return
        if not progress.via_master and reason in (RequestReason.CONFLICT, RequestReason.ESCROW):
            handle.conflicts += 1
        progress.via_master = True
        rounds = [vote[0] for vote in progress.votes.values()]
        progress.round_hint = max(rounds) if rounds else self._default_round(progress)
        if target is None:
            candidates = self.cluster.master_candidates(key, progress.round_hint)
            target = candidates[progress.master_attempt % len(candidates)]
        progress.master_attempt += 1
        logger.debug(f"{self.node_id}: {handle.txn_id} asks {target} to decide {key} ({reason.value})")
        self._send(handle, target, MasterRequest(key, progress.option, reason, progress.round_hint, self.node_id))
        self._arm_key_timer(run, key, self.cluster.settings.master_failover_factor,
                            lambda r, k: self._master_timeout(r, k, reason))

    def _master_timeout(self, run: TxnRun, key: str, reason: RequestReason) -> None:
        progress = run.handle.keys[key]
        progress.timer = None
        if progress.learned is None:
            logger.info(f"{self.node_id}: master for {key} did not answer {run.handle.txn_id}, failing over")
            self._go_master(run, key, reason)

    def _run_for(self, txn_id: str, key: str) -> Optional[TxnRun]:
        run = self.runs.get(txn_id)
        if run is None or key not in run.handle.keys:
            return None
        return run

    def on_phase2b(self, msg: Phase2b, src: str) -> None:
        for vote in msg.votes:
            run = self._run_for(vote.option.txn_id, msg.key)
            if run is None:
                continue
            handle = run.handle
            handle.msgs += 1
            progress = handle.keys[msg.key]
            if progress.learned is not None:
                continue
            handle.phase2b_seen = True
            if progress.status is KeyStatus.PROPOSED:
                progress.status = KeyStatus.PHASE2B_SEEN
            progress.votes[src] = (msg.round, msg.ballot, vote.verdict)
            self._tally(run, msg.key, vote.primary)

    def on_refusal(self, msg: Refusal, src: str) -> None:
        run = self._run_for(msg.txn_id, msg.key)
        if run is None:
            return
        handle = run.handle
        handle.msgs += 1
        progress = handle.keys[msg.key]
        if progress.learned is not None:
            return
        if msg.reason is RefusalReason.EXECUTED:
            executed = msg.executed
            vote = None
            if executed is not None:
                vote = next((v for v in executed.votes if v.option.txn_id == msg.txn_id), None)
            if vote is not None:
                self._learn(run, msg.key, LearnedVerdict(executed.round, vote.verdict, vote.primary, executed.fast))
            return
        if msg.reason is RefusalReason.CLASSIC:
            if progress.via_master:
                return
            target = None
            if msg.meta is not None and msg.meta.ballot.classic:
                target = self.cluster.server_node(msg.meta.ballot.server_id)
            self._go_master(run, msg.key, RequestReason.CLASSIC, target)
            return
        progress.refusals[src] = msg.reason
        self._tally(run, msg.key, True)

    def _tally(self, run: TxnRun, key: str, primary: bool) -> None:
        progress = run.handle.keys[key]
        quorum = self.cluster.quorum
        groups: Dict[Tuple, int] = {}
        for identity in progress.votes.values():
            groups[identity] = groups.get(identity, 0) + 1
        for (round_, ballot, verdict), count in groups.items():
            needed = quorum.q_fast if ballot.fast else quorum.q_classic
            if count >= needed:
                self._learn(run, key, LearnedVerdict(round_, verdict, primary, ballot.fast))
                return
        if progress.via_master:
            return
        responded = len(progress.votes) + len(progress.refusals)
        best = max(groups.values(), default=0)
        if best + (quorum.n - responded) < quorum.q_fast:
            reasons = set(progress.refusals.values())
            if RefusalReason.ESCROW in reasons:
                reason = RequestReason.ESCROW
            elif RefusalReason.CLOSED in reasons and RefusalReason.CONFLICT not in reasons:
                reason = RequestReason.CLOSED
            else:
                reason = RequestReason.CONFLICT
            self._go_master(run, key, reason)

    def on_option_learned(self, msg: OptionLearned, src: str) -> None:
        run = self._run_for(msg.txn_id, msg.key)
        if run is None:
            return
        run.handle.msgs += 1
        run.handle.phase2b_seen = True
        self._learn(run, msg.key, LearnedVerdict(msg.round, msg.verdict, msg.primary, msg.fast))

    def on_retry_fast(self, msg: RetryFast, src: str) -> None:
        run = self._run_for(msg.txn_id, msg.key)
        if run is None or run.handle.keys[msg.key].learned is not None:
            return
        run.handle.msgs += 1
        progress = run.handle.keys[msg.key]
        progress.via_master = False
        progress.votes.clear()
        progress.refusals.clear()
        self.propose_option(run, msg.key)

    def _learn(self, run: TxnRun, key: str, learned: LearnedVerdict) -> None:
        handle = run.handle
        progress = handle.keys[key]
        if progress.learned is not None:
            return
        progress.learned = learned
        progress.status = KeyStatus.LEARNED_ACCEPT if learned.verdict is Verdict.ACCEPT else KeyStatus.LEARNED_REJECT
        if progress.timer is not None:
            progress.timer.cancel()
            progress.timer = None
        if not learned.fast:
            handle.classic_keys += 1
        elif learned.verdict is Verdict.ACCEPT:
            voters = {src for src, (round_, _, _) in progress.votes.items() if round_ == learned.round}
            if self.cluster.master_for(key, learned.round) not in voters:
                self.session.note_missed_write(key, learned.round)
        if self._optimistic:
            self.cluster.observer.on_learned(key, learned.round, handle.txn_id, learned.verdict)
        self.cluster.tracer.emit(TraceKind.LEARN, self.now, txn_id=handle.txn_id, key=key, node=self.node_id,
                                 round=learned.round, verdict=learned.verdict.value, primary=learned.primary,
                                 fast=learned.fast)
        if handle.decided:
            self._send_learned(run, key)
            self._maybe_retire(run)
            return
        verdicts = [p.learned.verdict if p.learned else None for p in handle.keys.values()]
        if Verdict.REJECT in verdicts:
            self._decide(run, Decision.ABORT)
        elif all(verdict is Verdict.ACCEPT for verdict in verdicts):
            self._decide(run, Decision.COMMIT)

    def _send_learned(self, run: TxnRun, key: str) -> None:
        handle = run.handle
        progress = handle.keys[key]
        if progress.learned_sent or progress.learned is None or not self._optimistic:
            return
        progress.learned_sent = True
        decision = Decision.COMMIT if handle.outcome is TxnOutcome.COMMITTED else Decision.ABORT
        learned = progress.learned
        notice = Learned(key, learned.round, progress.option, learned.verdict, learned.primary, decision, learned.fast)
        for node_id in self._replicas(key):
            self._send(handle, node_id, notice)

    # Two-phase commit

    def _commit_2pc(self, run: TxnRun) -> None:
        handle = run.handle
        managers = self.cluster.local_replicas(self.dc)
        if not managers:
            managers = self.cluster.replica_ids
        self._send(handle, managers[0], TpcBegin(handle.txn_id, tuple(handle.write_set.values())))

    def on_tpc_result(self, msg: TpcResult, src: str) -> None:
        run = self.runs.get(msg.txn_id)
        if run is None or run.handle.decided:
            return
        run.handle.msgs += 1
        self._decide(run, Decision.COMMIT if msg.committed else Decision.ABORT)

    # Quorum writes

    def _qw_size(self) -> int:
        wanted = 3 if self.protocol == "qw3" else 4
        return min(wanted, self.cluster.quorum.n)

    def _commit_qw(self, run: TxnRun) -> None:
        for key in run.handle.keys:
            self._qw_send(run, key)

    def _qw_message(self, run: TxnRun, key: str) -> QwWrite:
        handle = run.handle
        progress = handle.keys[key]
        read_round = handle.read_rounds.get(key, -1)
        value = progress.option.apply_to(handle.read_values.get(key))
        request_id = run.requests.get(key)
        if request_id is None:
            self._qw_next += 1
            request_id = self._qw_next
            run.requests[key] = request_id
            self._qw_requests[request_id] = (handle.txn_id, key)
        return QwWrite(key, value, (read_round + 1, handle.txn_id),
                       (read_round, handle.read_sources.get(key, "")), request_id)

    def _qw_send(self, run: TxnRun, key: str) -> None:
        progress = run.handle.keys[key]
        progress.status = KeyStatus.PROPOSED
        msg = self._qw_message(run, key)
        for node_id in self._replicas(key):
            if node_id not in progress.acks:
                self._send(run.handle, node_id, msg)
        self._arm_key_timer(run, key, QW_RESEND_FACTOR, self._qw_timeout)

    def _qw_timeout(self, run: TxnRun, key: str) -> None:
        progress = run.handle.keys[key]
        progress.timer = None
        if progress.learned is None:
            self._qw_send(run, key)

    def on_qw_ack(self, msg: QwAck, src: str) -> None:
        slot = self._qw_requests.get(msg.request_id)
        if slot is None:
            return
        run = self._run_for(slot[0], slot[1])
        if run is None:
            return
        handle = run.handle
        handle.msgs += 1
        progress = handle.keys[msg.key]
        progress.acks[src] = True
        if progress.learned is not None or len(progress.acks) < self._qw_size():
            return
        qw = self._qw_message(run, msg.key)
        self.cluster.observer.on_qw_commit(msg.key, qw.base_stamp, handle.txn_id)
        self._learn(run, msg.key, LearnedVerdict(qw.stamp[0], Verdict.ACCEPT, True, True))

    # Outcome and stages

    def _decide(self, run: TxnRun, decision: Decision) -> None:
        handle = run.handle
        if handle.decided:
            return
        handle.outcome = TxnOutcome.COMMITTED if decision is Decision.COMMIT else TxnOutcome.ABORTED
        handle.decide_us = self.now
        committed = decision is Decision.COMMIT
        if self._optimistic:
            self.cluster.observer.on_outcome(handle.txn_id, decision, handle.write_set.values())
        for key in handle.keys:
            self._send_learned(run, key)

        timed_out = self.now > handle.slo_deadline_us
        if not timed_out and handle.stage_fired is None:
            self._fire_stage(run, Stage.ON_COMMIT, committed)
        if run.slo_timer is not None and not timed_out:
            run.slo_timer.cancel()
        self._fire_finally(run, committed, timed_out)
        logger.debug(f"{self.node_id}: {handle.txn_id} {handle.outcome.value} after "
                     f"{handle.decide_us - handle.start_us}us")
        self.record_decision(handle)
        if run.on_done is not None:
            run.on_done(handle)
        self._maybe_retire(run)

    def record_decision(self, handle: TxnHandle) -> None:
        """Emit the per-transaction record the metrics are computed from"""
        if self._optimistic:
            mode = handle.mode.value
        else:
            mode = self.protocol
        decide_us = handle.decide_us if handle.decide_us is not None else self.now
        self.cluster.tracer.emit(TraceKind.TXN_DECIDE, decide_us, txn_id=handle.txn_id, node=self.node_id,
                                 protocol=self.protocol, start_us=handle.start_us, outcome=handle.outcome.value,
                                 mode=mode, msgs=handle.msgs, conflicts=handle.conflicts)

    def _maybe_retire(self, run: TxnRun) -> None:
        if not run.handle.decided:
            return
        if not self._optimistic or all(p.learned is not None for p in run.handle.keys.values()):
            self.runs.pop(run.handle.txn_id, None)
            for request_id in run.requests.values():
                self._qw_requests.pop(request_id, None)

    def _slo_expired(self, run: TxnRun) -> None:
        run.slo_timer = None
        handle = run.handle
        if handle.decided or handle.stage_fired is not None:
            return
        self._fire_stage(run, Stage.ON_ACCEPT if handle.phase2b_seen else Stage.ON_FAILURE)

    def _fire_stage(self, run: TxnRun, stage: Stage, success: bool = False) -> None:
        handle = run.handle
        handle.stage_fired = stage
        handle.record_stage(stage, self.now)
        self.cluster.tracer.emit(TraceKind.STAGE, self.now, txn_id=handle.txn_id, node=self.node_id,
                                 stage=stage.value)
        stages = handle.stages
        if stage is Stage.ON_COMMIT and stages.on_commit is not None:
            stages.on_commit(handle, success)
        elif stage is Stage.ON_ACCEPT and stages.on_accept is not None:
            stages.on_accept(handle)
        elif stage is Stage.ON_FAILURE and stages.on_failure is not None:
            stages.on_failure(handle)

    def _fire_finally(self, run: TxnRun, success: bool, timed_out: bool) -> None:
        handle = run.handle
        if handle.finally_fired:
            return
        handle.finally_fired = True
        handle.record_stage(Stage.FINALLY, self.now)
        self.cluster.tracer.emit(TraceKind.STAGE, self.now, txn_id=handle.txn_id, node=self.node_id,
                                 stage=Stage.FINALLY.value, success=success, timeout=timed_out)
        if handle.stages.finally_ is not None:
            handle.stages.finally_(handle, success, timed_out)

    # Bookkeeping

    def pending(self) -> List[TxnHandle]:
        return [run.handle for run in self.runs.values() if not run.handle.decided]

    def abandon_pending(self) -> int:
        """Record every undecided transaction with an unknown outcome"""
        handles = self.pending()
        for handle in handles:
            handle.outcome = TxnOutcome.UNKNOWN
            self.record_decision(handle)
            self.runs.pop(handle.txn_id, None)
        return len(handles)
