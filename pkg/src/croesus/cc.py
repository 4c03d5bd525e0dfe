"""Concurrency control for multi-stage transactions.

Two protocols are implemented as generators that yield effects (lock
acquisition, time cost, section commit, lock release) so the same protocol
logic runs unchanged under the discrete-event engine (logical time) and under
the direct blocking driver (wall-clock, usable from plain threads):

* MSSR / two-stage locking: the initial section locks its own keys, then the
  final section's keys (resolved conservatively, since corrected labels are
  not known yet), and only then commits the initial section.  Every lock is
  held until the final section commits, which guarantees the final section
  can never be blocked or aborted once the client saw the initial commit.

* MSIA: the initial section locks, executes, commits and releases
  immediately.  The final section locks the keys implied by the actual
  corrected labels, retrying with bounded backoff on timeout; it carries the
  application's invariant checks and apologies and must eventually commit.

A deliberately weakened executor pair (test-only) releases initial locks like
MSIA but runs the final section with no locking at all; it exists to
demonstrate the lost-update anomaly that the real protocols exclude.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Generator, Iterable, Mapping, Sequence

from .detect import MatchCase
from .store import LockMode, ProtocolViolation, Store
from .txn import (
    EventType,
    InstanceState,
    SectionKind,
    TransactionInstance,
    read_dependents,
    state_key,
)


class ProtocolMode(Enum):
    MSSR = "MSSR"
    MSIA = "MSIA"


class ApologyOutcome(Enum):
    CONFIRMED = "confirmed"
    CORRECTED = "corrected"
    RETRACTED = "retracted"


@dataclass(frozen=True)
class ApologyReport:
    instance_id: str
    outcome: ApologyOutcome
    retracted_writes: tuple[str, ...] = ()
    compensating_writes: tuple[str, ...] = ()
    message: str = ""

    def __post_init__(self):
        if self.outcome is ApologyOutcome.CONFIRMED and (
            self.retracted_writes or self.compensating_writes
        ):
            raise ValueError("a confirmed outcome cannot carry retractions or compensations")


@dataclass(frozen=True)
class CommitDecision:
    committed: bool
    votes: Mapping[int, bool]


# --- effects yielded by protocol executors ------------------------------------


@dataclass(frozen=True)
class Acquire:
    requests: tuple[tuple[str, LockMode], ...]
    timeout_ms: float
    section: SectionKind


@dataclass(frozen=True)
class Release:
    keys: tuple[str, ...] = ()  # empty means every key the transaction holds


@dataclass(frozen=True)
class Busy:
    ms: float


@dataclass(frozen=True)
class CommitWrites:
    section: SectionKind
    result: "SectionResult"
    use_2pc: bool = False
    require_lock: bool = True


@dataclass
class SectionResult:
    writes: dict[str, object]
    reads_touched: frozenset[str]
    writes_touched: frozenset[str]
    response: object = None
    apology: ApologyReport | None = None

    @property
    def op_count(self) -> int:
        return len(self.reads_touched) + len(self.writes_touched)


class SectionContext:
    """What a section body sees: buffered reads/writes bounded by declared sets.

    Writes go into a buffer that is only applied at the section's commit
    point, so an aborted section leaves no trace.  Reads see the buffer first
    and fall through to committed state.
    """

    def __init__(
        self,
        store: Store,
        inst: TransactionInstance,
        kind: SectionKind,
        read_set: frozenset[str],
        write_set: frozenset[str],
        *,
        enforce_locks: bool = True,
        dependents: frozenset[str] = frozenset(),
    ):
        self._store = store
        self.instance = inst
        self.kind = kind
        self._read_set = read_set
        self._write_set = write_set
        self._enforce_locks = enforce_locks
        self._buffer: dict[str, object] = {}
        self._touched_reads: set[str] = set()
        self._touched_writes: set[str] = set()
        self._response: object = None
        self._apology: ApologyReport | None = None
        self.dependents = dependents

    # input conveniences
    @property
    def labels(self) -> tuple:
        return self.instance.edge_labels

    @property
    def trigger(self):
        return self.instance.trigger_label

    @property
    def corrected(self):
        return self.instance.corrected_label

    @property
    def match_case(self):
        return self.instance.match_case

    @property
    def aux(self):
        return self.instance.aux

    @property
    def params(self) -> dict:
        return self.instance.params

    def read(self, key: str):
        if key not in self._read_set and key not in self._write_set:
            raise ProtocolViolation(
                f"{self.instance.instance_id}/{self.kind.value}: read of {key!r} outside declared sets"
            )
        self._touched_reads.add(key)
        if key in self._buffer:
            return self._buffer[key]
        value = self._store.read(
            key, txn_id=self.instance.instance_id if self._enforce_locks else None
        )
        return None if value is None else value.payload

    def write(self, key: str, payload: object) -> None:
        if key not in self._write_set:
            raise ProtocolViolation(
                f"{self.instance.instance_id}/{self.kind.value}: write of {key!r} outside declared sets"
            )
        self._touched_writes.add(key)
        self._buffer[key] = payload

    def stash(self, state: object) -> None:
        """Persist state for the final section through the instance's own key."""
        self._touched_writes.add(state_key(self.instance.instance_id))
        self._buffer[state_key(self.instance.instance_id)] = state

    def recall(self):
        return self.read(state_key(self.instance.instance_id))

    def respond(self, payload: object) -> None:
        self._response = payload

    def apologize(
        self,
        outcome: ApologyOutcome,
        *,
        retracted: Sequence[str] = (),
        compensating: Sequence[str] = (),
        message: str = "",
    ) -> None:
        self._apology = ApologyReport(
            self.instance.instance_id,
            outcome,
            tuple(sorted(retracted)),
            tuple(sorted(compensating)),
            message,
        )

    def finish(self) -> SectionResult:
        apology = self._apology
        if apology is None and self.kind is SectionKind.FINAL:
            apology = ApologyReport(self.instance.instance_id, ApologyOutcome.CONFIRMED)
        return SectionResult(
            writes=dict(self._buffer),
            reads_touched=frozenset(self._touched_reads),
            writes_touched=frozenset(self._touched_writes),
            response=self._response,
            apology=apology,
        )


def lock_requests(
    reads: Iterable[str], writes: Iterable[str]
) -> tuple[tuple[str, LockMode], ...]:
    writes = set(writes)
    requests = [(key, LockMode.EXCLUSIVE) for key in writes]
    requests.extend((key, LockMode.SHARED) for key in set(reads) - writes)
    return tuple(sorted(requests, key=lambda kv: kv[0]))


def _run_body(env, inst: TransactionInstance, kind: SectionKind, *, enforce_locks=True) -> SectionResult:
    if kind is SectionKind.INITIAL:
        reads, writes = inst.initial_access()
        program = inst.template.initial
    else:
        reads, writes = _final_sets(env, inst)
        program = inst.template.final
    dependents = frozenset(inst.params.get("_dependents", ()))
    ctx = SectionContext(
        env.store, inst, kind, reads, writes,
        enforce_locks=enforce_locks, dependents=dependents,
    )
    if program.body is not None:
        result = program.body(ctx)
        if result is not None and ctx._response is None:
            ctx.respond(result)
    return ctx.finish()


def _final_sets(env, inst: TransactionInstance) -> tuple[frozenset[str], frozenset[str]]:
    """Final-section key sets against the actual corrected label."""
    if inst.template.final_keys is not None:
        reads, writes = inst.template.final_keys(inst, inst.corrected_label, env)
        return frozenset(reads) | {state_key(inst.instance_id)}, frozenset(writes)
    return inst.final_access(inst.corrected_label)


# --- protocol executors --------------------------------------------------------


def mssr_run_initial(inst: TransactionInstance, env) -> Generator:
    """Initial section under two-stage locking.

    Lock the initial section's keys, execute, then lock the final section's
    conservatively resolved keys.  Only after both acquisitions does the
    initial commit happen; a failure on either batch aborts with everything
    from this transaction released.
    """
    initial_reads, initial_writes = inst.initial_access()
    ok = yield Acquire(lock_requests(initial_reads, initial_writes), env.lock_timeout_ms, SectionKind.INITIAL)
    if not ok:
        env.record_abort(inst, SectionKind.INITIAL, begun=False)
        return False

    env.record_begin(inst, SectionKind.INITIAL, initial_reads, initial_writes)
    result = _run_body(env, inst, SectionKind.INITIAL)
    yield Busy(result.op_count * env.per_op_cost_ms)

    final_reads, final_writes = inst.final_access(conservative=True)
    if inst.template.final_keys is not None:
        # data-dependent finals cannot be predicted; over-approximate with the
        # hook's view of "everything it might touch" given no correction yet
        final_reads2, final_writes2 = inst.template.final_keys(inst, None, env)
        final_reads = final_reads | frozenset(final_reads2)
        final_writes = final_writes | frozenset(final_writes2)
    ok = yield Acquire(lock_requests(final_reads, final_writes), env.lock_timeout_ms, SectionKind.FINAL)
    if not ok:
        env.record_abort(inst, SectionKind.INITIAL, begun=True)
        yield Release()
        return False

    yield CommitWrites(SectionKind.INITIAL, result)  # no atomic-commitment round here
    env.record_commit(inst, SectionKind.INITIAL, result)
    return True


def mssr_run_final(inst: TransactionInstance, env) -> Generator:
    """Final section under two-stage locking: executes under locks already
    held since before the initial commit, so it cannot abort; all locks are
    released afterwards."""
    reads, writes = _final_sets(env, inst)
    env.record_begin(inst, SectionKind.FINAL, reads, writes)
    result = _run_body(env, inst, SectionKind.FINAL)
    yield Busy(result.op_count * env.per_op_cost_ms)
    while not (yield CommitWrites(SectionKind.FINAL, result, use_2pc=True)):
        # an injected vote-abort may delay, but never cancel, the final commit
        yield Busy(1.0)
    env.record_commit(inst, SectionKind.FINAL, result)
    yield Release()
    return True


def msia_run_initial(inst: TransactionInstance, env) -> Generator:
    """Initial section with locks scoped to the section itself."""
    reads, writes = inst.initial_access()
    ok = yield Acquire(lock_requests(reads, writes), env.lock_timeout_ms, SectionKind.INITIAL)
    if not ok:
        env.record_abort(inst, SectionKind.INITIAL, begun=False)
        return False
    env.record_begin(inst, SectionKind.INITIAL, reads, writes)
    result = _run_body(env, inst, SectionKind.INITIAL)
    yield Busy(result.op_count * env.per_op_cost_ms)
    applied = yield CommitWrites(SectionKind.INITIAL, result, use_2pc=True)
    if not applied:
        env.record_abort(inst, SectionKind.INITIAL, begun=True)
        yield Release()
        return False
    env.record_commit(inst, SectionKind.INITIAL, result)
    yield Release()
    return True


_BACKOFF_START_MS = 1.0
_BACKOFF_CAP_MS = 64.0


def msia_run_final(inst: TransactionInstance, env) -> Generator:
    """Final section with locks derived from the actual corrected labels.

    Lock timeouts are retried with exponential backoff instead of aborting:
    once a client has seen an initial commit the final section must commit.
    """
    if inst.template.final_keys is not None and "_dependents" not in inst.params:
        inst.params["_dependents"] = tuple(sorted(env.read_dependents(inst.instance_id)))
    reads, writes = _final_sets(env, inst)
    requests = lock_requests(reads, writes)
    backoff = _BACKOFF_START_MS
    while not (yield Acquire(requests, env.lock_timeout_ms, SectionKind.FINAL)):
        yield Busy(backoff)
        backoff = min(backoff * 2.0, _BACKOFF_CAP_MS)
    env.record_begin(inst, SectionKind.FINAL, reads, writes)
    result = _run_body(env, inst, SectionKind.FINAL)
    yield Busy(result.op_count * env.per_op_cost_ms)
    backoff = _BACKOFF_START_MS
    while not (yield CommitWrites(SectionKind.FINAL, result, use_2pc=True)):
        yield Busy(backoff)
        backoff = min(backoff * 2.0, _BACKOFF_CAP_MS)
    env.record_commit(inst, SectionKind.FINAL, result)
    yield Release()
    return True


def weakened_run_initial(inst: TransactionInstance, env) -> Generator:
    """TEST ONLY: like the MSIA initial section (locks released at commit)."""
    return (yield from msia_run_initial(inst, env))


def weakened_run_final(inst: TransactionInstance, env) -> Generator:
    """TEST ONLY: final section with no locking or conflict handling at all.

    Exists to reproduce the lost-update anomaly (two concurrent
    read-then-increment transactions ending with a single increment) that the
    real protocols rule out.  Never use outside tests.
    """
    reads, writes = _final_sets(env, inst)
    env.record_begin(inst, SectionKind.FINAL, reads, writes)
    result = _run_body(env, inst, SectionKind.FINAL, enforce_locks=False)
    yield Busy(result.op_count * env.per_op_cost_ms)
    yield CommitWrites(SectionKind.FINAL, result, require_lock=False)
    env.record_commit(inst, SectionKind.FINAL, result)
    return True


INITIAL_EXECUTORS = {
    ProtocolMode.MSSR: mssr_run_initial,
    ProtocolMode.MSIA: msia_run_initial,
}
FINAL_EXECUTORS = {
    ProtocolMode.MSSR: mssr_run_final,
    ProtocolMode.MSIA: msia_run_final,
}


def sequence_batch(
    instances: Sequence[TransactionInstance], batch_size: int = 50
) -> list[list[TransactionInstance]]:
    """Partition instances into order-preserving batches for serial execution.

    The sequencer executes each batch's sections one at a time, so conflicting
    sections never overlap and no lock wait can ever time out: the abort rate
    under sequenced execution is exactly zero.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    return [list(instances[i : i + batch_size]) for i in range(0, len(instances), batch_size)]


def two_phase_commit(
    store: Store,
    txn_id: str,
    writes: Mapping[str, object],
    vote_fn: Callable[[str, int], bool] | None = None,
    *,
    require_lock: bool = True,
) -> CommitDecision:
    """Atomic commitment of one section's writes across partitions.

    Every participant (a partition holding at least one written key) votes;
    the writes are applied on all participants iff every vote is yes.
    """
    by_partition: dict[int, dict[str, object]] = {}
    for key, payload in writes.items():
        pid = store.partition_of(key).pid
        by_partition.setdefault(pid, {})[key] = payload
    votes = {
        pid: (vote_fn(txn_id, pid) if vote_fn is not None else True)
        for pid in sorted(by_partition)
    }
    committed = all(votes.values())
    if committed:
        for pid in sorted(by_partition):
            for key, payload in sorted(by_partition[pid].items()):
                store.write(key, payload, txn_id, require_lock=require_lock)
    return CommitDecision(committed, votes)


# --- direct (blocking) driver ----------------------------------------------


class DirectEnv:
    """Protocol environment for immediate execution against a store.

    Lock waits use wall-clock timeouts; time costs are ignored.  Suitable for
    unit tests and multi-threaded contention experiments where logical time
    is irrelevant.
    """

    def __init__(self, store: Store, history=None, *, lock_timeout_ms: float = 50.0,
                 per_op_cost_ms: float = 0.05, vote_fn=None, on_apology=None):
        from .txn import History

        self.store = store
        self.history = history if history is not None else History()
        self.lock_timeout_ms = lock_timeout_ms
        self.per_op_cost_ms = per_op_cost_ms
        self.vote_fn = vote_fn
        self.now = 0.0
        self._on_apology = on_apology

    def record_begin(self, inst, section, reads, writes):
        self.history.record(inst.instance_id, section, EventType.BEGIN,
                            reads=reads, writes=writes, ts_ms=self.now)

    def record_commit(self, inst, section, result: SectionResult):
        self.history.record(inst.instance_id, section, EventType.COMMIT,
                            reads=result.reads_touched, writes=result.writes_touched,
                            ts_ms=self.now)
        inst.responses[section] = result.response
        if section is SectionKind.INITIAL:
            inst.advance(InstanceState.INITIAL_COMMITTED)
        else:
            inst.advance(InstanceState.FINAL_COMMITTED)
            if result.apology is not None:
                inst.apology = result.apology
                if self._on_apology:
                    self._on_apology(result.apology)

    def record_abort(self, inst, section, *, begun: bool):
        if begun:
            self.history.record(inst.instance_id, section, EventType.ABORT, ts_ms=self.now)
        inst.advance(InstanceState.ABORTED)

    def read_dependents(self, txn_id: str) -> set[str]:
        return read_dependents(self.history, self.store, txn_id)


def run_plan(gen: Generator, inst: TransactionInstance, env: DirectEnv) -> bool:
    """Drive a protocol executor to completion with blocking lock waits."""
    send_value = None
    while True:
        try:
            effect = gen.send(send_value)
        except StopIteration as stop:
            return bool(stop.value)
        if isinstance(effect, Acquire):
            send_value = env.store.acquire_locks(
                inst.instance_id, effect.requests, effect.timeout_ms
            )
        elif isinstance(effect, Busy):
            send_value = None
        elif isinstance(effect, Release):
            keys = effect.keys or None
            env.store.release_locks(inst.instance_id, keys)
            send_value = None
        elif isinstance(effect, CommitWrites):
            decision = two_phase_commit(
                env.store,
                inst.instance_id,
                effect.result.writes,
                env.vote_fn if effect.use_2pc else None,
                require_lock=effect.require_lock,
            )
            send_value = decision.committed
        else:
            raise TypeError(f"unknown effect {effect!r}")


def run_transaction(inst: TransactionInstance, env: DirectEnv, mode: ProtocolMode) -> bool:
    """Run both sections back to back under the direct driver."""
    committed = run_plan(INITIAL_EXECUTORS[mode](inst, env), inst, env)
    if not committed:
        return False
    return run_plan(FINAL_EXECUTORS[mode](inst, env), inst, env)
