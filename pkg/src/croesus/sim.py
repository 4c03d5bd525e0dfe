"""Deterministic discrete-event simulation of the edge-cloud pipeline.

Logical time is real-valued milliseconds.  Events fire in nondecreasing time
order with ties broken by scheduling order, so a run is bit-reproducible from
(trace, config, seed).  Protocol executors are generators over effects; the
engine interprets lock acquisition against per-partition FIFO lock tables,
models atomic-commitment message latency between partitions, and records the
section history, lock-hold spans and per-frame latencies as it goes.

Frame flow: a frame reaches the edge after half a client round trip, the edge
detector runs, low-confidence labels are dropped, the threshold pair sorts
the rest into discard/keep/validate, surviving labels trigger initial
sections, and the frame goes to the cloud only when something fell in the
validate interval.  Cloud labels (ground truth) then drive the final
sections, including fresh transactions for cloud labels nothing matched；
frames kept away from the cloud run their final sections immediately with
the kept labels standing in for the corrected ones.
"""

from __future__ import annotations

import dataclasses
import heapq
import random
import statistics
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from itertools import count
from typing import Callable, Iterable, Mapping, Sequence

from . import cc
from .cc import (
    Acquire,
    ApologyOutcome,
    Busy,
    CommitWrites,
    ProtocolMode,
    Release,
    SectionResult,
    lock_requests,
)
from .detect import (
    EdgeDetectorConfig,
    Frame,
    Label,
    MatchCase,
    cloud_detect,
    edge_detect,
    filter_low_confidence,
    match_labels,
)
from .store import LockMode, Store, coalesce_requests, partition_id
from .thresholds import (
    Classification,
    FrameDetections,
    ThresholdPair,
    TraceStats,
    classify,
    end_to_end_fscore,
)
from .txn import (
    EventType,
    History,
    InstanceState,
    SectionKind,
    TransactionInstance,
    TransactionsBank,
    instantiate,
    read_dependents,
    state_key,
)


class EventKind(Enum):
    FRAME_ARRIVES = "frame_arrives"
    EDGE_DETECTED = "edge_detected"
    INITIAL_DONE = "initial_done"
    CLOUD_DETECTED = "cloud_detected"
    FINAL_DONE = "final_done"
    LOCK_RETRY = "lock_retry"
    MESSAGE_2PC = "message_2pc"


@dataclass(frozen=True)
class Event:
    fire_ms: float
    seq: int
    kind: EventKind


@dataclass
class SimConfig:
    protocol: ProtocolMode = ProtocolMode.MSIA
    edge_detect_latency_ms: float = 90.0
    cloud_detect_latency_ms: float = 1200.0
    client_rtt_ms: float = 60.0
    cloud_rtt_ms: float = 60.0
    inter_edge_latency_ms: float | None = None  # None: half the cloud RTT
    thresholds: ThresholdPair | None = None  # None: every detected frame validates
    confidence_floor: float = 0.0
    lock_timeout_ms: float = 50.0
    batch_size: int = 50
    sequencer: bool = False
    per_op_cost_ms: float = 0.05
    seed: int = 0
    partitions: int = 1
    vote_abort_rate: float = 0.0
    overlap_threshold: float = 0.10
    detector: EdgeDetectorConfig = field(default_factory=EdgeDetectorConfig)

    def __post_init__(self):
        for name in (
            "edge_detect_latency_ms",
            "cloud_detect_latency_ms",
            "client_rtt_ms",
            "cloud_rtt_ms",
            "lock_timeout_ms",
            "per_op_cost_ms",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.partitions < 1:
            raise ValueError("partitions must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.vote_abort_rate <= 1.0:
            raise ValueError("vote_abort_rate out of [0,1]")
        if not 0.0 <= self.confidence_floor <= 1.0:
            raise ValueError("confidence_floor out of [0,1]")

    @property
    def inter_edge_ms(self) -> float:
        if self.inter_edge_latency_ms is not None:
            return self.inter_edge_latency_ms
        return self.cloud_rtt_ms / 2.0


@dataclass(frozen=True)
class LockSpan:
    txn_id: str
    key: str
    section: SectionKind
    protocol: str
    grant_ms: float
    release_ms: float

    @property
    def hold_ms(self) -> float:
        return self.release_ms - self.grant_ms


@dataclass
class TwoPCRound:
    txn_id: str
    section: SectionKind
    participants: tuple[int, ...]
    votes: dict[int, bool]
    committed: bool
    applied: list[int] = field(default_factory=list)


@dataclass(frozen=True)
class FrameRow:
    frame_id: int
    initial_latency_ms: float
    final_latency_ms: float
    sent_to_cloud: bool
    apology_outcome: str


@dataclass(frozen=True)
class LatencySummary:
    mean: float
    p50: float
    max: float

    @staticmethod
    def of(samples: Sequence[float]) -> "LatencySummary":
        if not samples:
            return LatencySummary(0.0, 0.0, 0.0)
        return LatencySummary(
            statistics.fmean(samples), statistics.median(samples), max(samples)
        )

    def to_dict(self) -> dict:
        return {"mean_ms": self.mean, "p50_ms": self.p50, "max_ms": self.max}


@dataclass
class Metrics:
    frames: int = 0
    instances: int = 0
    committed: int = 0
    aborted: int = 0
    abort_rate: float = 0.0
    bu: float = 0.0
    precision: float = 0.0
    recall: float = 0.0
    fscore: float = 0.0
    initial_latency: LatencySummary = field(default_factory=lambda: LatencySummary(0, 0, 0))
    final_latency: LatencySummary = field(default_factory=lambda: LatencySummary(0, 0, 0))
    lock_hold_ms: dict[str, float] = field(default_factory=dict)
    apologies: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "frames": self.frames,
            "instances": self.instances,
            "committed": self.committed,
            "aborted": self.aborted,
            "abort_rate": self.abort_rate,
            "bu": self.bu,
            "precision": self.precision,
            "recall": self.recall,
            "fscore": self.fscore,
            "initial_latency": self.initial_latency.to_dict(),
            "final_latency": self.final_latency.to_dict(),
            "lock_hold_ms": dict(sorted(self.lock_hold_ms.items())),
            "apologies": dict(sorted(self.apologies.items())),
        }


@dataclass
class RunResult:
    metrics: Metrics
    history: History
    frame_rows: list[FrameRow]
    detections: list[FrameDetections] | None
    lock_spans: list[LockSpan]
    twopc_rounds: list[TwoPCRound]
    store: Store
    instances: list[TransactionInstance]


def measure_lock_hold(spans: Sequence[LockSpan]) -> dict[str, float]:
    """Mean lock-hold duration per protocol and per protocol/section."""
    buckets: dict[str, list[float]] = {}
    for span in spans:
        buckets.setdefault(span.protocol, []).append(span.hold_ms)
        buckets.setdefault(f"{span.protocol}.{span.section.value}", []).append(span.hold_ms)
    return {name: statistics.fmean(values) for name, values in sorted(buckets.items())}


@dataclass
class ScheduledTxn:
    """One transaction's run plan for instance-level (frameless) simulations."""

    inst: TransactionInstance
    arrive_ms: float = 0.0
    final_after_ms: float | None = None  # None: final directly after initial commit
    corrected_label: Label | None = None
    match_case: MatchCase | None = None
    retry_on_abort: bool = False
    max_attempts: int = 25


@dataclass
class _Task:
    gen: object
    inst: TransactionInstance
    on_done: Callable | None


@dataclass
class _AcquireState:
    task: _Task
    eff: Acquire
    pending: deque
    undo: list
    waiter: object | None = None
    done: bool = False


class Engine:
    """Event loop, lock effect interpreter, and run recorder."""

    def __init__(
        self,
        config: SimConfig,
        store: Store,
        *,
        history: History | None = None,
        executors: tuple[Callable, Callable] | None = None,
        protocol_label: str | None = None,
    ):
        self.config = config
        self.store = store
        self.history = history or History()
        self.now = 0.0
        self.rng = random.Random(f"engine:{config.seed}")
        self.lock_timeout_ms = config.lock_timeout_ms
        self.per_op_cost_ms = config.per_op_cost_ms
        self._heap: list = []
        self._eseq = count()
        self.instances: list[TransactionInstance] = []
        self.lock_spans: list[LockSpan] = []
        self._grants: dict[tuple[str, str], tuple[float, SectionKind]] = {}
        self.twopc_rounds: list[TwoPCRound] = []
        self.apology_counts: dict[str, int] = {}
        self.vote_fn: Callable[[str, int], bool] | None = None
        if executors is not None:
            self._run_initial, self._run_final = executors
            self.protocol_label = protocol_label or "CUSTOM"
        else:
            self._run_initial = cc.INITIAL_EXECUTORS[config.protocol]
            self._run_final = cc.FINAL_EXECUTORS[config.protocol]
            self.protocol_label = config.protocol.value
        # serial section executor (sequencer mode)
        self._serial: deque = deque()
        self._serial_busy = False

    # -- event loop -----------------------------------------------------------

    def schedule(self, at_ms: float, kind: EventKind, fn: Callable[[], None]) -> Event:
        if at_ms < self.now - 1e-9:
            raise ValueError(f"cannot schedule into the past ({at_ms} < {self.now})")
        event = Event(max(at_ms, self.now), next(self._eseq), kind)
        heapq.heappush(self._heap, (event.fire_ms, event.seq, event, fn))
        return event

    def run(self) -> None:
        while self._heap:
            fire_ms, _seq, _event, fn = heapq.heappop(self._heap)
            self.now = fire_ms
            fn()

    # -- protocol environment hooks (shared with cc.DirectEnv's interface) -----

    def record_begin(self, inst, section, reads, writes):
        self.history.record(
            inst.instance_id, section, EventType.BEGIN, reads=reads, writes=writes, ts_ms=self.now
        )

    def record_commit(self, inst, section, result: SectionResult):
        self.history.record(
            inst.instance_id,
            section,
            EventType.COMMIT,
            reads=result.reads_touched,
            writes=result.writes_touched,
            ts_ms=self.now,
        )
        inst.responses[section] = result.response
        if section is SectionKind.INITIAL:
            inst.advance(InstanceState.INITIAL_COMMITTED)
        else:
            inst.advance(InstanceState.FINAL_COMMITTED)
            if result.apology is not None:
                inst.apology = result.apology
                name = result.apology.outcome.value
                self.apology_counts[name] = self.apology_counts.get(name, 0) + 1

    def record_abort(self, inst, section, *, begun: bool):
        if begun:
            self.history.record(inst.instance_id, section, EventType.ABORT, ts_ms=self.now)
        inst.advance(InstanceState.ABORTED)

    def read_dependents(self, txn_id: str) -> set[str]:
        return read_dependents(self.history, self.store, txn_id)

    # -- generator driving ------------------------------------------------------

    def spawn(self, gen, inst: TransactionInstance, on_done: Callable | None = None) -> None:
        self._step(_Task(gen, inst, on_done), None)

    def _step(self, task: _Task, send_value) -> None:
        while True:
            try:
                effect = task.gen.send(send_value)
            except StopIteration as stop:
                if task.on_done is not None:
                    task.on_done(bool(stop.value))
                return
            if isinstance(effect, Busy):
                if effect.ms <= 0.0:
                    send_value = None
                    continue
                self.schedule(
                    self.now + effect.ms, EventKind.LOCK_RETRY, lambda t=task: self._step(t, None)
                )
                return
            if isinstance(effect, Release):
                self._release(task.inst.instance_id, effect.keys or None)
                send_value = None
                continue
            if isinstance(effect, Acquire):
                self._begin_acquire(task, effect)
                return
            if isinstance(effect, CommitWrites):
                resolved, value = self._begin_commit(task, effect)
                if resolved:
                    send_value = value
                    continue
                return
            raise TypeError(f"unknown effect {effect!r}")

    # -- lock acquisition under logical time ------------------------------------

    def _begin_acquire(self, task: _Task, eff: Acquire) -> None:
        state = _AcquireState(task, eff, deque(coalesce_requests(eff.requests)), [])
        deadline = self.now + eff.timeout_ms
        self.schedule(deadline, EventKind.LOCK_RETRY, lambda: self._acquire_timeout(state))
        self._acquire_continue(state)

    def _acquire_continue(self, state: _AcquireState) -> None:
        txn = state.task.inst.instance_id
        while state.pending:
            key, mode = state.pending[0]
            table = self.store.table_for(key)
            prior = table.holds(txn, key)
            status = table.try_lock(txn, key, mode)
            if status == "noop":
                state.pending.popleft()
                continue
            if status in ("granted", "upgraded"):
                state.undo.append((key, prior))
                state.pending.popleft()
                continue
            if status == "upgrade-busy":
                self._acquire_fail(state)
                return
            state.waiter = table.enqueue(
                txn, key, mode, wake=lambda s=state: self._acquire_granted(s)
            )
            return
        self._acquire_success(state)

    def _acquire_granted(self, state: _AcquireState) -> None:
        if state.done:
            return
        key, _mode = state.pending.popleft()
        state.undo.append((key, None))
        state.waiter = None
        self._acquire_continue(state)

    def _acquire_timeout(self, state: _AcquireState) -> None:
        if state.done:
            return
        self._acquire_fail(state)

    def _acquire_fail(self, state: _AcquireState) -> None:
        state.done = True
        txn = state.task.inst.instance_id
        if state.waiter is not None:
            table = self.store.table_for(state.waiter.key)
            if not table.cancel(state.waiter):
                # granted at the same instant the timeout fired; release it too
                state.undo.append((state.waiter.key, None))
            state.waiter = None
        for key, prior in reversed(state.undo):
            table = self.store.table_for(key)
            if prior is LockMode.SHARED:
                table.downgrade(txn, key)
            else:
                table.unlock(txn, key)
        self._step(state.task, False)

    def _acquire_success(self, state: _AcquireState) -> None:
        state.done = True
        txn = state.task.inst.instance_id
        for key, prior in state.undo:
            if (txn, key) not in self._grants:
                self._grants[(txn, key)] = (self.now, state.eff.section)
        self._step(state.task, True)

    def _release(self, txn: str, keys: Iterable[str] | None) -> None:
        targets = sorted(keys) if keys is not None else self.store.held_keys(txn)
        for key in targets:
            grant = self._grants.pop((txn, key), None)
            if grant is not None:
                grant_ms, section = grant
                self.lock_spans.append(
                    LockSpan(txn, key, section, self.protocol_label, grant_ms, self.now)
                )
            self.store.table_for(key).unlock(txn, key)

    # -- section commits and atomic commitment -----------------------------------

    def _vote(self, txn_id: str, pid: int) -> bool:
        if self.vote_fn is not None:
            return self.vote_fn(txn_id, pid)
        if self.config.vote_abort_rate <= 0.0:
            return True
        return self.rng.random() >= self.config.vote_abort_rate

    def _apply_writes(self, txn_id: str, writes: Mapping[str, object], require_lock: bool) -> None:
        for key in sorted(writes):
            self.store.write(key, writes[key], txn_id, require_lock=require_lock)

    def _begin_commit(self, task: _Task, eff: CommitWrites) -> tuple[bool, bool]:
        """Apply one section's buffered writes; returns (resolved_now, committed)."""
        writes = eff.result.writes
        txn = task.inst.instance_id
        if not writes:
            return True, True
        by_pid: dict[int, dict[str, object]] = {}
        for key, payload in writes.items():
            by_pid.setdefault(self.store.partition_of(key).pid, {})[key] = payload
        participants = sorted(by_pid)
        if not eff.use_2pc or len(participants) <= 1:
            self._apply_writes(txn, writes, eff.require_lock)
            return True, True

        home = task.inst.home_partition
        lat = self.config.inter_edge_ms

        def delay(pid: int) -> float:
            return 0.0 if pid == home else lat

        votes: dict[int, bool] = {}
        round_log = TwoPCRound(txn, eff.section, tuple(participants), votes, False)
        for pid in participants:
            self.schedule(
                self.now + 2.0 * delay(pid),
                EventKind.MESSAGE_2PC,
                lambda p=pid: votes.__setitem__(p, self._vote(txn, p)),
            )
        decide_at = self.now + 2.0 * max(delay(p) for p in participants)

        def decide() -> None:
            committed = all(votes[p] for p in participants)
            round_log.committed = committed
            self.twopc_rounds.append(round_log)
            if not committed:
                self._step(task, False)
                return
            resume_at = self.now + max(delay(p) for p in participants)
            for pid in participants:
                def apply_one(p=pid):
                    self._apply_writes(txn, by_pid[p], eff.require_lock)
                    round_log.applied.append(p)
                self.schedule(self.now + delay(pid), EventKind.MESSAGE_2PC, apply_one)
            self.schedule(resume_at, EventKind.MESSAGE_2PC, lambda: self._step(task, True))

        self.schedule(decide_at, EventKind.MESSAGE_2PC, decide)
        return False, False

    # -- serial (sequencer) execution ---------------------------------------------

    def submit_section(self, ready_ms: float, start: Callable[[Callable], None]) -> None:
        """Run a section through the engine; in sequencer mode sections are
        executed one at a time in submission order so they never overlap."""
        if not self.config.sequencer:
            self.schedule(ready_ms, EventKind.INITIAL_DONE, lambda: start(lambda: None))
            return
        self._serial.append((ready_ms, start))
        self._serial_pump()

    def _serial_pump(self) -> None:
        if self._serial_busy or not self._serial:
            return
        ready_ms, start = self._serial[0]
        if ready_ms > self.now:
            self.schedule(ready_ms, EventKind.INITIAL_DONE, self._serial_pump)
            return
        self._serial.popleft()
        self._serial_busy = True

        def completed() -> None:
            self._serial_busy = False
            self._serial_pump()

        start(completed)

    # -- instance lifecycle --------------------------------------------------------

    def launch_initial(self, inst: TransactionInstance, ready_ms: float, on_done: Callable) -> None:
        inst.home_partition = partition_id(inst.instance_id, self.store.n_partitions)
        self.instances.append(inst)

        def start(completed: Callable) -> None:
            def finish(committed: bool) -> None:
                completed()
                on_done(committed)

            self.spawn(self._run_initial(inst, self), inst, on_done=finish)

        self.submit_section(ready_ms, start)

    def launch_final(self, inst: TransactionInstance, ready_ms: float, on_done: Callable) -> None:
        def start(completed: Callable) -> None:
            def finish(committed: bool) -> None:
                completed()
                on_done(committed)

            self.spawn(self._run_final(inst, self), inst, on_done=finish)

        self.submit_section(ready_ms, start)

    def assert_quiescent(self) -> None:
        for inst in self.instances:
            if inst.state not in (InstanceState.FINAL_COMMITTED, InstanceState.ABORTED):
                raise AssertionError(f"{inst.instance_id} ended in state {inst.state.value}")
        self.store.audit()


def _clone_for_retry(inst: TransactionInstance, attempt: int) -> TransactionInstance:
    new_id = f"{inst.instance_id}~r{attempt}"
    old_sk, new_sk = state_key(inst.instance_id), state_key(new_id)

    def swap(keys: frozenset[str]) -> frozenset[str]:
        return frozenset(new_sk if k == old_sk else k for k in keys)

    clone = TransactionInstance(
        instance_id=new_id,
        template=inst.template,
        frame_id=inst.frame_id,
        trigger_label=inst.trigger_label,
        edge_labels=inst.edge_labels,
        aux=inst.aux,
        params=dict(inst.params),
        class_members=inst.class_members,
    )
    clone.keys = dataclasses.replace(
        inst.keys,
        initial_reads=swap(inst.keys.initial_reads),
        initial_writes=swap(inst.keys.initial_writes),
        final_reads=swap(inst.keys.final_reads),
        final_writes=swap(inst.keys.final_writes),
    )
    return clone


def run_instances(
    items: Sequence[ScheduledTxn],
    config: SimConfig,
    *,
    store: Store | None = None,
    seed_data: Mapping[str, object] | None = None,
    executors: tuple[Callable, Callable] | None = None,
    protocol_label: str | None = None,
) -> RunResult:
    """Run explicitly scheduled transaction instances (no detection pipeline)."""
    if store is None:
        store = Store(config.partitions)
    if seed_data:
        store.seed(seed_data)
    engine = Engine(config, store, executors=executors, protocol_label=protocol_label)

    def start_item(item: ScheduledTxn, inst: TransactionInstance, attempt: int) -> None:
        def on_initial(committed: bool) -> None:
            if committed:
                inst.set_correction(
                    item.corrected_label,
                    item.match_case
                    or (
                        MatchCase.DIFFERENT_NAME
                        if item.corrected_label is not None
                        and inst.trigger_label is not None
                        and item.corrected_label.name != inst.trigger_label.name
                        else MatchCase.SAME_NAME
                    ),
                )
                if item.corrected_label is not None:
                    inst.cloud_labels = (item.corrected_label,)
                ready = (
                    engine.now
                    if item.final_after_ms is None
                    else max(engine.now, item.arrive_ms + item.final_after_ms)
                )
                engine.launch_final(inst, ready, lambda _ok: None)
            elif item.retry_on_abort and attempt + 1 < item.max_attempts:
                backoff = engine.rng.uniform(1.0, 2.0) * (2 ** min(attempt, 6))
                retry = _clone_for_retry(item.inst, attempt + 1)
                engine.schedule(
                    engine.now + backoff,
                    EventKind.LOCK_RETRY,
                    lambda: start_item(item, retry, attempt + 1),
                )

        engine.launch_initial(inst, max(engine.now, item.arrive_ms), on_initial)

    if config.sequencer:
        batches = cc.sequence_batch(list(items), config.batch_size)
        batch_iter = iter(batches)

        def submit_next_batch() -> None:
            batch = next(batch_iter, None)
            if batch is None:
                return
            outstanding = {"n": len(batch)}

            for item in batch:
                def on_initial(committed: bool, item=item) -> None:
                    inst = item.inst
                    if committed:
                        inst.set_correction(item.corrected_label, item.match_case or MatchCase.SAME_NAME)
                        ready = (
                            engine.now
                            if item.final_after_ms is None
                            else max(engine.now, item.arrive_ms + item.final_after_ms)
                        )
                        engine.launch_final(inst, ready, lambda _ok: done())
                    else:
                        done()

                def done() -> None:
                    outstanding["n"] -= 1
                    if outstanding["n"] == 0:
                        submit_next_batch()

                engine.launch_initial(item.inst, max(engine.now, item.arrive_ms), on_initial)

        engine.schedule(0.0, EventKind.FRAME_ARRIVES, submit_next_batch)
    else:
        for item in items:
            engine.schedule(
                item.arrive_ms,
                EventKind.FRAME_ARRIVES,
                lambda it=item: start_item(it, it.inst, 0),
            )

    engine.run()
    engine.assert_quiescent()
    return _collect_result(engine, frames=0, frame_rows=[], detections=None, sent=0)


def _collect_result(
    engine: Engine,
    *,
    frames: int,
    frame_rows: list[FrameRow],
    detections: list[FrameDetections] | None,
    sent: int,
    prf: tuple[float, float, float] = (0.0, 0.0, 0.0),
) -> RunResult:
    committed = sum(1 for i in engine.instances if i.state is InstanceState.FINAL_COMMITTED)
    aborted = sum(1 for i in engine.instances if i.state is InstanceState.ABORTED)
    total = len(engine.instances)
    metrics = Metrics(
        frames=frames,
        instances=total,
        committed=committed,
        aborted=aborted,
        abort_rate=aborted / total if total else 0.0,
        bu=sent / frames if frames else 0.0,
        precision=prf[0],
        recall=prf[1],
        fscore=prf[2],
        initial_latency=LatencySummary.of([r.initial_latency_ms for r in frame_rows]),
        final_latency=LatencySummary.of([r.final_latency_ms for r in frame_rows]),
        lock_hold_ms=measure_lock_hold(engine.lock_spans),
        apologies=dict(sorted(engine.apology_counts.items())),
    )
    return RunResult(
        metrics=metrics,
        history=engine.history,
        frame_rows=frame_rows,
        detections=detections,
        lock_spans=engine.lock_spans,
        twopc_rounds=engine.twopc_rounds,
        store=engine.store,
        instances=engine.instances,
    )


# --- the full detection-to-transaction pipeline --------------------------------


_APOLOGY_RANK = {
    ApologyOutcome.CONFIRMED: 0,
    ApologyOutcome.CORRECTED: 1,
    ApologyOutcome.RETRACTED: 2,
}


class _FrameState:
    __slots__ = (
        "frame",
        "t0",
        "sent",
        "cloud_arrived",
        "surviving",
        "match",
        "open_initials",
        "open_finals",
        "last_initial_resp",
        "last_final_resp",
        "apology_rank",
        "done",
        "instances",
        "finals_launched",
    )

    def __init__(self, frame: Frame, t0: float):
        self.frame = frame
        self.t0 = t0
        self.sent = False
        self.cloud_arrived = False
        self.surviving: list[Label] = []
        self.match = None
        self.open_initials = 0
        self.open_finals = 0
        self.last_initial_resp = t0
        self.last_final_resp = t0
        self.apology_rank = -1
        self.done = False
        self.instances: list[TransactionInstance] = []
        self.finals_launched: set[str] = set()


class _Pipeline:
    def __init__(self, engine: Engine, bank: TransactionsBank, config: SimConfig,
                 detector: EdgeDetectorConfig):
        self.engine = engine
        self.bank = bank
        self.config = config
        self.detector = detector
        self.detections: list[FrameDetections] = []
        self.frame_rows: list[FrameRow] = []
        self.sent_frames = 0
        self._next_instance = count(1)

    # frame entry -------------------------------------------------------------

    def frame_arrives(self, frame: Frame) -> None:
        engine = self.engine
        fs = _FrameState(frame, engine.now)
        at_edge = engine.now + self.config.client_rtt_ms / 2.0
        engine.schedule(
            at_edge + self.config.edge_detect_latency_ms,
            EventKind.EDGE_DETECTED,
            lambda: self.edge_detected(fs),
        )

    def edge_detected(self, fs: _FrameState) -> None:
        engine = self.engine
        config = self.config
        labels = filter_low_confidence(
            edge_detect(fs.frame, self.detector), config.confidence_floor
        )
        self.detections.append(FrameDetections(fs.frame, tuple(labels)))
        pair = config.thresholds or ThresholdPair(0.0, 1.0)
        surviving: list[Label] = []
        validating = 0
        for label in labels:
            cls = classify(label.confidence, pair)
            if cls is Classification.DISCARD:
                continue
            if cls is Classification.VALIDATE:
                validating += 1
            surviving.append(label)
        fs.surviving = surviving
        fs.sent = validating > 0
        base_resp = engine.now + config.client_rtt_ms / 2.0
        fs.last_initial_resp = base_resp
        fs.last_final_resp = base_resp

        for inst in self._trigger_instances(fs):
            self._launch_initial(fs, inst)

        if fs.sent:
            self.sent_frames += 1
            cloud_at = engine.now + config.cloud_rtt_ms + config.cloud_detect_latency_ms
            engine.schedule(cloud_at, EventKind.CLOUD_DETECTED, lambda: self.cloud_detected(fs))
        self._maybe_finish(fs)

    # triggering ----------------------------------------------------------------

    def _new_instance(self, fs: _FrameState, template, trigger: Label | None) -> TransactionInstance:
        iid = f"t{next(self._next_instance):05d}"
        members = ()
        if template.trigger_class is not None:
            members = self.bank.members(template.trigger_class)
        elif trigger is not None:
            cls = self.bank.class_of(trigger.name)
            if cls is not None:
                members = self.bank.members(cls)
        inst = instantiate(
            template,
            iid,
            trigger_label=trigger,
            edge_labels=tuple(fs.surviving),
            aux=fs.frame.aux,
            frame_id=fs.frame.frame_id,
            class_members=members,
            rng=random.Random(f"bind:{self.config.seed}:{iid}"),
        )
        fs.instances.append(inst)
        return inst

    def _trigger_instances(self, fs: _FrameState) -> list[TransactionInstance]:
        out = []
        for label in fs.surviving:
            cls = self.bank.class_of(label.name)
            if cls is None:
                continue
            for tid in sorted(self.bank.lookup_triggers([label])):
                template = self.bank.template(tid)
                if template.trigger_aux is None:
                    out.append(self._new_instance(fs, template, label))
        if fs.frame.aux is not None:
            aux_ids = self.bank.lookup_triggers(fs.surviving, fs.frame.aux)
            only_aux = aux_ids - self.bank.lookup_triggers(fs.surviving, None)
            for tid in sorted(only_aux):
                template = self.bank.template(tid)
                trigger = self._centermost(fs.surviving, template.trigger_class)
                out.append(self._new_instance(fs, template, trigger))
        return out

    def _centermost(self, labels: Sequence[Label], required_class: str | None) -> Label | None:
        candidates = []
        for label in labels:
            if required_class is not None and self.bank.class_of(label.name) != required_class:
                continue
            cx, cy = label.box.center()
            dist = (cx - 0.5) ** 2 + (cy - 0.5) ** 2
            candidates.append((dist, label.name, label))
        if not candidates:
            return None
        return min(candidates, key=lambda c: (c[0], c[1]))[2]

    # section lifecycle -----------------------------------------------------------

    def _launch_initial(self, fs: _FrameState, inst: TransactionInstance) -> None:
        engine = self.engine
        fs.open_initials += 1

        def on_done(committed: bool) -> None:
            fs.open_initials -= 1
            fs.last_initial_resp = max(
                fs.last_initial_resp, engine.now + self.config.client_rtt_ms / 2.0
            )
            if committed:
                fs.open_finals += 1
                if not fs.sent:
                    # withheld from the cloud: the kept labels stand as corrected
                    inst.set_correction(inst.trigger_label, MatchCase.SAME_NAME)
                    self._launch_final(fs, inst)
                elif fs.cloud_arrived:
                    self._provide_final(fs, inst)
            self._maybe_finish(fs)

        engine.launch_initial(inst, engine.now, on_done)

    def cloud_detected(self, fs: _FrameState) -> None:
        engine = self.engine
        fs.cloud_arrived = True
        cloud_labels = cloud_detect(fs.frame)
        fs.match = match_labels(fs.surviving, cloud_labels, self.config.overlap_threshold)
        fs.last_final_resp = max(
            fs.last_final_resp, engine.now + self.config.client_rtt_ms / 2.0
        )
        for inst in list(fs.instances):
            if inst.state is InstanceState.INITIAL_COMMITTED:
                self._provide_final(fs, inst)
        # cloud labels nobody matched start a fresh initial+final pair
        for label in fs.match.unmatched_cloud:
            cls = self.bank.class_of(label.name)
            if cls is None:
                continue
            for tid in sorted(self.bank.lookup_triggers([label])):
                template = self.bank.template(tid)
                if template.trigger_aux is not None:
                    continue
                inst = self._new_instance(fs, template, label)
                inst.edge_labels = (label,)
                fs.open_initials += 1

                def on_done(committed: bool, inst=inst) -> None:
                    fs.open_initials -= 1
                    fs.last_initial_resp = max(
                        fs.last_initial_resp, engine.now + self.config.client_rtt_ms / 2.0
                    )
                    if committed:
                        fs.open_finals += 1
                        inst.set_correction(inst.trigger_label, MatchCase.SAME_NAME)
                        inst.cloud_labels = tuple(cloud_detect(fs.frame))
                        self._launch_final(fs, inst)
                    self._maybe_finish(fs)

                engine.launch_initial(inst, engine.now, on_done)
        self._maybe_finish(fs)

    def _provide_final(self, fs: _FrameState, inst: TransactionInstance) -> None:
        if inst.instance_id in fs.finals_launched:
            return
        if inst.trigger_label is not None and fs.match is not None:
            entry = fs.match.for_edge(inst.trigger_label)
            inst.set_correction(entry.cloud, entry.case)
        else:
            inst.set_correction(None, MatchCase.SAME_NAME)
        inst.cloud_labels = tuple(cloud_detect(fs.frame))
        self._launch_final(fs, inst)

    def _launch_final(self, fs: _FrameState, inst: TransactionInstance) -> None:
        engine = self.engine
        fs.finals_launched.add(inst.instance_id)

        def on_done(_committed: bool) -> None:
            fs.open_finals -= 1
            fs.last_final_resp = max(
                fs.last_final_resp, engine.now + self.config.client_rtt_ms / 2.0
            )
            if inst.apology is not None:
                fs.apology_rank = max(fs.apology_rank, _APOLOGY_RANK[inst.apology.outcome])
            self._maybe_finish(fs)

        engine.launch_final(inst, engine.now, on_done)

    def _maybe_finish(self, fs: _FrameState) -> None:
        if fs.done or fs.open_initials or fs.open_finals:
            return
        if fs.sent and not fs.cloud_arrived:
            return
        fs.done = True
        outcome = ""
        for name, rank in _APOLOGY_RANK.items():
            if rank == fs.apology_rank:
                outcome = name.value
        self.frame_rows.append(
            FrameRow(
                fs.frame.frame_id,
                fs.last_initial_resp - fs.t0,
                max(fs.last_final_resp, fs.last_initial_resp) - fs.t0,
                fs.sent,
                outcome,
            )
        )


def run(trace: Sequence[Frame], bundle, config: SimConfig) -> RunResult:
    """Simulate the full pipeline over a ground-truth trace.

    ``bundle`` is a workload app bundle: transaction templates, label classes
    and seed data (see the workload module).  Deterministic given (trace,
    config contents, seed).
    """
    if not trace:
        return run_instances([], config)
    store = Store(config.partitions)
    if bundle.seed_data:
        store.seed(bundle.seed_data)
    bank = TransactionsBank()
    for name, members in sorted(bundle.label_classes.items()):
        bank.add_label_class(name, members)
    for template in bundle.templates:
        bank.register_template(template)
    detector = config.detector
    if detector.class_members is None:
        detector = dataclasses.replace(detector, class_members=dict(bundle.label_classes))

    engine = Engine(config, store)
    pipeline = _Pipeline(engine, bank, config, detector)
    for frame in trace:
        engine.schedule(
            frame.ts_ms, EventKind.FRAME_ARRIVES, lambda f=frame: pipeline.frame_arrives(f)
        )
    engine.run()
    engine.assert_quiescent()

    pair = config.thresholds or ThresholdPair(0.0, 1.0)
    stats = TraceStats(pipeline.detections, config.overlap_threshold)
    prf = end_to_end_fscore(stats, pair)
    pipeline.frame_rows.sort(key=lambda r: r.frame_id)
    return _collect_result(
        engine,
        frames=len(trace),
        frame_rows=pipeline.frame_rows,
        detections=pipeline.detections,
        sent=pipeline.sent_frames,
        prf=(prf.precision, prf.recall, prf.fscore),
    )


def contention_bench(
    key_ranges: Sequence[int],
    config: SimConfig,
    *,
    batches: int = 4,
    txns_per_batch: int = 50,
    updates_per_txn: int = 5,
) -> list[dict]:
    """Hot-spot stress runs; one row per key range with abort rate and lock holds."""
    from .workload import gen_hotspot

    rows = []
    for key_range in key_ranges:
        instance_batches = gen_hotspot(
            key_range,
            txns_per_batch=txns_per_batch,
            updates_per_txn=updates_per_txn,
            batches=batches,
            seed=config.seed,
        )
        final_after = config.cloud_rtt_ms + config.cloud_detect_latency_ms
        batch_gap = final_after + 10.0 * config.lock_timeout_ms + 100.0
        items = []
        for b, batch in enumerate(instance_batches):
            for inst in batch:
                items.append(
                    ScheduledTxn(inst, arrive_ms=b * batch_gap, final_after_ms=final_after)
                )
        result = run_instances(items, config)
        rows.append(
            {
                "key_range": key_range,
                "protocol": config.protocol.value + ("+seq" if config.sequencer else ""),
                "abort_rate": result.metrics.abort_rate,
                "instances": result.metrics.instances,
                "lock_hold_ms": result.metrics.lock_hold_ms,
            }
        )
    return rows
