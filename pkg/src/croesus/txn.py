"""Multi-stage transaction model.

A transaction template carries two section programs.  The initial section
runs on edge-detected labels and must answer quickly; the final section runs
later, once corrected labels are available, and confirms or repairs what the
initial section did.  A transactions bank maps label classes and auxiliary
inputs to templates, and a totally ordered history records every section
begin/commit so the offline checkers can replay the run.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .detect import Label
from .store import ProtocolViolation, Store


class SectionKind(Enum):
    INITIAL = "initial"
    FINAL = "final"


class InstanceState(Enum):
    PENDING = "pending"
    INITIAL_COMMITTED = "initial_committed"
    FINAL_COMMITTED = "final_committed"
    ABORTED = "aborted"


_LEGAL_TRANSITIONS = {
    InstanceState.PENDING: {InstanceState.INITIAL_COMMITTED, InstanceState.ABORTED},
    InstanceState.INITIAL_COMMITTED: {InstanceState.FINAL_COMMITTED},
    InstanceState.FINAL_COMMITTED: set(),
    InstanceState.ABORTED: set(),
}


@dataclass(frozen=True)
class SectionProgram:
    """Declared read/write key patterns plus the section body.

    Patterns may contain ``{label}`` (expanded over trigger label names) and
    ``{id}`` (the instance id).  The body is a deterministic function of the
    section context; it may only touch keys matched by the declared sets,
    which is enforced at runtime.
    """

    reads: tuple[str, ...] = ()
    writes: tuple[str, ...] = ()
    body: Callable | None = None


@dataclass(frozen=True)
class TransactionTemplate:
    template_id: str
    initial: SectionProgram
    final: SectionProgram
    trigger_class: str | None = None
    trigger_aux: str | None = None
    # Optional hooks for workloads whose key sets are data dependent:
    #   bind_keys(rng, instance) -> SectionKeys, called once at instantiation
    #   final_keys(instance, corrected_label, env) -> (reads, writes), called
    #     when the final section is about to lock (sees actual labels and may
    #     consult the dependency query)
    bind_keys: Callable | None = None
    final_keys: Callable | None = None


@dataclass
class SectionKeys:
    initial_reads: frozenset[str] = frozenset()
    initial_writes: frozenset[str] = frozenset()
    final_reads: frozenset[str] = frozenset()
    final_writes: frozenset[str] = frozenset()


def state_key(instance_id: str) -> str:
    """Instance-scoped key through which the initial section hands state forward."""
    return f"txn:{instance_id}:state"


def _expand(patterns: Iterable[str], names: Iterable[str], instance_id: str) -> set[str]:
    out: set[str] = set()
    names = list(names)
    for pattern in patterns:
        if "{label}" in pattern:
            for name in names:
                out.add(pattern.replace("{label}", name).replace("{id}", instance_id))
        else:
            out.add(pattern.replace("{id}", instance_id))
    return out


@dataclass
class TransactionInstance:
    """One triggered transaction: identity, inputs, resolved key sets, state."""

    instance_id: str
    template: TransactionTemplate
    frame_id: int | None = None
    trigger_label: Label | None = None
    edge_labels: tuple[Label, ...] = ()
    aux: str | None = None
    params: dict = field(default_factory=dict)
    class_members: tuple[str, ...] = ()
    keys: SectionKeys = field(default_factory=SectionKeys)
    state: InstanceState = InstanceState.PENDING
    cloud_labels: tuple[Label, ...] | None = None
    corrected_label: Label | None = None
    match_case: object | None = None  # detect.MatchCase, set before the final section
    responses: dict = field(default_factory=dict)
    apology: object | None = None  # cc.ApologyReport
    home_partition: int = 0

    def advance(self, new_state: InstanceState) -> None:
        if new_state not in _LEGAL_TRANSITIONS[self.state]:
            raise ProtocolViolation(
                f"{self.instance_id}: illegal state transition {self.state.value} -> {new_state.value}"
            )
        self.state = new_state

    def initial_access(self) -> tuple[frozenset[str], frozenset[str]]:
        return self.keys.initial_reads, self.keys.initial_writes

    def final_access(
        self, corrected: Label | None = None, *, conservative: bool = False
    ) -> tuple[frozenset[str], frozenset[str]]:
        """Key sets for the final section.

        Conservative resolution expands label patterns over the whole trigger
        class (the corrected label is unknown when locks must be taken ahead
        of time); actual resolution expands over the trigger and corrected
        names only.
        """
        prog = self.template.final
        names: set[str] = set()
        if self.trigger_label is not None:
            names.add(self.trigger_label.name)
        if conservative:
            names.update(self.class_members)
        elif corrected is not None:
            names.add(corrected.name)
        reads = frozenset(_expand(prog.reads, names, self.instance_id)) | {state_key(self.instance_id)}
        writes = frozenset(_expand(prog.writes, names, self.instance_id))
        return reads, writes

    def set_correction(self, corrected: Label | None, case: object | None = None) -> None:
        self.corrected_label = corrected
        self.match_case = case


def instantiate(
    template: TransactionTemplate,
    instance_id: str,
    *,
    trigger_label: Label | None = None,
    edge_labels: Sequence[Label] = (),
    aux: str | None = None,
    frame_id: int | None = None,
    params: Mapping | None = None,
    class_members: Sequence[str] = (),
    rng=None,
) -> TransactionInstance:
    """Create an instance and resolve its declared key sets."""
    inst = TransactionInstance(
        instance_id=instance_id,
        template=template,
        frame_id=frame_id,
        trigger_label=trigger_label,
        edge_labels=tuple(edge_labels),
        aux=aux,
        params=dict(params or {}),
        class_members=tuple(class_members),
    )
    if template.bind_keys is not None:
        keys = template.bind_keys(rng, inst)
    else:
        trigger_names = {trigger_label.name} if trigger_label else set()
        final_names = set(trigger_names) | set(class_members)
        keys = SectionKeys(
            initial_reads=frozenset(_expand(template.initial.reads, trigger_names, instance_id)),
            initial_writes=frozenset(_expand(template.initial.writes, trigger_names, instance_id)),
            final_reads=frozenset(_expand(template.final.reads, final_names, instance_id)),
            final_writes=frozenset(_expand(template.final.writes, final_names, instance_id)),
        )
    sk = state_key(instance_id)
    inst.keys = SectionKeys(
        initial_reads=frozenset(keys.initial_reads),
        initial_writes=frozenset(keys.initial_writes) | {sk},
        final_reads=frozenset(keys.final_reads) | {sk},
        final_writes=frozenset(keys.final_writes),
    )
    return inst


class TransactionsBank:
    """Registry mapping label classes and auxiliary inputs to templates.

    Label classes are disjoint sets of label names.  A template triggered by
    an auxiliary input may additionally require a label class to be present
    in the same frame.
    """

    def __init__(self):
        self._classes: dict[str, set[str]] = {}
        self._name_to_class: dict[str, str] = {}
        self._templates: dict[str, TransactionTemplate] = {}
        self._by_class: dict[str, list[TransactionTemplate]] = {}
        self._by_aux: dict[str, list[TransactionTemplate]] = {}

    def add_label_class(self, name: str, members: Iterable[str]) -> None:
        for member in members:
            owner = self._name_to_class.get(member)
            if owner is not None and owner != name:
                raise ValueError(f"label {member!r} already belongs to class {owner!r}")
        bucket = self._classes.setdefault(name, set())
        for member in members:
            bucket.add(member)
            self._name_to_class[member] = name

    def class_of(self, label_name: str) -> str | None:
        return self._name_to_class.get(label_name)

    def members(self, class_name: str) -> tuple[str, ...]:
        return tuple(sorted(self._classes.get(class_name, ())))

    def register_template(self, template: TransactionTemplate) -> None:
        if template.template_id in self._templates:
            raise ValueError(f"duplicate template id {template.template_id!r}")
        if template.trigger_class is not None and template.trigger_class not in self._classes:
            self._classes.setdefault(template.trigger_class, set())
        self._templates[template.template_id] = template
        if template.trigger_aux is not None:
            self._by_aux.setdefault(template.trigger_aux, []).append(template)
        elif template.trigger_class is not None:
            self._by_class.setdefault(template.trigger_class, []).append(template)

    def template(self, template_id: str) -> TransactionTemplate:
        return self._templates[template_id]

    def templates(self) -> list[TransactionTemplate]:
        return [self._templates[tid] for tid in sorted(self._templates)]

    def lookup_triggers(
        self, labels: Sequence[Label], aux_input: str | None = None
    ) -> set[str]:
        """Template ids triggered by a filtered label set plus auxiliary input.

        Pure function of the registered rows: labels outside every class
        contribute nothing; an aux row paired with a class fires only when a
        label of that class is present.
        """
        out: set[str] = set()
        present_classes = {self._name_to_class[l.name] for l in labels if l.name in self._name_to_class}
        for label in labels:
            cls = self._name_to_class.get(label.name)
            if cls is None:
                continue
            for template in self._by_class.get(cls, ()):
                out.add(template.template_id)
        if aux_input is not None:
            for template in self._by_aux.get(aux_input, ()):
                if template.trigger_class is None or template.trigger_class in present_classes:
                    out.add(template.template_id)
        return out


class EventType(Enum):
    BEGIN = "begin"
    COMMIT = "commit"
    ABORT = "abort"


@dataclass(frozen=True)
class SectionEvent:
    seq: int
    ts_ms: float
    instance_id: str
    section: SectionKind
    kind: EventType
    reads: frozenset[str] = frozenset()
    writes: frozenset[str] = frozenset()

    def to_dict(self) -> dict:
        return {
            "seq": self.seq,
            "ts_ms": self.ts_ms,
            "instance": self.instance_id,
            "section": self.section.value,
            "kind": self.kind.value,
            "reads": sorted(self.reads),
            "writes": sorted(self.writes),
        }

    @staticmethod
    def from_dict(doc: Mapping) -> "SectionEvent":
        return SectionEvent(
            seq=int(doc["seq"]),
            ts_ms=float(doc.get("ts_ms", 0.0)),
            instance_id=doc["instance"],
            section=SectionKind(doc["section"]),
            kind=EventType(doc["kind"]),
            reads=frozenset(doc.get("reads", ())),
            writes=frozenset(doc.get("writes", ())),
        )


# Per-instance event order: begin(initial) < commit(initial) < begin(final)
# < commit(final).  An abort may replace any step up to and including
# commit(initial); once the initial section has committed the final section
# must commit, so aborts after that point are rejected.
_EXPECTED_NEXT = {
    None: {(SectionKind.INITIAL, EventType.BEGIN)},
    (SectionKind.INITIAL, EventType.BEGIN): {
        (SectionKind.INITIAL, EventType.COMMIT),
        (SectionKind.INITIAL, EventType.ABORT),
    },
    (SectionKind.INITIAL, EventType.COMMIT): {(SectionKind.FINAL, EventType.BEGIN)},
    (SectionKind.FINAL, EventType.BEGIN): {(SectionKind.FINAL, EventType.COMMIT)},
    (SectionKind.FINAL, EventType.COMMIT): set(),
    (SectionKind.INITIAL, EventType.ABORT): set(),
}


class History:
    """Append-only, totally ordered record of section events."""

    def __init__(self):
        self._mu = threading.Lock()
        self.events: list[SectionEvent] = []
        self._last: dict[str, tuple[SectionKind, EventType]] = {}

    def record(
        self,
        instance_id: str,
        section: SectionKind,
        kind: EventType,
        *,
        reads: Iterable[str] = (),
        writes: Iterable[str] = (),
        ts_ms: float = 0.0,
    ) -> int:
        with self._mu:
            last = self._last.get(instance_id)
            if (section, kind) not in _EXPECTED_NEXT[last]:
                raise ProtocolViolation(
                    f"{instance_id}: out-of-order event {section.value}/{kind.value} after {last}"
                )
            seq = len(self.events) + 1
            event = SectionEvent(
                seq, ts_ms, instance_id, section, kind, frozenset(reads), frozenset(writes)
            )
            self.events.append(event)
            self._last[instance_id] = (section, kind)
            return seq

    def __len__(self) -> int:
        return len(self.events)

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for event in self.events:
                fh.write(json.dumps(event.to_dict(), sort_keys=True) + "\n")

    @staticmethod
    def load_events(path: str | Path) -> list[SectionEvent]:
        events = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    events.append(SectionEvent.from_dict(json.loads(line)))
        return events


def read_dependents(
    history: History | Sequence[SectionEvent], store: Store | None, txn_id: str
) -> set[str]:
    """Instances that (transitively) read keys written by ``txn_id``.

    A direct dependent read a key after the target committed a write to it;
    the result closes that relation transitively.  Used by apology logic to
    decide what to retract.
    """
    events = history.events if isinstance(history, History) else list(history)
    commits = [e for e in events if e.kind is EventType.COMMIT]
    known = {e.instance_id for e in events}
    if txn_id not in known and not _wrote_in_store(store, txn_id):
        raise KeyError(f"unknown transaction {txn_id!r}")

    writes_at: dict[str, list[tuple[int, str]]] = {}
    reads_at: dict[str, list[tuple[int, str]]] = {}
    for event in commits:
        for key in event.writes:
            writes_at.setdefault(key, []).append((event.seq, event.instance_id))
        for key in event.reads:
            reads_at.setdefault(key, []).append((event.seq, event.instance_id))

    result: set[str] = set()
    frontier = [txn_id]
    while frontier:
        current = frontier.pop()
        first_write: dict[str, int] = {}
        for key, writers in writes_at.items():
            for seq, writer in writers:
                if writer == current and (key not in first_write or seq < first_write[key]):
                    first_write[key] = seq
        if store is not None:
            for key in _store_keys_written_by(store, current):
                first_write.setdefault(key, 0)
        for key, wseq in first_write.items():
            for rseq, reader in reads_at.get(key, ()):
                if rseq > wseq and reader != txn_id and reader not in result:
                    result.add(reader)
                    frontier.append(reader)
    return result


def _wrote_in_store(store: Store | None, txn_id: str) -> bool:
    if store is None:
        return False
    return any(_store_keys_written_by(store, txn_id))


def _store_keys_written_by(store: Store, txn_id: str) -> list[str]:
    keys = []
    for part in store.partitions:
        for key in part.keys():
            if part._data[key].writer == txn_id:
                keys.append(key)
    return keys
