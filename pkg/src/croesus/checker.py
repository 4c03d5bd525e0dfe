"""Offline verifiers over recorded section histories.

All three checkers are pure functions of the event list.  Sections execute
atomically under locks, so the commit order is a total order over sections;
what the checkers look for is whether that order satisfies each guarantee:

* section serializability: conflicting sections must not overlap in time
  (an overlap means their operations interleaved, which no serial order of
  atomic sections can explain);

* the strong multi-stage guarantee: for conflicting transactions ordered by
  initial commit, the earlier transaction's final section must commit before
  the later transaction's final section, and before the later transaction's
  initial section whenever those two sections themselves conflict;

* the weak multi-stage guarantee: each transaction's initial commit precedes
  its own final commit; sections of other transactions may interleave freely.

Aborted transactions are excluded everywhere: the guarantees quantify over
committed work only.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from itertools import combinations
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .txn import EventType, History, SectionEvent, SectionKind


class IncompleteHistoryError(ValueError):
    """The history ends with a non-aborted instance missing commit events."""


class ViolationKind(Enum):
    CYCLE_IN_SECTIONS = "cycle_in_sections"
    MSSR_A = "mssr_a"
    MSSR_B = "mssr_b"
    MSIA_ORDER = "msia_order"


@dataclass(frozen=True)
class Violation:
    kind: ViolationKind
    instances: tuple[str, ...]
    witnesses: tuple[SectionEvent, ...]
    detail: str = ""

    def __str__(self) -> str:
        return f"{self.kind.value}: instances={list(self.instances)} {self.detail}"


@dataclass(frozen=True)
class _Section:
    instance_id: str
    kind: SectionKind
    begin_seq: int
    commit_seq: int
    reads: frozenset[str]
    writes: frozenset[str]

    def conflicts(self, other: "_Section") -> frozenset[str]:
        return (
            (self.writes & other.writes)
            | (self.writes & other.reads)
            | (self.reads & other.writes)
        )

    def overlaps(self, other: "_Section") -> bool:
        return not (self.commit_seq < other.begin_seq or other.commit_seq < self.begin_seq)


def _events(history: History | Sequence[SectionEvent]) -> list[SectionEvent]:
    return list(history.events) if isinstance(history, History) else list(history)


def _collect_sections(events: Sequence[SectionEvent]) -> dict[tuple[str, SectionKind], _Section]:
    """Pair begin/commit events per (instance, section); drop aborted instances.

    Raises IncompleteHistoryError when a non-aborted instance has a dangling
    begin or a committed initial section without a final commit.
    """
    aborted = {e.instance_id for e in events if e.kind is EventType.ABORT}
    begins: dict[tuple[str, SectionKind], SectionEvent] = {}
    sections: dict[tuple[str, SectionKind], _Section] = {}
    for event in events:
        if event.instance_id in aborted:
            continue
        key = (event.instance_id, event.section)
        if event.kind is EventType.BEGIN:
            begins[key] = event
        elif event.kind is EventType.COMMIT:
            begin = begins.pop(key, None)
            begin_seq = begin.seq if begin is not None else event.seq
            reads = event.reads | (begin.reads if begin is not None else frozenset())
            writes = event.writes | (begin.writes if begin is not None else frozenset())
            sections[key] = _Section(event.instance_id, event.section, begin_seq, event.seq, reads, writes)
    if begins:
        inst, kind = next(iter(begins))
        raise IncompleteHistoryError(f"{inst}: {kind.value} section began but never committed")
    for (inst, kind) in list(sections):
        if kind is SectionKind.INITIAL and (inst, SectionKind.FINAL) not in sections:
            raise IncompleteHistoryError(f"{inst}: initial committed but final never did")
    return sections


def check_section_serializability(
    history: History | Sequence[SectionEvent],
) -> list[Violation]:
    """Empty iff the precedence graph over committed sections is acyclic.

    Edges follow commit order between conflicting sections; a conflicting
    pair whose [begin, commit] intervals overlap cannot be ordered either way
    and is reported as a cycle.
    """
    sections = list(_collect_sections(_events(history)).values())
    violations = []
    by_key: dict[str, list[_Section]] = {}
    for section in sections:
        for key in section.reads | section.writes:
            by_key.setdefault(key, []).append(section)
    seen: set[tuple] = set()
    for key, touching in sorted(by_key.items()):
        for a, b in combinations(touching, 2):
            pair_id = tuple(sorted([(a.instance_id, a.kind.value), (b.instance_id, b.kind.value)]))
            if pair_id in seen:
                continue
            seen.add(pair_id)
            if a.instance_id == b.instance_id:
                continue
            conflict_keys = a.conflicts(b)
            if conflict_keys and a.overlaps(b):
                violations.append(
                    Violation(
                        ViolationKind.CYCLE_IN_SECTIONS,
                        (a.instance_id, b.instance_id),
                        _witnesses(history, {a.begin_seq, a.commit_seq, b.begin_seq, b.commit_seq}),
                        f"conflicting sections overlap on {sorted(conflict_keys)}",
                    )
                )
    return violations


def _txn_pairs(sections: Mapping[tuple[str, SectionKind], _Section]):
    """Unique pairs of distinct transactions with at least one conflicting key."""
    by_instance: dict[str, list[_Section]] = {}
    for (inst, _kind), section in sections.items():
        by_instance.setdefault(inst, []).append(section)
    by_key: dict[str, set[str]] = {}
    for inst, secs in by_instance.items():
        for section in secs:
            for key in section.reads | section.writes:
                by_key.setdefault(key, set()).add(inst)
    candidate_pairs: set[tuple[str, str]] = set()
    for insts in by_key.values():
        for a, b in combinations(sorted(insts), 2):
            candidate_pairs.add((a, b))
    for a, b in sorted(candidate_pairs):
        if any(sa.conflicts(sb) for sa in by_instance[a] for sb in by_instance[b]):
            yield a, b


def check_mssr(history: History | Sequence[SectionEvent]) -> list[Violation]:
    """Verify the strong multi-stage ordering over every conflicting pair.

    With k the transaction whose initial section committed first:
    (a) k's final commits after k's initial and before j's final;
    (b) if k's final conflicts with j's initial, k's final commits first.
    """
    events = _events(history)
    sections = _collect_sections(events)
    violations = []
    for a, b in _txn_pairs(sections):
        ia, fa = sections.get((a, SectionKind.INITIAL)), sections.get((a, SectionKind.FINAL))
        ib, fb = sections.get((b, SectionKind.INITIAL)), sections.get((b, SectionKind.FINAL))
        if ia is None or fa is None or ib is None or fb is None:
            continue
        if ia.commit_seq < ib.commit_seq:
            k_i, k_f, j_i, j_f, k, j = ia, fa, ib, fb, a, b
        else:
            k_i, k_f, j_i, j_f, k, j = ib, fb, ia, fa, b, a
        if not (k_i.commit_seq < k_f.commit_seq < j_f.commit_seq):
            violations.append(
                Violation(
                    ViolationKind.MSSR_A,
                    (k, j),
                    _witnesses(events, {k_i.commit_seq, k_f.commit_seq, j_f.commit_seq}),
                    "earlier transaction's final section not ordered between its "
                    "initial and the later transaction's final",
                )
            )
        if k_f.conflicts(j_i) and not (k_f.commit_seq < j_i.commit_seq):
            violations.append(
                Violation(
                    ViolationKind.MSSR_B,
                    (k, j),
                    _witnesses(events, {k_f.commit_seq, j_i.commit_seq}),
                    f"final/initial conflict on {sorted(k_f.conflicts(j_i))} ordered backwards",
                )
            )
    return violations


def check_msia(history: History | Sequence[SectionEvent]) -> list[Violation]:
    """Verify that each committed transaction's initial commit precedes its final commit."""
    events = _events(history)
    sections = _collect_sections(events)
    violations = []
    instances = sorted({inst for inst, _ in sections})
    for inst in instances:
        initial = sections.get((inst, SectionKind.INITIAL))
        final = sections.get((inst, SectionKind.FINAL))
        if initial is None or final is None:
            continue
        if not initial.commit_seq < final.commit_seq:
            violations.append(
                Violation(
                    ViolationKind.MSIA_ORDER,
                    (inst,),
                    _witnesses(events, {initial.commit_seq, final.commit_seq}),
                    "final commit not after initial commit",
                )
            )
    return violations


def _witnesses(
    history: History | Sequence[SectionEvent], seqs: Iterable[int]
) -> tuple[SectionEvent, ...]:
    events = _events(history)
    wanted = set(seqs)
    return tuple(e for e in events if e.seq in wanted)


def load_history(path: str | Path) -> list[SectionEvent]:
    return History.load_events(path)
