"""Synthetic detectors and edge/cloud label matching.

The cloud detector is exact by construction: it replays a trace's ground
truth at full confidence.  The edge detector degrades that ground truth with
seeded per-frame noise (missed objects, swapped names, spurious boxes), so
detection quality is a controllable simulation input rather than a model
artifact.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in normalized [0, 1] image coordinates."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box: {self!r}")

    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def center(self) -> tuple[float, float]:
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]


def overlap_ratio(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection-over-union of two boxes. 1.0 iff the boxes coincide."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = a.area() + b.area() - inter
    return inter / union


@dataclass(frozen=True)
class Label:
    """A detected object: class name, detector confidence, bounding box."""

    name: str
    confidence: float
    box: BoundingBox

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence out of range: {self.confidence}")


@dataclass(frozen=True)
class Frame:
    """One trace frame: ground-truth objects plus optional auxiliary input."""

    frame_id: int
    ts_ms: float
    objects: tuple[Label, ...] = ()
    aux: str | None = None


@dataclass(frozen=True)
class EdgeDetectorConfig:
    """Noise model for the fast, inaccurate edge detector.

    mislabel_rate        probability a detected object's name is swapped for
                         another member of its class (or a distractor)
    miss_rate            probability a true object is dropped entirely
    false_positive_rate  expected number of spurious labels per frame
    beta_correct/error   Beta(a, b) confidence distributions for correct and
                         erroneous detections; the correct mean must exceed
                         the erroneous mean
    """

    mislabel_rate: float = 0.0
    miss_rate: float = 0.0
    false_positive_rate: float = 0.0
    beta_correct: tuple[float, float] = (8.0, 2.0)
    beta_error: tuple[float, float] = (2.0, 3.0)
    seed: int = 0
    class_members: Mapping[str, Sequence[str]] | None = None
    distractors: tuple[str, ...] = ()

    def __post_init__(self):
        for name in ("mislabel_rate", "miss_rate"):
            rate = getattr(self, name)
            if not 0.0 <= rate <= 1.0:
                raise ValueError(f"{name} out of [0,1]: {rate}")
        if self.false_positive_rate < 0.0:
            raise ValueError("false_positive_rate must be >= 0")
        ca, cb = self.beta_correct
        ea, eb = self.beta_error
        if ca / (ca + cb) <= ea / (ea + eb):
            raise ValueError("correct-detection confidence mean must exceed erroneous mean")


def _frame_rng(config: EdgeDetectorConfig, frame: Frame) -> random.Random:
    # String seeding is stable across runs and platforms; per-frame streams
    # keep detection independent of frame processing order.
    return random.Random(f"edge:{config.seed}:{frame.frame_id}")


def _mislabel_pool(name: str, config: EdgeDetectorConfig) -> list[str]:
    if config.class_members:
        for members in config.class_members.values():
            if name in members:
                pool = [m for m in members if m != name]
                if pool:
                    return pool
    return [d for d in config.distractors if d != name]


def _spurious_names(config: EdgeDetectorConfig) -> list[str]:
    names: list[str] = []
    if config.class_members:
        for members in config.class_members.values():
            names.extend(members)
    names.extend(config.distractors)
    return names or ["unknown-object"]


def _poisson(rng: random.Random, lam: float) -> int:
    if lam <= 0.0:
        return 0
    limit = math.exp(-lam)
    k, p = 0, 1.0
    while True:
        p *= rng.random()
        if p <= limit:
            return k
        k += 1


def _random_box(rng: random.Random) -> BoundingBox:
    w = rng.uniform(0.05, 0.4)
    h = rng.uniform(0.05, 0.4)
    x0 = rng.uniform(0.0, 1.0 - w)
    y0 = rng.uniform(0.0, 1.0 - h)
    return BoundingBox(x0, y0, x0 + w, y0 + h)


def edge_detect(frame: Frame, config: EdgeDetectorConfig) -> list[Label]:
    """Run the synthetic edge detector over one frame.

    Deterministic given (config.seed, frame_id).  Each true object is
    independently dropped or mislabeled; spurious labels are appended with
    uniformly sampled boxes.  Confidence is drawn from the matching Beta.
    """
    rng = _frame_rng(config, frame)
    out: list[Label] = []
    for obj in frame.objects:
        if rng.random() < config.miss_rate:
            continue
        name = obj.name
        erroneous = False
        if rng.random() < config.mislabel_rate:
            pool = _mislabel_pool(obj.name, config)
            if pool:
                name = rng.choice(pool)
                erroneous = True
        a, b = config.beta_error if erroneous else config.beta_correct
        out.append(Label(name, rng.betavariate(a, b), obj.box))
    spurious_names = _spurious_names(config)
    for _ in range(_poisson(rng, config.false_positive_rate)):
        a, b = config.beta_error
        out.append(Label(rng.choice(spurious_names), rng.betavariate(a, b), _random_box(rng)))
    return out


def cloud_detect(frame: Frame) -> list[Label]:
    """The slow, accurate detector: returns ground truth at confidence 1."""
    return [Label(obj.name, 1.0, obj.box) for obj in frame.objects]


def filter_low_confidence(labels: Iterable[Label], floor: float) -> list[Label]:
    """Drop labels whose confidence falls below the configured floor."""
    if not 0.0 <= floor <= 1.0:
        raise ValueError(f"confidence floor out of [0,1]: {floor}")
    return [lab for lab in labels if lab.confidence >= floor]


class MatchCase(Enum):
    NO_OVERLAP = "no_overlap"
    SAME_NAME = "same_name"
    DIFFERENT_NAME = "different_name"


@dataclass(frozen=True)
class LabelMatch:
    edge: Label
    case: MatchCase
    cloud: Label | None = None
    overlap: float = 0.0


@dataclass(frozen=True)
class MatchOutcome:
    """Edge-to-cloud matching result for one frame.

    Each cloud label is claimed by at most one edge label; the pairing with
    the larger overlap wins.  Cloud labels nobody claimed are reported so the
    caller can start fresh transactions for them.
    """

    matches: tuple[LabelMatch, ...]
    unmatched_cloud: tuple[Label, ...]

    def for_edge(self, edge: Label) -> LabelMatch:
        for m in self.matches:
            if m.edge == edge:
                return m
        raise KeyError(f"no match entry for {edge!r}")


def match_labels(
    edge_labels: Sequence[Label],
    cloud_labels: Sequence[Label],
    overlap_threshold: float = 0.10,
) -> MatchOutcome:
    """Pair edge labels with cloud labels by bounding-box overlap.

    A pairing qualifies when IoU exceeds ``overlap_threshold``.  Pairings are
    assigned greedily by descending overlap (ties broken by cloud label name,
    then by position) so the map from edge labels to cloud labels is injective
    and deterministic.
    """
    if not 0.0 < overlap_threshold <= 1.0:
        raise ValueError(f"overlap threshold out of (0,1]: {overlap_threshold}")
    candidates = []
    for ei, edge in enumerate(edge_labels):
        for ci, cloud in enumerate(cloud_labels):
            ratio = overlap_ratio(edge.box, cloud.box)
            if ratio > overlap_threshold:
                candidates.append((-ratio, cloud.name, ci, ei))
    candidates.sort()

    matched_edge: dict[int, tuple[int, float]] = {}
    claimed_cloud: set[int] = set()
    for neg_ratio, _name, ci, ei in candidates:
        if ei in matched_edge or ci in claimed_cloud:
            continue
        matched_edge[ei] = (ci, -neg_ratio)
        claimed_cloud.add(ci)

    matches = []
    for ei, edge in enumerate(edge_labels):
        if ei in matched_edge:
            ci, ratio = matched_edge[ei]
            cloud = cloud_labels[ci]
            case = MatchCase.SAME_NAME if cloud.name == edge.name else MatchCase.DIFFERENT_NAME
            matches.append(LabelMatch(edge, case, cloud, ratio))
        else:
            matches.append(LabelMatch(edge, MatchCase.NO_OVERLAP))
    unmatched = tuple(
        cloud for ci, cloud in enumerate(cloud_labels) if ci not in claimed_cloud
    )
    return MatchOutcome(tuple(matches), unmatched)


# --- trace file format -------------------------------------------------------
#
# Ground-truth traces are JSON Lines, one frame per line:
#   {"frame_id": 7, "ts_ms": 231.0,
#    "objects": [{"name": "bus", "box": [x0, y0, x1, y1]}], "aux": null}


def frame_to_dict(frame: Frame) -> dict:
    return {
        "frame_id": frame.frame_id,
        "ts_ms": frame.ts_ms,
        "objects": [{"name": o.name, "box": o.box.as_list()} for o in frame.objects],
        "aux": frame.aux,
    }


def frame_from_dict(doc: Mapping) -> Frame:
    objects = tuple(
        Label(o["name"], 1.0, BoundingBox(*o["box"])) for o in doc.get("objects", ())
    )
    return Frame(int(doc["frame_id"]), float(doc["ts_ms"]), objects, doc.get("aux"))


def dump_trace(frames: Iterable[Frame], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for frame in frames:
            fh.write(json.dumps(frame_to_dict(frame), sort_keys=True) + "\n")


def load_trace(path: str | Path) -> list[Frame]:
    frames = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                frames.append(frame_from_dict(json.loads(line)))
    return frames
