"""Bandwidth thresholding: classify detections and tune the threshold pair.

A pair (theta_low, theta_high) splits detection confidences into three
intervals: below theta_low the detection is discarded as a likely false
positive, above theta_high it is kept as-is without cloud verification, and
in between the frame is sent to the cloud for validation.  The bandwidth
ratio delta is the fraction of frames with at least one detection in the
validate interval; the end-to-end F-score measures what the client ends up
seeing once validated frames are corrected.  The optimizers search for the
pair that minimizes delta subject to a minimum F-score mu.
"""

from __future__ import annotations

import bisect
import json
import random
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .detect import BoundingBox, EdgeDetectorConfig, Frame, Label, edge_detect, overlap_ratio

DEFAULT_GRID_STEP = 0.05
DEFAULT_MU = 0.8
DEFAULT_OVERLAP = 0.10


class Classification(Enum):
    DISCARD = "discard"
    KEEP = "keep"
    VALIDATE = "validate"


@dataclass(frozen=True)
class ThresholdPair:
    theta_low: float
    theta_high: float

    def __post_init__(self):
        if not (0.0 <= self.theta_low <= self.theta_high <= 1.0):
            raise ValueError(f"invalid threshold pair ({self.theta_low}, {self.theta_high})")


def classify(confidence: float, pair: ThresholdPair) -> Classification:
    """Place one confidence value into the discard/keep/validate interval."""
    if not 0.0 <= confidence <= 1.0:
        raise ValueError(f"confidence out of [0,1]: {confidence}")
    if confidence < pair.theta_low:
        return Classification.DISCARD
    if confidence > pair.theta_high:
        return Classification.KEEP
    return Classification.VALIDATE


@dataclass(frozen=True)
class FrameDetections:
    """Ground truth plus the edge detections recorded for one frame."""

    frame: Frame
    detections: tuple[Label, ...]


DetectionTrace = Sequence[FrameDetections]


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    fscore: float


def fscore(precision: float, recall: float) -> float:
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def _max_matching(detections: Sequence[Label], truth: Sequence[Label], overlap_threshold: float) -> int:
    """Maximum-cardinality matching between detections and ground truth.

    A detection may match a truth object when the names agree and the boxes
    overlap strictly more than the threshold.  Augmenting-path search keeps
    the count maximal, so greedy order cannot understate the score.
    """
    candidates: list[list[int]] = []
    for det in detections:
        row = [
            ti
            for ti, obj in enumerate(truth)
            if obj.name == det.name and overlap_ratio(det.box, obj.box) > overlap_threshold
        ]
        candidates.append(row)
    matched_truth: dict[int, int] = {}

    def try_assign(di: int, banned: set[int]) -> bool:
        for ti in candidates[di]:
            if ti in banned:
                continue
            banned.add(ti)
            if ti not in matched_truth or try_assign(matched_truth[ti], banned):
                matched_truth[ti] = di
                return True
        return False

    count = 0
    for di in range(len(detections)):
        if try_assign(di, set()):
            count += 1
    return count


class TraceStats:
    """Per-frame caches that make repeated pair evaluations cheap.

    The validate test only needs each frame's sorted confidence list, and the
    kept-detections outcome only depends on theta_high, so both are memoized.
    Semantics are identical to evaluating each frame from scratch.
    """

    def __init__(self, trace: DetectionTrace, overlap_threshold: float = DEFAULT_OVERLAP):
        if not trace:
            raise ValueError("empty detection trace")
        self.trace = list(trace)
        self.overlap_threshold = overlap_threshold
        self._confidences = [sorted(d.confidence for d in fd.detections) for fd in self.trace]
        self._truth_score: list[tuple[int, int, int] | None] = [None] * len(self.trace)
        self._kept_score: dict[tuple[int, float], tuple[int, int, int]] = {}

    @property
    def n_frames(self) -> int:
        return len(self.trace)

    def frame_validates(self, idx: int, pair: ThresholdPair) -> bool:
        confs = self._confidences[idx]
        pos = bisect.bisect_left(confs, pair.theta_low)
        return pos < len(confs) and confs[pos] <= pair.theta_high

    def validated_frames(self, pair: ThresholdPair) -> int:
        return sum(1 for i in range(len(self.trace)) if self.frame_validates(i, pair))

    def _score_frame_truth(self, idx: int) -> tuple[int, int, int]:
        if self._truth_score[idx] is None:
            truth = self.trace[idx].frame.objects
            tp = _max_matching(truth, truth, self.overlap_threshold)
            self._truth_score[idx] = (tp, len(truth) - tp, len(truth) - tp)
        return self._truth_score[idx]

    def _score_frame_kept(self, idx: int, theta_high: float) -> tuple[int, int, int]:
        key = (idx, theta_high)
        cached = self._kept_score.get(key)
        if cached is None:
            fd = self.trace[idx]
            kept = [d for d in fd.detections if d.confidence > theta_high]
            truth = fd.frame.objects
            tp = _max_matching(kept, truth, self.overlap_threshold)
            cached = (tp, len(kept) - tp, len(truth) - tp)
            self._kept_score[key] = cached
        return cached

    def evaluate(self, pair: ThresholdPair) -> tuple[float, PRF]:
        """Bandwidth ratio and client-visible precision/recall/F for one pair."""
        validated = 0
        tp = fp = fn = 0
        for idx in range(len(self.trace)):
            if self.frame_validates(idx, pair):
                validated += 1
                t, p, n = self._score_frame_truth(idx)
            else:
                t, p, n = self._score_frame_kept(idx, pair.theta_high)
            tp += t
            fp += p
            fn += n
        delta = validated / len(self.trace)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        return delta, PRF(precision, recall, fscore(precision, recall))


def bandwidth_ratio(trace: DetectionTrace, pair: ThresholdPair) -> float:
    """Fraction of frames holding at least one validate-classified detection."""
    stats = trace if isinstance(trace, TraceStats) else TraceStats(trace)
    return stats.validated_frames(pair) / stats.n_frames


def end_to_end_fscore(
    trace: DetectionTrace, pair: ThresholdPair, overlap_threshold: float = DEFAULT_OVERLAP
) -> PRF:
    """Score the client-visible outcome of a threshold pair.

    Discarded detections vanish; kept detections stand as-is; a frame with
    any validated detection is corrected by the cloud, so its client-visible
    labels equal ground truth.
    """
    stats = trace if isinstance(trace, TraceStats) else TraceStats(trace, overlap_threshold)
    _, prf = stats.evaluate(pair)
    return prf


@dataclass(frozen=True)
class OptimizationResult:
    pair: ThresholdPair
    delta: float
    precision: float
    recall: float
    fscore: float
    mu: float
    feasible: bool
    method: str
    evaluations: int

    def to_dict(self) -> dict:
        return {
            "pair": [self.pair.theta_low, self.pair.theta_high],
            "delta": self.delta,
            "precision": self.precision,
            "recall": self.recall,
            "fscore": self.fscore,
            "mu": self.mu,
            "feasible": self.feasible,
            "method": self.method,
            "evaluations": self.evaluations,
        }


def grid_values(step: float) -> list[float]:
    """The searched threshold values: multiples of step in [0, 1)."""
    if not 0.0 < step <= 0.25:
        raise ValueError(f"grid step out of (0, 0.25]: {step}")
    count = int(round(1.0 / step))
    values = [round(i * step, 10) for i in range(count)]
    return [v for v in values if v < 1.0]


def _feasible_key(delta: float, prf: PRF, pair: ThresholdPair):
    # minimize delta; prefer higher F, then a narrower validate interval,
    # then lexicographic order, so ties resolve identically everywhere
    return (delta, -prf.fscore, pair.theta_high - pair.theta_low, pair.theta_low, pair.theta_high)


def _infeasible_key(delta: float, prf: PRF, pair: ThresholdPair):
    return (-prf.fscore, delta, pair.theta_high - pair.theta_low, pair.theta_low, pair.theta_high)


def brute_force_optimize(
    trace: DetectionTrace,
    mu: float = DEFAULT_MU,
    grid_step: float = DEFAULT_GRID_STEP,
    *,
    overlap_threshold: float = DEFAULT_OVERLAP,
) -> OptimizationResult:
    """Evaluate every grid pair and return the feasible pair minimizing delta.

    When no pair reaches the F-score target the best-F pair is returned with
    ``feasible=False``.
    """
    if not 0.0 < mu <= 1.0:
        raise ValueError(f"mu out of (0,1]: {mu}")
    stats = trace if isinstance(trace, TraceStats) else TraceStats(trace, overlap_threshold)
    values = grid_values(grid_step)
    evaluations = 0
    best_feasible = None
    best_any = None
    for i, low in enumerate(values):
        for high in values[i:]:
            pair = ThresholdPair(low, high)
            delta, prf = stats.evaluate(pair)
            evaluations += 1
            record = (pair, delta, prf)
            if best_any is None or _infeasible_key(delta, prf, pair) < _infeasible_key(
                best_any[1], best_any[2], best_any[0]
            ):
                best_any = record
            if prf.fscore >= mu:
                if best_feasible is None or _feasible_key(delta, prf, pair) < _feasible_key(
                    best_feasible[1], best_feasible[2], best_feasible[0]
                ):
                    best_feasible = record
    chosen, feasible = (best_feasible, True) if best_feasible else (best_any, False)
    pair, delta, prf = chosen
    return OptimizationResult(
        pair, delta, prf.precision, prf.recall, prf.fscore, mu, feasible, "brute", evaluations
    )


def gradient_optimize(
    trace: DetectionTrace,
    mu: float = DEFAULT_MU,
    grid_step: float = DEFAULT_GRID_STEP,
    seed: int = 0,
    *,
    overlap_threshold: float = DEFAULT_OVERLAP,
) -> OptimizationResult:
    """Hill-climb the grid instead of sweeping it.

    Both objectives are piecewise constant in the thresholds, so the "step"
    is a move to the neighboring grid pair (one step in either coordinate).
    From a seeded start the search first climbs F-score until it reaches the
    target, then walks downhill in delta while staying feasible.  Widening
    the validate interval never lowers the F-score, so the widest pair is
    feasible whenever anything is; it serves as the fallback start and as a
    second descent start, which keeps the result feasible whenever the full
    sweep would find a feasible pair.  Each visited pair is evaluated once.
    """
    if not 0.0 < mu <= 1.0:
        raise ValueError(f"mu out of (0,1]: {mu}")
    stats = trace if isinstance(trace, TraceStats) else TraceStats(trace, overlap_threshold)
    values = grid_values(grid_step)
    size = len(values)
    cache: dict[tuple[int, int], tuple[float, PRF]] = {}

    def evaluate(point: tuple[int, int]) -> tuple[float, PRF]:
        if point not in cache:
            cache[point] = stats.evaluate(ThresholdPair(values[point[0]], values[point[1]]))
        return cache[point]

    def neighbors(point: tuple[int, int]):
        i, j = point
        for ni, nj in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)):
            if 0 <= ni <= nj < size:
                yield ni, nj

    def pair_of(point: tuple[int, int]) -> ThresholdPair:
        return ThresholdPair(values[point[0]], values[point[1]])

    def climb_fscore(point: tuple[int, int]) -> tuple[int, int]:
        while evaluate(point)[1].fscore < mu:
            delta, prf = evaluate(point)
            best, best_key = None, _infeasible_key(delta, prf, pair_of(point))
            for nb in neighbors(point):
                nd, nprf = evaluate(nb)
                key = _infeasible_key(nd, nprf, pair_of(nb))
                if key < best_key:
                    best, best_key = nb, key
            if best is None:
                break
            point = best
        return point

    def descend_delta(point: tuple[int, int]) -> tuple[int, int]:
        while True:
            delta, prf = evaluate(point)
            best, best_key = None, _feasible_key(delta, prf, pair_of(point))
            for nb in neighbors(point):
                nd, nprf = evaluate(nb)
                if nprf.fscore < mu:
                    continue
                key = _feasible_key(nd, nprf, pair_of(nb))
                if key < best_key:
                    best, best_key = nb, key
            if best is None:
                return point
            point = best

    rng = random.Random(f"gradient:{seed}")
    i, j = rng.randrange(size), rng.randrange(size)
    start = (min(i, j), max(i, j))
    widest = (0, size - 1)

    point = climb_fscore(start)
    if evaluate(point)[1].fscore < mu:
        point = widest
    candidates = []
    if evaluate(point)[1].fscore >= mu:
        candidates.append(descend_delta(point))
        if point != widest and evaluate(widest)[1].fscore >= mu:
            candidates.append(descend_delta(widest))

    if candidates:
        best = min(candidates, key=lambda p: _feasible_key(*evaluate(p), pair_of(p)))
        delta, prf = evaluate(best)
        return OptimizationResult(
            pair_of(best), delta, prf.precision, prf.recall, prf.fscore,
            mu, True, "gradient", len(cache),
        )
    best = min(cache, key=lambda p: _infeasible_key(*evaluate(p), pair_of(p)))
    delta, prf = evaluate(best)
    return OptimizationResult(
        pair_of(best), delta, prf.precision, prf.recall, prf.fscore,
        mu, False, "gradient", len(cache),
    )


def heatmap_rows(
    trace: DetectionTrace,
    grid_step: float = DEFAULT_GRID_STEP,
    overlap_threshold: float = DEFAULT_OVERLAP,
) -> list[tuple[float, float, float, float, float, float]]:
    """(theta_low, theta_high, delta, precision, recall, fscore) for the full grid."""
    stats = trace if isinstance(trace, TraceStats) else TraceStats(trace, overlap_threshold)
    values = grid_values(grid_step)
    rows = []
    for i, low in enumerate(values):
        for high in values[i:]:
            delta, prf = stats.evaluate(ThresholdPair(low, high))
            rows.append((low, high, delta, prf.precision, prf.recall, prf.fscore))
    return rows


# --- building and persisting detection traces --------------------------------


def detect_trace(
    frames: Sequence[Frame], config: EdgeDetectorConfig, confidence_floor: float = 0.0
) -> list[FrameDetections]:
    """Run the edge detector over a ground-truth trace (floor-filtered)."""
    out = []
    for frame in frames:
        detections = [
            d for d in edge_detect(frame, config) if d.confidence >= confidence_floor
        ]
        out.append(FrameDetections(frame, tuple(detections)))
    return out


def dump_detections(trace: DetectionTrace, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for fd in trace:
            doc = {
                "frame_id": fd.frame.frame_id,
                "detections": [
                    {"name": d.name, "confidence": d.confidence, "box": d.box.as_list()}
                    for d in fd.detections
                ],
            }
            fh.write(json.dumps(doc, sort_keys=True) + "\n")


def load_detections(frames: Sequence[Frame], path: str | Path) -> list[FrameDetections]:
    """Join a recorded detections file back onto its ground-truth frames."""
    by_id: dict[int, tuple[Label, ...]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            by_id[int(doc["frame_id"])] = tuple(
                Label(d["name"], d["confidence"], BoundingBox(*d["box"]))
                for d in doc["detections"]
            )
    return [FrameDetections(frame, by_id.get(frame.frame_id, ())) for frame in frames]
