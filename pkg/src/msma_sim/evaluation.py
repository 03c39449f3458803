"""Scoring ego tracks against ground truth.

Per frame, confirmed ego tracks are matched to in-range truth objects by
center distance. Matches are pooled over all post-burn-in frames into a
precision/recall sweep ranked by track score, giving a 101-point
interpolated AP per class and their mean.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np

from .errors import ParseError, ValidationError
from .geometry import BoundingBox3D, ClassLabel

logger = logging.getLogger(__name__)

RECALL_POINTS = np.arange(101) / 100


@dataclass(frozen=True)
class EvalConfig:
    range_gate: float = 75.0
    burn_in: float = 2.0
    match_distance: float = 2.0
    classes: Tuple[ClassLabel, ...] = tuple(ClassLabel)

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(ClassLabel(c) for c in self.classes))
        if self.range_gate <= 0 or self.match_distance <= 0:
            raise ValidationError("evaluation.range_gate and evaluation.match_distance must be positive")
        if self.burn_in < 0:
            raise ValidationError("evaluation.burn_in must be >= 0")
        if not self.classes:
            raise ValidationError("evaluation.classes must not be empty")

    def to_dict(self):
        return {
            "range_gate": self.range_gate,
            "burn_in": self.burn_in,
            "match_distance": self.match_distance,
            "classes": [c.value for c in self.classes],
        }


@dataclass(frozen=True, eq=False)
class TrackPoint:
    """The parts of a track that evaluation looks at."""

    track_id: int
    class_label: ClassLabel
    position: np.ndarray
    score: float
    confirmed: bool = True

    @classmethod
    def from_track(cls, track):
        return cls(track.track_id, track.class_label, np.asarray(track.position_mean, dtype=float),
                   track.score, track.confirmed)

    @classmethod
    def from_dict(cls, data):
        return cls(data["track_id"], ClassLabel(data["class"]), np.asarray(data["mean"][:3], dtype=float),
                   float(data["score"]), data.get("status", "confirmed") == "confirmed")


@dataclass(frozen=True, eq=False)
class TruthFrame:
    tick: int
    time: float
    boxes: Tuple[BoundingBox3D, ...]
    ego_position: np.ndarray

    @classmethod
    def from_snapshot(cls, snapshot):
        return cls(snapshot.tick, snapshot.time, tuple(snapshot.boxes), snapshot.ego_pose.translation)

    def to_dict(self):
        return {
            "ego_position": np.asarray(self.ego_position).tolist(),
            "boxes": [b.to_dict() for b in self.boxes],
        }

    @classmethod
    def from_record(cls, record):
        truth = record["truth"]
        return cls(record["tick"], record["time"], tuple(BoundingBox3D.from_dict(b) for b in truth["boxes"]),
                   np.asarray(truth["ego_position"], dtype=float))


@dataclass(frozen=True)
class MatchedPair:
    track_id: int
    object_id: int
    class_label: ClassLabel
    score: float
    distance: float


@dataclass(frozen=True)
class FrameMatch:
    tick: int
    time: float
    matches: Tuple[MatchedPair, ...] = ()
    false_positives: Tuple[Tuple[int, ClassLabel, float], ...] = ()
    false_negatives: Tuple[Tuple[int, ClassLabel], ...] = ()

    @property
    def tp(self):
        return len(self.matches)

    @property
    def fp(self):
        return len(self.false_positives)

    @property
    def fn(self):
        return len(self.false_negatives)

    def truth_count(self, class_label=None):
        if class_label is None:
            return self.tp + self.fn
        return (sum(1 for m in self.matches if m.class_label == class_label)
                + sum(1 for _, c in self.false_negatives if c == class_label))

    @property
    def rms_error(self):
        if not self.matches:
            return None
        return math.sqrt(sum(m.distance ** 2 for m in self.matches) / len(self.matches))


def _planar_distance(a, b):
    return float(np.hypot(a[0] - b[0], a[1] - b[1]))


def match_frame(tracks: Sequence, truth, cfg: Optional[EvalConfig] = None) -> FrameMatch:
    """Greedy nearest-neighbour matching of tracks to truth for one frame.

    Args:
        tracks: Tracks or TrackPoints; unconfirmed ones are ignored.
        truth: a WorldSnapshot or TruthFrame.
        cfg: gates and match threshold.

    Returns:
        FrameMatch whose TP + FN equals the number of in-gate truth objects.
    """
    cfg = cfg or EvalConfig()
    if not isinstance(truth, TruthFrame):
        truth = TruthFrame.from_snapshot(truth)
    ego = truth.ego_position
    points = [t if isinstance(t, TrackPoint) else TrackPoint.from_track(t) for t in tracks]
    # Tracks just outside the truth gate may still belong to an in-gate object.
    points = [p for p in points if p.confirmed
              and _planar_distance(p.position, ego) <= cfg.range_gate + cfg.match_distance]
    boxes = [b for b in truth.boxes if _planar_distance(b.center, ego) <= cfg.range_gate]

    candidates = []
    for p in points:
        for b in boxes:
            if p.class_label != b.class_label:
                continue
            d = float(np.linalg.norm(p.position - b.center))
            if d <= cfg.match_distance:
                candidates.append((d, p.track_id, b.object_id, p, b))
    candidates.sort(key=lambda c: c[:3])

    used_tracks, used_objects, matches = set(), set(), []
    for d, track_id, object_id, p, b in candidates:
        if track_id in used_tracks or object_id in used_objects:
            continue
        used_tracks.add(track_id)
        used_objects.add(object_id)
        matches.append(MatchedPair(track_id, object_id, b.class_label, p.score, d))

    return FrameMatch(
        tick=truth.tick,
        time=truth.time,
        matches=tuple(sorted(matches, key=lambda m: m.track_id)),
        false_positives=tuple((p.track_id, p.class_label, p.score)
                              for p in sorted(points, key=lambda p: p.track_id) if p.track_id not in used_tracks),
        false_negatives=tuple((b.object_id, b.class_label)
                              for b in sorted(boxes, key=lambda b: b.object_id) if b.object_id not in used_objects),
    )


def interpolated_ap(precision, recall) -> float:
    """Mean of the interpolated precision at 101 evenly spaced recall levels."""
    precision = np.asarray(precision, dtype=float)
    recall = np.asarray(recall, dtype=float)
    total = 0.0
    for r in RECALL_POINTS:
        reached = precision[recall >= r]
        total += float(reached.max()) if reached.size else 0.0
    return total / RECALL_POINTS.size


def average_precision(frames: Iterable[FrameMatch], class_label) -> Optional[float]:
    """101-point AP for one class over the pooled (track, frame) instances.

    Returns None when the class has no ground truth in the given frames.
    """
    class_label = ClassLabel(class_label)
    instances = []
    n_truth = 0
    for f in frames:
        n_truth += f.truth_count(class_label)
        instances.extend((-m.score, f.tick, m.track_id, 1) for m in f.matches if m.class_label == class_label)
        instances.extend((-s, f.tick, tid, 0) for tid, c, s in f.false_positives if c == class_label)
    if n_truth == 0:
        return None
    if not instances:
        return 0.0
    instances.sort()
    hits = np.array([i[3] for i in instances], dtype=float)
    tp = np.cumsum(hits)
    fp = np.cumsum(1.0 - hits)
    return interpolated_ap(tp / (tp + fp), tp / n_truth)


def mean_average_precision(per_class: Dict) -> Optional[float]:
    defined = [ap for ap in per_class.values() if ap is not None]
    if not defined:
        return None
    return float(np.mean(defined))


@dataclass(frozen=True)
class RunMetrics:
    per_class_ap: Dict[str, Optional[float]]
    mean_ap: Optional[float]
    ticks: Tuple[int, ...] = ()
    true_positives: Tuple[int, ...] = ()
    false_positives: Tuple[int, ...] = ()
    false_negatives: Tuple[int, ...] = ()
    rms_error: Tuple[Optional[float], ...] = ()

    @property
    def total_fp(self):
        return sum(self.false_positives)

    @property
    def total_fn(self):
        return sum(self.false_negatives)

    def to_dict(self):
        return {
            "per_class_ap": dict(self.per_class_ap),
            "mAP": self.mean_ap,
            "ticks": list(self.ticks),
            "true_positives": list(self.true_positives),
            "false_positives": list(self.false_positives),
            "false_negatives": list(self.false_negatives),
            "rms_error": list(self.rms_error),
        }

    def write_json(self, path, config=None):
        doc = {"config": config or {}, "metrics": self.to_dict()}
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["tick", "tp", "fp", "fn", "rms_error"])
            for row in zip(self.ticks, self.true_positives, self.false_positives, self.false_negatives,
                           self.rms_error):
                writer.writerow(["" if v is None else v for v in row])


def aggregate(per_class_ap: Dict, frames: Sequence[FrameMatch] = ()) -> RunMetrics:
    """Per-class APs plus per-tick counts rolled into one RunMetrics."""
    per_class = {ClassLabel(k).value: v for k, v in per_class_ap.items()}
    return RunMetrics(
        per_class_ap=per_class,
        mean_ap=mean_average_precision(per_class),
        ticks=tuple(f.tick for f in frames),
        true_positives=tuple(f.tp for f in frames),
        false_positives=tuple(f.fp for f in frames),
        false_negatives=tuple(f.fn for f in frames),
        rms_error=tuple(f.rms_error for f in frames),
    )


def evaluate(frames: Iterable[FrameMatch], cfg: Optional[EvalConfig] = None) -> RunMetrics:
    """Drop burn-in frames and score the rest."""
    cfg = cfg or EvalConfig()
    kept = [f for f in frames if f.time >= cfg.burn_in - 1e-9]
    per_class = {c: average_precision(kept, c) for c in cfg.classes}
    return aggregate(per_class, kept)


def evaluate_frames(path, cfg: Optional[EvalConfig] = None) -> RunMetrics:
    """Re-score a stored frame log (one JSON record per tick)."""
    cfg = cfg or EvalConfig()
    frames = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                truth = TruthFrame.from_record(record)
                tracks = [TrackPoint.from_dict(t) for t in record["ego_tracks"]]
            except (ValueError, KeyError, TypeError) as e:
                raise ParseError(f"bad frame record in {path}: {e}", line=lineno)
            frames.append(match_frame(tracks, truth, cfg))
    logger.info(f"re-scored {len(frames)} frames from {path}")
    return evaluate(frames, cfg)
