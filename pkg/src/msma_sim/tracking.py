"""Per-agent multi-object tracking.

Constant-velocity Kalman filtering over a 6-dim state (position, velocity in
the world frame) with position-only measurements, Joseph-form updates and an
M-of-N track lifecycle.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .association import AssociationConfig, AssignmentResult, gated_cost_matrix, solve_assignment
from .errors import SingularInnovation, ValidationError
from .geometry import ClassLabel

logger = logging.getLogger(__name__)

STATE_DIM = 6
SPD_TOL = 1e-12


class TrackStatus(str, Enum):
    TENTATIVE = "tentative"
    CONFIRMED = "confirmed"
    DEAD = "dead"


@dataclass(frozen=True)
class TrackerConfig:
    q: float = 1.0
    confirm_m: int = 3
    confirm_n: int = 5
    max_misses: int = 3
    birth_velocity_variance: float = 100.0

    def __post_init__(self):
        if self.q < 0:
            raise ValidationError("tracker.q must be >= 0")
        if not 1 <= self.confirm_m <= self.confirm_n:
            raise ValidationError("tracker requires 1 <= confirm_m <= confirm_n")
        if self.max_misses < 1:
            raise ValidationError("tracker.max_misses must be >= 1")
        if self.birth_velocity_variance <= 0:
            raise ValidationError("tracker.birth_velocity_variance must be positive")


@dataclass(frozen=True, eq=False)
class GaussianEstimate:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(-1)
        cov = np.array(self.covariance, dtype=float).reshape(mean.size, mean.size)
        if not np.allclose(cov, cov.T, atol=1e-9):
            raise ValidationError("estimate covariance is not symmetric")
        if np.linalg.eigvalsh(cov).min() <= SPD_TOL:
            raise ValidationError("estimate covariance is not positive definite")
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @property
    def dim(self):
        return self.mean.size

    @property
    def position_mean(self):
        return self.mean[:3]

    @property
    def position_covariance(self):
        return self.covariance[:3, :3]

    def to_dict(self):
        return {"mean": self.mean.tolist(), "covariance": self.covariance.tolist()}


@dataclass(frozen=True, eq=False)
class Track:
    track_id: int
    estimate: GaussianEstimate
    class_label: ClassLabel
    hits: int = 1
    age: int = 0
    misses: int = 0
    status: TrackStatus = TrackStatus.TENTATIVE
    history: Tuple[bool, ...] = ()
    provenance: FrozenSet[str] = frozenset()
    last_hit_tick: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "class_label", ClassLabel(self.class_label))

    @property
    def position_mean(self):
        return self.estimate.position_mean

    @property
    def position_covariance(self):
        return self.estimate.position_covariance

    @property
    def score(self):
        if self.age <= 0:
            return 0.0
        return min(1.0, max(0.0, self.hits / self.age))

    @property
    def confirmed(self):
        return self.status == TrackStatus.CONFIRMED

    @property
    def alive(self):
        return self.status != TrackStatus.DEAD

    def to_dict(self):
        return {
            "track_id": self.track_id,
            "class": self.class_label.value,
            "status": self.status.value,
            "hits": self.hits,
            "age": self.age,
            "misses": self.misses,
            "score": self.score,
            "provenance": sorted(self.provenance),
            **self.estimate.to_dict(),
        }


def _symmetrize(p):
    return 0.5 * (p + p.T)


def transition(dt):
    f = np.eye(STATE_DIM)
    f[:3, 3:] = dt * np.eye(3)
    return f


def process_noise(dt, q):
    """Continuous white-noise-acceleration covariance integrated over dt."""
    block = q * np.array([[dt ** 3 / 3.0, dt ** 2 / 2.0], [dt ** 2 / 2.0, dt]])
    return np.kron(block, np.eye(3))


def predict(t: Track, dt: float, q: float) -> Track:
    """Constant-velocity prediction by dt seconds."""
    if dt <= 0:
        raise ValidationError(f"predict needs dt > 0, got {dt}")
    f = transition(dt)
    mean = f @ t.estimate.mean
    cov = _symmetrize(f @ t.estimate.covariance @ f.T + process_noise(dt, q))
    return replace(t, estimate=GaussianEstimate(mean, cov))


def kalman_update(estimate: GaussianEstimate, z, r) -> GaussianEstimate:
    """Kalman update observing the leading components of the state, Joseph form.

    A 3-vector z observes position; a full-length z observes the whole state.
    """
    x, p = estimate.mean, estimate.covariance
    r = np.asarray(r, dtype=float)
    h = np.eye(r.shape[0], x.size)
    s = _symmetrize(h @ p @ h.T + r)
    if np.linalg.eigvalsh(s).min() < SPD_TOL:
        raise SingularInnovation("innovation covariance is numerically singular")
    k = np.linalg.solve(s, h @ p).T
    mean = x + k @ (np.asarray(z, dtype=float) - h @ x)
    i_kh = np.eye(x.size) - k @ h
    cov = _symmetrize(i_kh @ p @ i_kh.T + k @ r @ k.T)
    return GaussianEstimate(mean, cov)


def update(t: Track, z) -> Track:
    """Fold one detection into a track."""
    estimate = kalman_update(t.estimate, z.position, z.covariance)
    provenance = t.provenance | {z.origin} | frozenset(getattr(z, "provenance", ()))
    return replace(t, estimate=estimate, hits=t.hits + 1, misses=0,
                   provenance=frozenset(p for p in provenance if p), last_hit_tick=z.tick)


def birth(track_id, z, tick, cfg: TrackerConfig) -> Track:
    """Tentative track at the detection with zero velocity and a diffuse velocity prior."""
    mean = np.concatenate([z.position, np.zeros(3)])
    cov = np.zeros((STATE_DIM, STATE_DIM))
    cov[:3, :3] = z.covariance
    cov[3:, 3:] = cfg.birth_velocity_variance * np.eye(3)
    provenance = frozenset(p for p in {z.origin} | set(getattr(z, "provenance", ())) if p)
    return Track(track_id, GaussianEstimate(mean, cov), z.class_label, hits=1, age=0,
                 provenance=provenance, last_hit_tick=tick)


def same_class(track, other):
    return track.class_label == other.class_label


def associate(tracks: Sequence[Track], detections: Sequence, cfg: AssociationConfig) -> AssignmentResult:
    """Gated Mahalanobis assignment of detections (columns) to tracks (rows)."""
    return solve_assignment(gated_cost_matrix(tracks, detections, cfg, compatible=same_class))


def apply_association(tracks: Sequence[Track], detections: Sequence, association: AssignmentResult,
                      tick: int, cfg: TrackerConfig, ids: Iterable[int]) -> List[Track]:
    """Update associated pairs and spawn tentative tracks from leftover detections."""
    out = list(tracks)
    leftover = set(association.unassigned_cols)
    for row, col in association.pairs:
        try:
            out[row] = update(out[row], detections[col])
        except SingularInnovation:
            logger.warning(f"track {out[row].track_id}: singular innovation, detection left unassociated")
            leftover.add(col)
    ids = iter(ids)
    for col in sorted(leftover):
        out.append(birth(next(ids), detections[col], tick, cfg))
    return out


def close_tick(tracks: Sequence[Track], tick: int, cfg: TrackerConfig) -> List[Track]:
    """Age every track, count misses, confirm M-of-N and kill after max_misses."""
    out = []
    for t in tracks:
        hit = t.last_hit_tick == tick
        history = (t.history + (hit,))[-cfg.confirm_n:]
        misses = 0 if hit else t.misses + 1
        status = t.status
        if status == TrackStatus.TENTATIVE and sum(history) >= cfg.confirm_m:
            status = TrackStatus.CONFIRMED
        if misses >= cfg.max_misses:
            status = TrackStatus.DEAD
        out.append(replace(t, age=t.age + 1, history=history, misses=misses, status=status))
    return out


def step_tracker(tracks: Sequence[Track], detections: Sequence, association: AssignmentResult, tick: int,
                 cfg: Optional[TrackerConfig] = None, ids: Optional[Iterable[int]] = None) -> List[Track]:
    """One full lifecycle step for a single batch of detections.

    Tracks that die in this step are returned with status DEAD.
    """
    cfg = cfg or TrackerConfig()
    if ids is None:
        ids = itertools.count(max((t.track_id for t in tracks), default=0) + 1)
    return close_tick(apply_association(tracks, detections, association, tick, cfg, ids), tick, cfg)


class Tracker:
    """Owns one agent's tracks across ticks.

    Within a tick: begin_tick() predicts once, ingest() may be called for
    every batch (each sensor, each remote message), end_tick() runs the
    lifecycle. Not thread safe; each agent loop owns its tracker.
    """

    def __init__(self, agent_id, dt, cfg: Optional[TrackerConfig] = None,
                 assoc_cfg: Optional[AssociationConfig] = None):
        self.agent_id = agent_id
        self.dt = dt
        self.cfg = cfg or TrackerConfig()
        self.assoc_cfg = assoc_cfg or AssociationConfig()
        self.tracks: List[Track] = []
        self.tick: Optional[int] = None
        self._ids = itertools.count(1)

    def next_id(self):
        return next(self._ids)

    def id_source(self):
        return iter(self.next_id, None)

    def begin_tick(self, tick):
        if self.tick is not None and tick > self.tick and self.tracks:
            dt = (tick - self.tick) * self.dt
            self.tracks = [predict(t, dt, self.cfg.q) for t in self.tracks]
        self.tick = tick

    def ingest(self, detections: Sequence):
        """Associate and fold one batch of detections into the current tick."""
        if not detections:
            return self
        result = associate(self.tracks, detections, self.assoc_cfg)
        self.tracks = apply_association(self.tracks, detections, result, self.tick, self.cfg, self.id_source())
        return self

    def end_tick(self):
        closed = close_tick(self.tracks, self.tick, self.cfg)
        died = sum(1 for t in closed if not t.alive)
        self.tracks = [t for t in closed if t.alive]
        logger.debug(f"{self.agent_id} tick {self.tick}: {len(self.tracks)} tracks "
                     f"({len(self.confirmed_tracks)} confirmed, {died} died)")
        return self

    def ingest_by_sensor(self, detections: Sequence):
        """One ingest per sensor, in order of first appearance."""
        batches = {}
        for z in detections:
            batches.setdefault(z.sensor_id, []).append(z)
        for batch in batches.values():
            self.ingest(batch)
        return self

    def step(self, detections: Sequence, tick):
        """Predict, ingest each sensor's batch in order, then close the tick."""
        self.begin_tick(tick)
        self.ingest_by_sensor(detections)
        return self.end_tick()

    @property
    def confirmed_tracks(self):
        return [t for t in self.tracks if t.confirmed]
