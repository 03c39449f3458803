"""Multi-agent fusion strategies.

local                 ego uses only its own detections.
fusion_at_tracking    remote tracks are fed to the ego tracker as if they
                      were fresh, independent detections.
fusion_post_tracking  remote tracks are associated with ego tracks and
                      merged by covariance intersection.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize_scalar

from .association import AssociationConfig, gated_cost_matrix, solve_assignment
from .errors import SingularCovariance, ValidationError
from .geometry import ClassLabel
from .sensing import Detection
from .tracking import GaussianEstimate, Track, TrackStatus, Tracker, same_class

logger = logging.getLogger(__name__)

SPD_TOL = 1e-12


class EgoModel(str, Enum):
    LOCAL = "local"
    FUSION_AT_TRACKING = "fusion_at_tracking"
    FUSION_POST_TRACKING = "fusion_post_tracking"

    @classmethod
    def parse(cls, name):
        """Accepts enum values or the CLI spellings local / track-fusion / ddf."""
        aliases = {"track-fusion": cls.FUSION_AT_TRACKING, "ddf": cls.FUSION_POST_TRACKING}
        if name in aliases:
            return aliases[name]
        try:
            return cls(name)
        except ValueError:
            raise ValidationError(f"unknown ego model '{name}'")

    @property
    def cli_name(self):
        return {"local": "local", "fusion_at_tracking": "track-fusion", "fusion_post_tracking": "ddf"}[self.value]


@dataclass(frozen=True)
class FusionWeight:
    omega: float

    def __post_init__(self):
        if not 0.0 <= self.omega <= 1.0:
            raise ValidationError(f"fusion weight must lie in [0, 1], got {self.omega}")


@dataclass(frozen=True)
class FusionConfig:
    criterion: str = "trace"
    omega_tolerance: float = 1e-4
    birth_inflation: float = 2.0

    def __post_init__(self):
        if self.criterion not in ("trace", "det"):
            raise ValidationError("fusion.criterion must be 'trace' or 'det'")
        if self.omega_tolerance <= 0:
            raise ValidationError("fusion.omega_tolerance must be positive")
        if self.birth_inflation < 1.0:
            raise ValidationError("fusion.birth_inflation must be >= 1")


@dataclass(frozen=True, eq=False)
class TrackReport:
    """One track as shared over the network."""

    track_id: int
    sender: str
    mean: np.ndarray
    covariance: np.ndarray
    class_label: ClassLabel
    provenance: FrozenSet[str] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "class_label", ClassLabel(self.class_label))

    @classmethod
    def from_track(cls, track: Track, sender):
        return cls(track.track_id, sender, track.estimate.mean, track.estimate.covariance,
                   track.class_label, frozenset(track.provenance) | {sender})

    @property
    def estimate(self):
        return GaussianEstimate(self.mean, self.covariance)

    @property
    def position_mean(self):
        return np.asarray(self.mean)[:3]

    @property
    def position_covariance(self):
        return np.asarray(self.covariance)[:3, :3]

    def to_dict(self):
        return {
            "track_id": self.track_id,
            "sender": self.sender,
            "class": self.class_label.value,
            "mean": np.asarray(self.mean).tolist(),
            "covariance": np.asarray(self.covariance).tolist(),
            "provenance": sorted(self.provenance),
        }


def _information(p):
    p = np.asarray(p, dtype=float)
    if np.linalg.eigvalsh(0.5 * (p + p.T)).min() <= SPD_TOL:
        raise SingularCovariance("covariance is not positive definite")
    return np.linalg.inv(p)


def fuse_independent(a: GaussianEstimate, b: GaussianEstimate) -> GaussianEstimate:
    """Information-form fusion assuming independent errors (the naive rule)."""
    ia, ib = _information(a.covariance), _information(b.covariance)
    p = np.linalg.inv(ia + ib)
    p = 0.5 * (p + p.T)
    return GaussianEstimate(p @ (ia @ a.mean + ib @ b.mean), p)


def covariance_intersection(a: GaussianEstimate, b: GaussianEstimate,
                            criterion="trace", tolerance=1e-4) -> Tuple[GaussianEstimate, FusionWeight]:
    """Fuse two estimates with unknown cross-correlation.

    P_f^-1 = w Pa^-1 + (1 - w) Pb^-1, with w in [0, 1] minimizing trace (or
    log-determinant) of P_f. When several w score the same, the one closest
    to 0.5 wins, so symmetric inputs fuse symmetrically.
    """
    ia, ib = _information(a.covariance), _information(b.covariance)
    ya, yb = ia @ a.mean, ib @ b.mean

    def fused_cov(w):
        p = np.linalg.inv(w * ia + (1.0 - w) * ib)
        return 0.5 * (p + p.T)

    if criterion == "trace":
        def objective(w):
            return float(np.trace(fused_cov(w)))
    else:
        def objective(w):
            return float(np.linalg.slogdet(fused_cov(w))[1])

    res = minimize_scalar(objective, bounds=(0.0, 1.0), method="bounded", options={"xatol": tolerance})
    candidates = [0.5, float(res.x), 0.0, 1.0]
    scores = [objective(w) for w in candidates]
    best = min(scores)
    slack = 1e-12 * (1.0 + abs(best))
    omega = next(w for w, s in zip(candidates, scores) if s <= best + slack)
    p = fused_cov(omega)
    return GaussianEstimate(p @ (omega * ya + (1.0 - omega) * yb), p), FusionWeight(omega)


def report_to_detection(report: TrackReport, tick) -> Detection:
    """A remote track dressed up as a position measurement."""
    return Detection(
        sensor_id=f"{report.sender}:tracks",
        tick=tick,
        position=report.position_mean,
        covariance=report.position_covariance,
        class_label=report.class_label,
        origin=report.sender,
        provenance=frozenset(report.provenance),
    )


def fuse_at_tracking(tracker: Tracker, payload: Sequence[TrackReport]) -> Tracker:
    """Push remote tracks through the ordinary associate + Kalman update path.

    No correlation bookkeeping: the same estimate delivered twice is counted
    twice.
    """
    if not payload:
        return tracker
    return tracker.ingest([report_to_detection(r, tracker.tick) for r in payload])


def fuse_post_tracking(ego_tracks: Sequence[Track], remote_tracks: Sequence, tick,
                       assoc_cfg: Optional[AssociationConfig] = None,
                       cfg: Optional[FusionConfig] = None,
                       ids: Optional[Iterable[int]] = None) -> List[Track]:
    """Track-to-track fusion by assignment and covariance intersection.

    Args:
        ego_tracks: the ego's live tracks.
        remote_tracks: TrackReports (or Tracks) from one sender; only
            confirmed ones take part.
        tick: current tick, stamped on fused and newborn tracks.
        assoc_cfg: gate and position block for track-to-track costs.
        cfg: CI criterion and birth inflation.
        ids: source of ids for tracks born from unmatched remote tracks.

    Returns:
        The ego tracks with matched estimates replaced by their CI fusion,
        followed by one new tentative track per unmatched remote track.
    """
    assoc_cfg = assoc_cfg or AssociationConfig()
    cfg = cfg or FusionConfig()
    remote = [r for r in remote_tracks if getattr(r, "confirmed", True)]
    if not remote:
        return list(ego_tracks)
    if ids is None:
        start = max((t.track_id for t in ego_tracks), default=0) + 1
        ids = iter(range(start, start + len(remote)))
    ids = iter(ids)

    result = solve_assignment(gated_cost_matrix(list(ego_tracks), remote, assoc_cfg, compatible=same_class))
    out = list(ego_tracks)
    for row, col in result.pairs:
        source = remote[col]
        fused, weight = covariance_intersection(out[row].estimate, source.estimate, cfg.criterion,
                                                cfg.omega_tolerance)
        out[row] = replace(out[row], estimate=fused, hits=out[row].hits + 1, misses=0,
                           provenance=out[row].provenance | frozenset(_provenance(source)), last_hit_tick=tick)
        logger.debug(f"track {out[row].track_id} fused with remote {source.track_id} (omega={weight.omega:.3f})")
    for col in result.unassigned_cols:
        source = remote[col]
        seeded = GaussianEstimate(source.estimate.mean, cfg.birth_inflation * source.estimate.covariance)
        out.append(Track(next(ids), seeded, source.class_label, hits=1, age=0,
                         status=TrackStatus.TENTATIVE, provenance=frozenset(_provenance(source)),
                         last_hit_tick=tick))
    return out


def _provenance(source):
    extra = {source.sender} if hasattr(source, "sender") else set()
    return set(source.provenance) | extra
