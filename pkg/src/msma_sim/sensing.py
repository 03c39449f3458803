"""Parametric noisy-detection model.

Stands in for trained perception: each sensor detects the objects it can see
with an occlusion-dependent miss rate, adds isotropic Gaussian position noise
and sprinkles Poisson clutter over its ground footprint.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields, replace
from typing import Dict, FrozenSet, List, Mapping, Optional

import numpy as np

from .errors import ValidationError
from .geometry import WORLD_FRAME, ClassLabel
from .visibility import OcclusionCategory, VisibilityConfig, occlusion_frame

logger = logging.getLogger(__name__)

# Floor on reported variance so the noiseless limit keeps an SPD covariance.
MIN_VARIANCE = 1e-10
SPD_TOL = 1e-12
CLUTTER_HEIGHT = 0.75
CLUTTER_MIN_RANGE = 2.0


def _default_miss_rates():
    return {
        OcclusionCategory.NONE: 0.05,
        OcclusionCategory.PARTIAL: 0.3,
        OcclusionCategory.MOST: 0.8,
        OcclusionCategory.COMPLETE: 1.0,
    }


@dataclass(frozen=True)
class DetectionModel:
    position_noise_sigma: float = 0.5
    base_miss_rate: float = 0.05
    miss_rate_by_occlusion: Mapping[OcclusionCategory, float] = field(default_factory=_default_miss_rates)
    clutter_rate: float = 0.5
    max_range: float = 100.0

    def __post_init__(self):
        rates = {OcclusionCategory(k): float(v) for k, v in dict(self.miss_rate_by_occlusion).items()}
        object.__setattr__(self, "miss_rate_by_occlusion", rates)
        if self.position_noise_sigma < 0:
            raise ValidationError("detection.position_noise_sigma must be >= 0")
        if self.clutter_rate < 0:
            raise ValidationError("detection.clutter_rate must be >= 0")
        if self.max_range <= 0:
            raise ValidationError("detection.max_range must be positive")
        for name, p in [("base_miss_rate", self.base_miss_rate)] + [(k.value, v) for k, v in rates.items()]:
            if not 0.0 <= p <= 1.0:
                raise ValidationError(f"detection miss rate '{name}' must be in [0, 1], got {p}")

    @classmethod
    def field_names(cls):
        return {f.name for f in fields(cls)}

    def with_overrides(self, overrides: Optional[Mapping] = None):
        if not overrides:
            return self
        unknown = set(overrides) - self.field_names()
        if unknown:
            raise ValidationError(f"unknown detection model fields: {sorted(unknown)}")
        changes = dict(overrides)
        if "miss_rate_by_occlusion" in changes:
            merged = dict(self.miss_rate_by_occlusion)
            merged.update({OcclusionCategory(k): v for k, v in changes["miss_rate_by_occlusion"].items()})
            changes["miss_rate_by_occlusion"] = merged
        return replace(self, **changes)

    def miss_rate(self, category):
        if category == OcclusionCategory.NOT_IN_VIEW:
            return 1.0
        return self.miss_rate_by_occlusion.get(category, self.base_miss_rate)

    @property
    def reported_covariance(self):
        return max(self.position_noise_sigma ** 2, MIN_VARIANCE) * np.eye(3)

    def to_dict(self):
        return {
            "position_noise_sigma": self.position_noise_sigma,
            "base_miss_rate": self.base_miss_rate,
            "miss_rate_by_occlusion": {k.value: v for k, v in self.miss_rate_by_occlusion.items()},
            "clutter_rate": self.clutter_rate,
            "max_range": self.max_range,
        }


def check_spd(matrix, what="covariance", tol=SPD_TOL):
    m = np.asarray(matrix, dtype=float)
    if not np.allclose(m, m.T, atol=1e-9):
        raise ValidationError(f"{what} is not symmetric")
    if np.linalg.eigvalsh(m).min() <= tol:
        raise ValidationError(f"{what} is not positive definite")
    return m


@dataclass(frozen=True, eq=False)
class Detection:
    """A single-frame position measurement registered to the world frame.

    `is_clutter` and `object_id` are ground truth for evaluation only.
    """

    sensor_id: str
    tick: int
    position: np.ndarray
    covariance: np.ndarray
    class_label: ClassLabel
    origin: str = ""
    is_clutter: bool = False
    object_id: Optional[int] = None
    provenance: FrozenSet[str] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(self, "covariance", check_spd(np.asarray(self.covariance).reshape(3, 3),
                                                         "detection covariance"))
        object.__setattr__(self, "class_label", ClassLabel(self.class_label))

    def to_dict(self):
        return {
            "sensor_id": self.sensor_id,
            "tick": self.tick,
            "position": self.position.tolist(),
            "class": self.class_label.value,
            "origin": self.origin,
            "is_clutter": self.is_clutter,
            "object_id": self.object_id,
        }


def _clutter(sensor, cam_pose, model, rng, tick, origin):
    count = int(rng.poisson(model.clutter_rate))
    if count == 0:
        return []
    forward = cam_pose.rotation[:, 2]
    heading = math.atan2(forward[1], forward[0])
    calib = sensor.camera
    # Camera +x points right, i.e. toward negative azimuth.
    az_right = math.atan((calib.width - calib.cx) / calib.fx)
    r_min = min(CLUTTER_MIN_RANGE, model.max_range)
    classes = list(ClassLabel)
    out = []
    for _ in range(count):
        azimuth = rng.uniform(0.0, calib.horizontal_fov) - az_right
        rng_r = math.sqrt(rng.uniform(r_min ** 2, model.max_range ** 2))
        label = classes[int(rng.integers(len(classes)))]
        position = np.array([
            cam_pose.translation[0] + rng_r * math.cos(heading + azimuth),
            cam_pose.translation[1] + rng_r * math.sin(heading + azimuth),
            CLUTTER_HEIGHT,
        ])
        out.append(Detection(sensor.frame_id, tick, position, model.reported_covariance, label,
                             origin=origin, is_clutter=True))
    return out


def sense(snapshot, agent, model: DetectionModel, rng, vis_cfg: Optional[VisibilityConfig] = None,
          occlusion: Optional[Dict[str, Dict]] = None) -> List[Detection]:
    """Detections of every sensor on one agent for one snapshot.

    Args:
        snapshot: world state for the tick (boxes, occluders, frame tree).
        agent: the sensing agent; each sensor may override fields of `model`.
        model: default detection model.
        rng: the agent's stream for this tick.
        vis_cfg: occlusion thresholds, used when `occlusion` is not given.
        occlusion: precomputed {sensor frame id: {object_id: OcclusionResult}}.

    Returns:
        Detections in world coordinates, objects before clutter, sensors in
        declaration order.
    """
    vis_cfg = vis_cfg or VisibilityConfig()
    frames = snapshot.frames
    detections = []
    for sensor in agent.sensors:
        sensor_model = model.with_overrides(sensor.detection)
        cam_pose = frames.transform_to(sensor.frame_id, WORLD_FRAME)
        world_to_sensor = frames.transform_to(WORLD_FRAME, sensor.frame_id)
        if occlusion is not None and sensor.frame_id in occlusion:
            occ = occlusion[sensor.frame_id]
        else:
            _, occ = occlusion_frame(snapshot.boxes, sensor.camera, cam_pose, vis_cfg, snapshot.occluders)
        sigma = sensor_model.position_noise_sigma
        for box in sorted(snapshot.boxes, key=lambda b: b.object_id):
            # Fixed draws per object keep streams aligned whatever gets skipped.
            u = rng.random()
            noise = rng.standard_normal(3)
            distance = float(np.linalg.norm(box.center - cam_pose.translation))
            if distance > sensor_model.max_range:
                continue
            if u < sensor_model.miss_rate(occ[box.object_id].category):
                continue
            measured = world_to_sensor.apply(box.center) + sigma * noise
            detections.append(Detection(
                sensor_id=sensor.frame_id,
                tick=snapshot.tick,
                position=cam_pose.apply(measured),
                covariance=sensor_model.reported_covariance,
                class_label=box.class_label,
                origin=agent.agent_id,
                object_id=box.object_id,
            ))
        detections.extend(_clutter(sensor, cam_pose, sensor_model, rng, snapshot.tick, agent.agent_id))
    logger.debug(f"{agent.agent_id} tick {snapshot.tick}: {len(detections)} detections")
    return detections
