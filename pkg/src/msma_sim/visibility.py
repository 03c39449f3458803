"""Depth rendering and depth-based occlusion labeling.

Objects are rasterized analytically (ray/oriented-box intersection per pixel)
into a range image, and each object's occlusion is the fraction of its
projected pixels whose range is plausibly the object's own surface.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import List, Sequence, Tuple

import numpy as np

from .errors import ParseError, ValidationError
from .geometry import BoundingBox3D, CameraCalibration, Pose, project_box

logger = logging.getLogger(__name__)

DEPTH_MAGIC = b"MSMD"
DEPTH_HEADER = struct.Struct("<4sIII")  # magic, width, height, reserved


class OcclusionCategory(str, Enum):
    NONE = "NONE"
    PARTIAL = "PARTIAL"
    MOST = "MOST"
    COMPLETE = "COMPLETE"
    NOT_IN_VIEW = "NOT_IN_VIEW"


VISIBLE_CATEGORIES = frozenset({OcclusionCategory.NONE, OcclusionCategory.PARTIAL})


@dataclass(frozen=True)
class VisibilityConfig:
    tau: float = 5.0
    none_min: float = 0.75
    partial_min: float = 0.25
    most_min: float = 0.05

    def __post_init__(self):
        if self.tau <= 0:
            raise ValidationError("visibility.tau must be positive")
        if not (0 < self.most_min < self.partial_min < self.none_min < 1):
            raise ValidationError("visibility thresholds must satisfy 0 < most_min < partial_min < none_min < 1")

    def categorize(self, ratio):
        if ratio >= self.none_min:
            return OcclusionCategory.NONE
        if ratio >= self.partial_min:
            return OcclusionCategory.PARTIAL
        if ratio >= self.most_min:
            return OcclusionCategory.MOST
        return OcclusionCategory.COMPLETE


@dataclass(frozen=True)
class OcclusionResult:
    ratio: float
    category: OcclusionCategory

    @property
    def visible(self):
        return self.category in VISIBLE_CATEGORIES


NOT_IN_VIEW = OcclusionResult(0.0, OcclusionCategory.NOT_IN_VIEW)


@dataclass(frozen=True, eq=False)
class DepthImage:
    """Per-pixel range in meters, shape (height, width), +inf where nothing is hit."""

    width: int
    height: int
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.shape != (self.height, self.width):
            raise ValidationError(f"depth values shape {values.shape} does not match {self.height}x{self.width}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def to_bytes(self):
        header = DEPTH_HEADER.pack(DEPTH_MAGIC, self.width, self.height, 0)
        return header + self.values.astype("<f4").tobytes(order="C")

    @classmethod
    def from_bytes(cls, blob):
        if len(blob) < DEPTH_HEADER.size:
            raise ParseError("depth file shorter than its header")
        magic, width, height, _ = DEPTH_HEADER.unpack_from(blob)
        if magic != DEPTH_MAGIC:
            raise ParseError(f"bad depth magic {magic!r}")
        expected = DEPTH_HEADER.size + 4 * width * height
        if len(blob) != expected:
            raise ParseError(f"depth file is {len(blob)} bytes, expected {expected}")
        values = np.frombuffer(blob, dtype="<f4", offset=DEPTH_HEADER.size).reshape(height, width)
        return cls(width, height, values.astype(np.float32))


@lru_cache(maxsize=32)
def _pixel_rays(fx, fy, cx, cy, width, height):
    """Unit ray directions in the camera frame for every pixel center, (H*W, 3)."""
    u, v = np.meshgrid(np.arange(width, dtype=float), np.arange(height, dtype=float))
    dirs = np.stack([(u - cx) / fx, (v - cy) / fy, np.ones_like(u)], axis=-1).reshape(-1, 3)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    dirs.setflags(write=False)
    return dirs


def camera_rays(calibration):
    c = calibration
    return _pixel_rays(c.fx, c.fy, c.cx, c.cy, c.width, c.height)


def ray_box_ranges(origin, directions, box):
    """Entry range along each unit ray into an oriented box, +inf on a miss.

    Rays starting inside the box never register a hit.
    """
    rot = box.orientation
    half = np.asarray(box.dimensions) / 2.0
    o_local = rot.T @ (np.asarray(origin) - box.center)
    d_local = directions @ rot
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o_local) / d_local
        t2 = (half - o_local) / d_local
    parallel = d_local == 0.0
    inside_slab = np.abs(o_local) <= half
    lo = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), np.minimum(t1, t2))
    hi = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), np.maximum(t1, t2))
    t_near = lo.max(axis=1)
    t_far = hi.min(axis=1)
    hit = (t_near <= t_far) & (t_near > 0.0)
    return np.where(hit, t_near, np.inf)


def render_depth(boxes: Sequence, calibration: CameraCalibration, cam_pose: Pose):
    """Z-buffer rasterization of oriented boxes into a range image.

    Args:
        boxes: anything with center/dimensions/orientation, in the frame
            cam_pose maps into (normally world).
        calibration: camera model; fixes the image size.
        cam_pose: pose of the camera frame.

    Returns:
        DepthImage holding, per pixel, the smallest range among the boxes
        its ray enters.
    """
    rays = camera_rays(calibration) @ cam_pose.rotation.T
    origin = cam_pose.translation
    depth = np.full(rays.shape[0], np.inf)
    inverse = cam_pose.inverse()
    for box in boxes:
        # Boxes with no corner in front of the image plane cannot meet a forward ray.
        if np.all(inverse.apply(box.corners())[:, 2] <= 0.0):
            continue
        np.minimum(depth, ray_box_ranges(origin, rays, box), out=depth)
    values = depth.reshape(calibration.height, calibration.width)
    return DepthImage(calibration.width, calibration.height, values)


def expected_near_range(b3d, cam_pose):
    """Camera-to-center distance minus half the box length."""
    return float(np.linalg.norm(cam_pose.translation - b3d.center)) - 0.5 * b3d.length


def occlusion_by_depth(b3d, calibration, cam_pose, depth, cfg):
    """Fraction of the box's projected pixels holding a plausible range."""
    b2d = project_box(b3d, calibration, cam_pose)
    if b2d is None:
        return NOT_IN_VIEW
    patch = depth.values[b2d.v_min:b2d.v_max + 1, b2d.u_min:b2d.u_max + 1].astype(float)
    residual = patch - expected_near_range(b3d, cam_pose)
    plausible = int(np.count_nonzero(np.abs(residual) <= cfg.tau))
    ratio = plausible / patch.size if patch.size else 0.0
    return OcclusionResult(ratio, cfg.categorize(ratio))


@dataclass(frozen=True)
class Label:
    box: BoundingBox3D
    occlusion: OcclusionResult


def occlusion_frame(objects, calibration, cam_pose, cfg, occluders=()):
    """Render one sensor's view and classify every object in it.

    Returns:
        (DepthImage, {object_id: OcclusionResult})
    """
    depth = render_depth(list(objects) + list(occluders), calibration, cam_pose)
    results = {b.object_id: occlusion_by_depth(b, calibration, cam_pose, depth, cfg) for b in objects}
    return depth, results


def label_frame(objects: Sequence[BoundingBox3D],
                sensors: Sequence[Tuple[CameraCalibration, Pose]],
                cfg: VisibilityConfig,
                occluders=()) -> List[List[Label]]:
    """Visible ground-truth labels per sensor, ids shared with the input objects."""
    ids = [b.object_id for b in objects]
    if len(ids) != len(set(ids)):
        raise ValidationError("object_id must be unique within a frame")
    labels = []
    for calibration, cam_pose in sensors:
        _, results = occlusion_frame(objects, calibration, cam_pose, cfg, occluders)
        visible = [Label(b, results[b.object_id]) for b in objects if results[b.object_id].visible]
        logger.debug(f"{calibration.frame_id}: {len(visible)}/{len(objects)} objects visible")
        labels.append(visible)
    return labels
