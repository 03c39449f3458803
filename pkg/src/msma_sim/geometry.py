"""Reference-frame chain and projective geometry.

Conventions:
    Pose(translation t, rotation R) maps a point expressed in the child frame
    into its parent frame: p_parent = R @ p_child + t.

    Body frames (vehicles, infrastructure mounts, the world) are x forward,
    y left, z up. Camera frames are +z forward, +x right, +y down; the fixed
    rotation OPTICAL_ROTATION takes camera coordinates into the body frame
    the camera is mounted on.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Tuple, Union

import numpy as np

from .errors import DisconnectedFrames, UnknownFrame, ValidationError

logger = logging.getLogger(__name__)

ORTHONORMAL_TOL = 1e-9
WORLD_FRAME = "world"

# Columns are the camera x/y/z axes written in body coordinates.
OPTICAL_ROTATION = np.array([
    [0.0, 0.0, 1.0],
    [-1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0],
])


def rot_z(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot_y(angle):
    """Rotation about y; positive angles tip the x axis toward -z (nose down)."""
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def orthonormalize(rotation):
    """Gram-Schmidt on the columns of a near-rotation matrix."""
    q, r = np.linalg.qr(rotation)
    # QR leaves the sign of each column free; keep the diagonal of r positive.
    q = q * np.sign(np.where(np.diag(r) == 0.0, 1.0, np.diag(r)))
    if np.linalg.det(q) < 0:
        q[:, 2] = -q[:, 2]
    return q


def _frozen(array):
    out = np.array(array, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform from a child frame into its parent."""

    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=float).reshape(3)
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        drift = np.max(np.abs(r.T @ r - np.eye(3)))
        if drift > ORTHONORMAL_TOL:
            if drift > 1e-3:
                raise ValidationError(f"rotation is not orthonormal (drift {drift:.3g})")
            r = orthonormalize(r)
        if np.linalg.det(r) < 0:
            raise ValidationError("rotation has determinant -1 (reflection)")
        object.__setattr__(self, "translation", _frozen(t))
        object.__setattr__(self, "rotation", _frozen(r))

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_yaw_pitch(cls, translation, yaw=0.0, pitch=0.0):
        """Body-convention pose: heading about z, then pitch (positive = looking down)."""
        return cls(translation, rot_z(yaw) @ rot_y(pitch))

    def apply(self, points):
        """Map points (3,) or (N, 3) from the child frame into the parent."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.translation

    def inverse(self):
        rt = self.rotation.T
        return Pose(-rt @ self.translation, rt)

    def isclose(self, other, atol=1e-9):
        return (np.allclose(self.translation, other.translation, atol=atol)
                and np.allclose(self.rotation, other.rotation, atol=atol))

    def to_dict(self):
        return {"translation": self.translation.tolist(), "rotation": self.rotation.tolist()}

    @classmethod
    def from_dict(cls, data):
        return cls(data["translation"], data["rotation"])

    def __repr__(self):
        return f"Pose(t={self.translation.tolist()}, R={self.rotation.tolist()})"


def compose(a, b):
    """Pose applying b first, then a."""
    return Pose(a.rotation @ b.translation + a.translation, a.rotation @ b.rotation)


@dataclass(frozen=True)
class ReferenceFrame:
    id: str
    parent: Optional[str]
    pose_in_parent: Pose = field(default_factory=Pose)


class FrameTree:
    """A forest of reference frames, normally rooted at the world frame."""

    def __init__(self, frames: Iterable[ReferenceFrame]):
        self.frames: Dict[str, ReferenceFrame] = {}
        for frame in frames:
            if frame.id in self.frames:
                raise ValidationError(f"duplicate frame id '{frame.id}'")
            self.frames[frame.id] = frame
        for frame in self.frames.values():
            if frame.parent is not None and frame.parent not in self.frames:
                raise UnknownFrame(f"frame '{frame.id}' has unknown parent '{frame.parent}'")
        for frame_id in self.frames:
            self._chain(frame_id)

    def __contains__(self, frame_id):
        return frame_id in self.frames

    def _chain(self, frame_id) -> List[Tuple[str, Pose]]:
        """Ancestors of frame_id (itself first) with the pose of frame_id in each."""
        if frame_id not in self.frames:
            raise UnknownFrame(f"unknown frame '{frame_id}'")
        chain = [(frame_id, Pose.identity())]
        seen = {frame_id}
        pose = Pose.identity()
        current = self.frames[frame_id]
        while current.parent is not None:
            pose = compose(current.pose_in_parent, pose)
            if current.parent in seen:
                raise ValidationError(f"frame cycle through '{current.parent}'")
            seen.add(current.parent)
            chain.append((current.parent, pose))
            current = self.frames[current.parent]
        return chain

    def pose_of(self, frame_id, root=WORLD_FRAME):
        return self.transform_to(frame_id, root)

    def transform_to(self, source, target):
        """Pose mapping points expressed in `source` into `target`."""
        source_chain = self._chain(source)
        target_poses = dict(self._chain(target))
        for ancestor, source_in_ancestor in source_chain:
            if ancestor in target_poses:
                return compose(target_poses[ancestor].inverse(), source_in_ancestor)
        raise DisconnectedFrames(f"frames '{source}' and '{target}' share no common ancestor")


def transform_to(frame_tree: Union[FrameTree, Iterable[ReferenceFrame]], source, target):
    tree = frame_tree if isinstance(frame_tree, FrameTree) else FrameTree(frame_tree)
    return tree.transform_to(source, target)


_CORNER_SIGNS = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float)


def box_corners(center, dimensions, rotation):
    """Corners (8, 3) of an oriented box with (length, width, height) along its x/y/z."""
    half = np.asarray(dimensions, dtype=float) / 2.0
    return (_CORNER_SIGNS * half) @ np.asarray(rotation).T + np.asarray(center)


class ClassLabel(str, Enum):
    CAR = "car"
    PEDESTRIAN = "pedestrian"
    TRUCK = "truck"


@dataclass(frozen=True, eq=False)
class BoundingBox3D:
    """Oriented box. `yaw` describes level boxes; `attitude` overrides it once
    the box has been expressed in a tilted frame (e.g. a camera frame)."""

    center: np.ndarray
    dimensions: Tuple[float, float, float]
    yaw: float
    object_id: int
    class_label: ClassLabel
    frame: str = WORLD_FRAME
    attitude: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "center", _frozen(np.asarray(self.center, dtype=float).reshape(3)))
        dims = tuple(float(d) for d in self.dimensions)
        if len(dims) != 3 or min(dims) <= 0:
            raise ValidationError(f"box {self.object_id}: dimensions must be three positive values, got {dims}")
        object.__setattr__(self, "dimensions", dims)
        object.__setattr__(self, "class_label", ClassLabel(self.class_label))
        if self.attitude is not None:
            object.__setattr__(self, "attitude", _frozen(np.asarray(self.attitude).reshape(3, 3)))

    @property
    def length(self):
        return self.dimensions[0]

    @property
    def orientation(self):
        return self.attitude if self.attitude is not None else rot_z(self.yaw)

    def corners(self):
        """The 8 corners, shape (8, 3), in the box's frame."""
        return box_corners(self.center, self.dimensions, self.orientation)

    def transformed(self, pose, frame):
        """The same box expressed in `frame`, given the pose of the box's frame in `frame`."""
        return BoundingBox3D(
            center=pose.apply(self.center),
            dimensions=self.dimensions,
            yaw=self.yaw,
            object_id=self.object_id,
            class_label=self.class_label,
            frame=frame,
            attitude=pose.rotation @ self.orientation,
        )

    def to_dict(self):
        return {
            "object_id": self.object_id,
            "class": self.class_label.value,
            "center": self.center.tolist(),
            "dimensions": list(self.dimensions),
            "yaw": self.yaw,
            "attitude": self.orientation.tolist(),
            "frame": self.frame,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            center=data["center"],
            dimensions=data["dimensions"],
            yaw=data.get("yaw", 0.0),
            object_id=data["object_id"],
            class_label=data["class"],
            frame=data.get("frame", WORLD_FRAME),
            attitude=data.get("attitude"),
        )


@dataclass(frozen=True)
class BoundingBox2D:
    """Inclusive pixel ranges: pixel (u, v) is inside if its integer center is."""

    u_min: int
    v_min: int
    u_max: int
    v_max: int

    def __post_init__(self):
        if self.u_min > self.u_max or self.v_min > self.v_max:
            raise ValidationError(f"empty 2D box {self}")

    @property
    def pixel_count(self):
        return (self.u_max - self.u_min + 1) * (self.v_max - self.v_min + 1)

    @property
    def width(self):
        return self.u_max - self.u_min + 1

    @property
    def height(self):
        return self.v_max - self.v_min + 1


@dataclass(frozen=True, eq=False)
class CameraCalibration:
    intrinsics: np.ndarray
    image_size: Tuple[int, int]
    frame_id: str

    def __post_init__(self):
        k = _frozen(np.asarray(self.intrinsics, dtype=float).reshape(3, 3))
        object.__setattr__(self, "intrinsics", k)
        width, height = (int(x) for x in self.image_size)
        object.__setattr__(self, "image_size", (width, height))
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError(f"camera '{self.frame_id}': focal lengths must be positive")
        if not (0 < self.cx < width and 0 < self.cy < height):
            raise ValidationError(f"camera '{self.frame_id}': principal point outside the image")

    def __eq__(self, other):
        if not isinstance(other, CameraCalibration):
            return NotImplemented
        return (self.frame_id == other.frame_id and self.image_size == other.image_size
                and np.array_equal(self.intrinsics, other.intrinsics))

    def __hash__(self):
        return hash((self.frame_id, self.image_size, tuple(self.intrinsics.ravel())))

    @classmethod
    def from_params(cls, fx, fy, cx, cy, width, height, frame_id):
        k = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
        return cls(k, (width, height), frame_id)

    fx = property(lambda self: float(self.intrinsics[0, 0]))
    fy = property(lambda self: float(self.intrinsics[1, 1]))
    cx = property(lambda self: float(self.intrinsics[0, 2]))
    cy = property(lambda self: float(self.intrinsics[1, 2]))
    width = property(lambda self: self.image_size[0])
    height = property(lambda self: self.image_size[1])

    @property
    def horizontal_fov(self):
        """Full horizontal field of view in radians."""
        return math.atan(self.cx / self.fx) + math.atan((self.width - self.cx) / self.fx)

    def to_dict(self):
        return {
            "frame_id": self.frame_id,
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, data):
        return cls.from_params(data["fx"], data["fy"], data["cx"], data["cy"], data["width"], data["height"],
                               data["frame_id"])


def project_points(points_cam, calibration):
    """Pinhole projection of camera-frame points (N, 3) with z > 0 to pixels (N, 2)."""
    pts = np.atleast_2d(points_cam)
    u = calibration.fx * pts[:, 0] / pts[:, 2] + calibration.cx
    v = calibration.fy * pts[:, 1] / pts[:, 2] + calibration.cy
    return np.stack([u, v], axis=1)


def project_box(b3d, calibration, cam_pose):
    """Project a box into the image; None when nothing of it lands in view.

    Args:
        b3d: box expressed in the frame cam_pose maps into.
        calibration: camera intrinsics and image size.
        cam_pose: pose of the camera frame in the box's frame.

    Returns:
        The clamped pixel hull of the corners in front of the image plane, or
        None if every corner is at z <= 0 or the clamped hull holds no pixel
        center. Boxes straddling the image plane keep only their in-front
        corners (an approximation of the true silhouette).
    """
    corners_cam = cam_pose.inverse().apply(b3d.corners())
    in_front = corners_cam[corners_cam[:, 2] > 0.0]
    if len(in_front) == 0:
        return None
    uv = project_points(in_front, calibration)
    w, h = calibration.width, calibration.height
    u_lo = math.ceil(float(np.clip(uv[:, 0].min(), 0.0, w - 1)))
    u_hi = math.floor(float(np.clip(uv[:, 0].max(), 0.0, w - 1)))
    v_lo = math.ceil(float(np.clip(uv[:, 1].min(), 0.0, h - 1)))
    v_hi = math.floor(float(np.clip(uv[:, 1].max(), 0.0, h - 1)))
    # A hull entirely off one side clamps to a single edge line; it must still overlap the image.
    if uv[:, 0].max() < 0 or uv[:, 0].min() > w - 1 or uv[:, 1].max() < 0 or uv[:, 1].min() > h - 1:
        return None
    if u_lo > u_hi or v_lo > v_hi:
        return None
    return BoundingBox2D(u_lo, v_lo, u_hi, v_hi)
