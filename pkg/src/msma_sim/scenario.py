"""Scenario documents and deterministic world propagation.

A scenario is a JSON (or YAML) document:

    duration, tick_rate, seed, objects[], agents[], occluders[]

Objects move on a flat plane at constant velocity, perturbed by scripted
maneuvers (lateral lane-change ramps and acceleration steps). Agents are one
ego vehicle that follows its own trajectory plus any number of static
infrastructure mounts, each carrying one or more cameras.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import yaml

from .errors import ParseError, TickOutOfRange, ValidationError
from .geometry import (
    OPTICAL_ROTATION,
    WORLD_FRAME,
    BoundingBox3D,
    CameraCalibration,
    ClassLabel,
    FrameTree,
    Pose,
    ReferenceFrame,
    box_corners,
    compose,
    rot_z,
)
from .sensing import DetectionModel

logger = logging.getLogger(__name__)

DEFAULT_TICK_RATE = 10.0
MAX_SEED = 2 ** 64 - 1


class ManeuverKind(str, Enum):
    LANE_CHANGE = "lane_change"
    ACCEL_STEP = "accel_step"


class AgentKind(str, Enum):
    EGO_VEHICLE = "ego_vehicle"
    INFRASTRUCTURE = "infrastructure"


@dataclass(frozen=True)
class ManeuverEvent:
    """lane_change uses lateral_offset/duration, accel_step uses delta/hold."""

    time: float
    kind: ManeuverKind
    lateral_offset: float = 0.0
    duration: float = 0.0
    delta: float = 0.0
    hold: float = 0.0

    @property
    def span(self):
        return self.duration if self.kind == ManeuverKind.LANE_CHANGE else self.hold


@dataclass(frozen=True)
class Trajectory:
    position: Tuple[float, float]
    heading: float = 0.0
    speed: float = 0.0
    events: Tuple[ManeuverEvent, ...] = ()

    def speed_at(self, t):
        v = self.speed
        for ev in self.events:
            if ev.kind == ManeuverKind.ACCEL_STEP:
                v += ev.delta * min(max(t - ev.time, 0.0), ev.hold)
        return v

    def distance_at(self, t):
        """Closed-form longitudinal travel: baseline plus each acceleration step."""
        s = self.speed * t
        for ev in self.events:
            if ev.kind != ManeuverKind.ACCEL_STEP or t <= ev.time:
                continue
            active = min(t - ev.time, ev.hold)
            s += 0.5 * ev.delta * active ** 2
            if t > ev.time + ev.hold:
                s += ev.delta * ev.hold * (t - ev.time - ev.hold)
        return s

    def lateral_at(self, t):
        """Lateral offset; each lane change ramps linearly from the current offset to a new target."""
        start_time, start_value, target, span = 0.0, 0.0, 0.0, None

        def value(at):
            if span is None:
                return start_value
            return start_value + (target - start_value) * min(max((at - start_time) / span, 0.0), 1.0)

        for ev in sorted((e for e in self.events if e.kind == ManeuverKind.LANE_CHANGE), key=lambda e: e.time):
            if ev.time > t:
                break
            start_value = value(ev.time)
            start_time, target, span = ev.time, target + ev.lateral_offset, ev.duration
        return value(t)

    def state_at(self, t):
        """(x, y, heading, speed) at time t."""
        s = self.distance_at(t)
        lateral = self.lateral_at(t)
        c, sn = np.cos(self.heading), np.sin(self.heading)
        x = self.position[0] + s * c - lateral * sn
        y = self.position[1] + s * sn + lateral * c
        return x, y, self.heading, self.speed_at(t)


@dataclass(frozen=True)
class ObjectSpec:
    object_id: int
    class_label: ClassLabel
    trajectory: Trajectory
    dimensions: Tuple[float, float, float]


@dataclass(frozen=True)
class MountSpec:
    position: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    yaw: float = 0.0
    pitch: float = 0.0

    def pose(self):
        return Pose.from_yaw_pitch(self.position, self.yaw, self.pitch)


@dataclass(frozen=True)
class SensorSpec:
    sensor_id: str
    frame_id: str
    camera: CameraCalibration
    mount: MountSpec = MountSpec()
    detection: Dict = field(default_factory=dict)

    def pose_in_agent(self):
        return compose(self.mount.pose(), Pose(np.zeros(3), OPTICAL_ROTATION))


@dataclass(frozen=True)
class AgentSpec:
    agent_id: str
    kind: AgentKind
    mount: MountSpec
    sensors: Tuple[SensorSpec, ...]
    trajectory: Optional[Trajectory] = None

    @property
    def is_ego(self):
        return self.kind == AgentKind.EGO_VEHICLE


@dataclass(frozen=True)
class Occluder:
    """Static structure that blocks views but is never labeled."""

    center: Tuple[float, float, float]
    dimensions: Tuple[float, float, float]
    yaw: float = 0.0

    @property
    def orientation(self):
        return rot_z(self.yaw)

    def corners(self):
        return box_corners(self.center, self.dimensions, self.orientation)


@dataclass(frozen=True)
class ScenarioConfig:
    duration: float
    seed: int
    objects: Tuple[ObjectSpec, ...]
    agents: Tuple[AgentSpec, ...]
    tick_rate: float = DEFAULT_TICK_RATE
    occluders: Tuple[Occluder, ...] = ()
    name: str = ""

    @property
    def n_ticks(self):
        return int(round(self.duration * self.tick_rate))

    @property
    def dt(self):
        return 1.0 / self.tick_rate

    @property
    def ego(self):
        return next(a for a in self.agents if a.is_ego)

    @property
    def infrastructure(self):
        return [a for a in self.agents if not a.is_ego]

    @property
    def classes(self):
        return sorted({o.class_label for o in self.objects}, key=lambda c: c.value)

    def with_seed(self, seed):
        return replace(self, seed=int(seed))


@dataclass(frozen=True, eq=False)
class WorldSnapshot:
    tick: int
    time: float
    boxes: Tuple[BoundingBox3D, ...]
    ego_pose: Pose
    frames: FrameTree
    occluders: Tuple[Occluder, ...] = ()

    def agent_pose(self, agent_id):
        return self.frames.pose_of(agent_id)


def _agent_pose(agent, t):
    if agent.is_ego:
        x, y, heading, _ = agent.trajectory.state_at(t)
        return compose(Pose.from_yaw_pitch((x, y, 0.0), heading), agent.mount.pose())
    return agent.mount.pose()


def build_frames(cfg, t):
    frames = [ReferenceFrame(WORLD_FRAME, None, Pose.identity())]
    for agent in cfg.agents:
        frames.append(ReferenceFrame(agent.agent_id, WORLD_FRAME, _agent_pose(agent, t)))
        for sensor in agent.sensors:
            frames.append(ReferenceFrame(sensor.frame_id, agent.agent_id, sensor.pose_in_agent()))
    return FrameTree(frames)


def world_state_at(cfg: ScenarioConfig, tick: int) -> WorldSnapshot:
    """Deterministic snapshot of every object and agent frame at a tick."""
    if not 0 <= tick <= cfg.n_ticks:
        raise TickOutOfRange(f"tick {tick} outside [0, {cfg.n_ticks}]")
    t = tick / cfg.tick_rate
    boxes = []
    for obj in cfg.objects:
        x, y, heading, _ = obj.trajectory.state_at(t)
        boxes.append(BoundingBox3D(
            center=(x, y, obj.dimensions[2] / 2.0),
            dimensions=obj.dimensions,
            yaw=heading,
            object_id=obj.object_id,
            class_label=obj.class_label,
        ))
    ego = cfg.ego
    x, y, heading, _ = ego.trajectory.state_at(t)
    return WorldSnapshot(
        tick=tick,
        time=t,
        boxes=tuple(boxes),
        ego_pose=Pose.from_yaw_pitch((x, y, 0.0), heading),
        frames=build_frames(cfg, t),
        occluders=cfg.occluders,
    )


# --- document parsing -------------------------------------------------------

def _fields(raw, path, required=(), optional=()):
    if not isinstance(raw, dict):
        raise ParseError("expected a mapping", field=path or "<root>")
    allowed = set(required) | set(optional)
    for key in raw:
        if key not in allowed:
            raise ParseError(f"unknown key '{key}'", field=f"{path}.{key}" if path else key)
    for key in required:
        if key not in raw:
            raise ParseError("missing required key", field=f"{path}.{key}" if path else key)
    return raw


def _number(raw, path):
    if isinstance(raw, bool) or not isinstance(raw, (int, float)):
        raise ParseError(f"expected a number, got {raw!r}", field=path)
    return float(raw)


def _vector(raw, n, path):
    if not isinstance(raw, list) or len(raw) != n:
        raise ParseError(f"expected a list of {n} numbers", field=path)
    return tuple(_number(v, f"{path}[{i}]") for i, v in enumerate(raw))


def _string(raw, path):
    if not isinstance(raw, str) or not raw:
        raise ParseError("expected a non-empty string", field=path)
    return raw


def _list(raw, path):
    if not isinstance(raw, list):
        raise ParseError("expected a list", field=path)
    return raw


def _enum(enum_cls, raw, path):
    try:
        return enum_cls(raw)
    except ValueError:
        choices = ", ".join(e.value for e in enum_cls)
        raise ValidationError(f"{path}: '{raw}' is not one of {{{choices}}}")


def _parse_event(raw, path):
    kind = _enum(ManeuverKind, _fields(raw, path, required=("time", "kind"),
                                       optional=("lateral_offset", "duration", "delta", "hold")).get("kind"),
                 f"{path}.kind")
    if kind == ManeuverKind.LANE_CHANGE:
        _fields(raw, path, required=("time", "kind", "lateral_offset", "duration"))
        return ManeuverEvent(_number(raw["time"], f"{path}.time"), kind,
                             lateral_offset=_number(raw["lateral_offset"], f"{path}.lateral_offset"),
                             duration=_number(raw["duration"], f"{path}.duration"))
    _fields(raw, path, required=("time", "kind", "delta", "hold"))
    return ManeuverEvent(_number(raw["time"], f"{path}.time"), kind,
                         delta=_number(raw["delta"], f"{path}.delta"),
                         hold=_number(raw["hold"], f"{path}.hold"))


def _parse_trajectory(raw, path):
    _fields(raw, path, required=("position",), optional=("heading", "speed", "events"))
    raw_events = _list(raw.get("events", []), f"{path}.events")
    events = tuple(_parse_event(e, f"{path}.events[{i}]") for i, e in enumerate(raw_events))
    return Trajectory(
        position=_vector(raw["position"], 2, f"{path}.position"),
        heading=_number(raw.get("heading", 0.0), f"{path}.heading"),
        speed=_number(raw.get("speed", 0.0), f"{path}.speed"),
        events=tuple(sorted(events, key=lambda e: e.time)),
    )


def _parse_object(raw, path):
    _fields(raw, path, required=("object_id", "class_label", "position", "dimensions"),
            optional=("heading", "speed", "events"))
    oid = raw["object_id"]
    if isinstance(oid, bool) or not isinstance(oid, int):
        raise ParseError("expected an integer", field=f"{path}.object_id")
    traj = _parse_trajectory({k: raw[k] for k in ("position", "heading", "speed", "events") if k in raw}, path)
    return ObjectSpec(
        object_id=oid,
        class_label=_enum(ClassLabel, raw["class_label"], f"{path}.class_label"),
        trajectory=traj,
        dimensions=_vector(raw["dimensions"], 3, f"{path}.dimensions"),
    )


def _parse_mount(raw, path):
    _fields(raw, path, optional=("position", "yaw", "pitch"))
    return MountSpec(
        position=_vector(raw.get("position", [0.0, 0.0, 0.0]), 3, f"{path}.position"),
        yaw=_number(raw.get("yaw", 0.0), f"{path}.yaw"),
        pitch=_number(raw.get("pitch", 0.0), f"{path}.pitch"),
    )


def _parse_sensor(raw, agent_id, path):
    _fields(raw, path, required=("sensor_id", "camera"), optional=("mount", "detection"))
    sensor_id = _string(raw["sensor_id"], f"{path}.sensor_id")
    cam = _fields(raw["camera"], f"{path}.camera", required=("fx", "fy", "cx", "cy", "width", "height"))
    frame_id = f"{agent_id}/{sensor_id}"
    camera = CameraCalibration.from_params(
        _number(cam["fx"], f"{path}.camera.fx"), _number(cam["fy"], f"{path}.camera.fy"),
        _number(cam["cx"], f"{path}.camera.cx"), _number(cam["cy"], f"{path}.camera.cy"),
        int(_number(cam["width"], f"{path}.camera.width")), int(_number(cam["height"], f"{path}.camera.height")),
        frame_id,
    )
    detection = raw.get("detection", {})
    if not isinstance(detection, dict):
        raise ParseError("expected a mapping", field=f"{path}.detection")
    unknown = set(detection) - DetectionModel.field_names()
    if unknown:
        raise ParseError(f"unknown key '{sorted(unknown)[0]}'", field=f"{path}.detection")
    # Validate the overrides now so bad values fail at parse time.
    DetectionModel().with_overrides(detection)
    return SensorSpec(sensor_id, frame_id, camera, _parse_mount(raw.get("mount", {}), f"{path}.mount"), dict(detection))


def _parse_agent(raw, path):
    _fields(raw, path, required=("agent_id", "kind", "sensors"), optional=("mount", "trajectory"))
    agent_id = _string(raw["agent_id"], f"{path}.agent_id")
    if "/" in agent_id or agent_id == WORLD_FRAME:
        raise ValidationError(f"{path}.agent_id: '{agent_id}' is reserved or contains '/'")
    kind = _enum(AgentKind, raw["kind"], f"{path}.kind")
    sensors = tuple(_parse_sensor(s, agent_id, f"{path}.sensors[{i}]")
                    for i, s in enumerate(_list(raw["sensors"], f"{path}.sensors")))
    if len({s.sensor_id for s in sensors}) != len(sensors):
        raise ValidationError(f"{path}: duplicate sensor_id")
    trajectory = None
    if kind == AgentKind.EGO_VEHICLE:
        if "trajectory" not in raw:
            raise ParseError("missing required key", field=f"{path}.trajectory")
        trajectory = _parse_trajectory(raw["trajectory"], f"{path}.trajectory")
    elif "trajectory" in raw:
        raise ValidationError(f"{path}: infrastructure agents are static and take no trajectory")
    return AgentSpec(agent_id, kind, _parse_mount(raw.get("mount", {}), f"{path}.mount"), sensors, trajectory)


def _parse_occluder(raw, path):
    _fields(raw, path, required=("center", "dimensions"), optional=("yaw",))
    dims = _vector(raw["dimensions"], 3, f"{path}.dimensions")
    if min(dims) <= 0:
        raise ValidationError(f"{path}: dimensions must be positive")
    return Occluder(_vector(raw["center"], 3, f"{path}.center"), dims, _number(raw.get("yaw", 0.0), f"{path}.yaw"))


def _validate(cfg):
    if cfg.duration <= 0:
        raise ValidationError("duration must be positive")
    if cfg.tick_rate <= 0:
        raise ValidationError("tick_rate must be positive")
    if not 0 <= cfg.seed <= MAX_SEED:
        raise ValidationError("seed must be a 64-bit unsigned integer")
    ids = [o.object_id for o in cfg.objects]
    if len(ids) != len(set(ids)):
        raise ValidationError("duplicate object_id")
    agent_ids = [a.agent_id for a in cfg.agents]
    if len(agent_ids) != len(set(agent_ids)):
        raise ValidationError("duplicate agent_id")
    if sum(a.is_ego for a in cfg.agents) != 1:
        raise ValidationError("exactly one ego_vehicle agent is required")
    trajectories = [(f"object {o.object_id}", o.trajectory) for o in cfg.objects]
    trajectories.append((f"agent {cfg.ego.agent_id}", cfg.ego.trajectory))
    for owner, traj in trajectories:
        for ev in traj.events:
            if not 0.0 <= ev.time <= cfg.duration:
                raise ValidationError(f"{owner}: event time {ev.time} outside [0, {cfg.duration}]")
            if ev.span <= 0:
                raise ValidationError(f"{owner}: maneuver durations must be positive")
    for obj in cfg.objects:
        if min(obj.dimensions) <= 0:
            raise ValidationError(f"object {obj.object_id}: dimensions must be positive")


def scenario_from_dict(raw) -> ScenarioConfig:
    _fields(raw, "", required=("duration", "seed", "objects", "agents"),
            optional=("tick_rate", "occluders", "name"))
    seed = raw["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ParseError("expected an integer", field="seed")
    cfg = ScenarioConfig(
        duration=_number(raw["duration"], "duration"),
        seed=seed,
        objects=tuple(_parse_object(o, f"objects[{i}]") for i, o in enumerate(_list(raw["objects"], "objects"))),
        agents=tuple(_parse_agent(a, f"agents[{i}]") for i, a in enumerate(_list(raw["agents"], "agents"))),
        tick_rate=_number(raw.get("tick_rate", DEFAULT_TICK_RATE), "tick_rate"),
        occluders=tuple(_parse_occluder(o, f"occluders[{i}]")
                        for i, o in enumerate(_list(raw.get("occluders", []), "occluders"))),
        name=str(raw.get("name", "")),
    )
    _validate(cfg)
    return cfg


def parse_scenario(text: str) -> ScenarioConfig:
    """Parse and validate a scenario document (JSON, or YAML).

    JSON is tried first; YAML 1.1 would turn JSON exponents such as 1e3 into
    strings. When both fail, a document opening with '{' reports the JSON
    error and line.
    """
    try:
        return scenario_from_dict(json.loads(text))
    except json.JSONDecodeError as json_error:
        try:
            raw = yaml.safe_load(text)
        except yaml.YAMLError as e:
            if text.lstrip().startswith("{"):
                raise ParseError(f"malformed scenario document: {json_error.msg}", line=json_error.lineno)
            mark = getattr(e, "problem_mark", None)
            raise ParseError(f"malformed scenario document: {getattr(e, 'problem', e)}",
                             line=mark.line + 1 if mark is not None else None)
    return scenario_from_dict(raw)


def load_scenario(path) -> ScenarioConfig:
    path = Path(path)
    cfg = parse_scenario(path.read_text())
    if not cfg.name:
        cfg = replace(cfg, name=path.stem)
    logger.debug(f"Loaded scenario '{cfg.name}' with {len(cfg.objects)} objects, {len(cfg.agents)} agents")
    return cfg


# --- serialization ----------------------------------------------------------

def _event_dict(ev):
    if ev.kind == ManeuverKind.LANE_CHANGE:
        return {"time": ev.time, "kind": ev.kind.value, "lateral_offset": ev.lateral_offset, "duration": ev.duration}
    return {"time": ev.time, "kind": ev.kind.value, "delta": ev.delta, "hold": ev.hold}


def _trajectory_dict(traj):
    return {
        "position": list(traj.position),
        "heading": traj.heading,
        "speed": traj.speed,
        "events": [_event_dict(e) for e in traj.events],
    }


def _mount_dict(mount):
    return {"position": list(mount.position), "yaw": mount.yaw, "pitch": mount.pitch}


def scenario_to_dict(cfg: ScenarioConfig):
    agents = []
    for agent in cfg.agents:
        entry = {
            "agent_id": agent.agent_id,
            "kind": agent.kind.value,
            "mount": _mount_dict(agent.mount),
            "sensors": [{
                "sensor_id": s.sensor_id,
                "camera": {k: v for k, v in s.camera.to_dict().items() if k != "frame_id"},
                "mount": _mount_dict(s.mount),
                "detection": dict(s.detection),
            } for s in agent.sensors],
        }
        if agent.trajectory is not None:
            entry["trajectory"] = _trajectory_dict(agent.trajectory)
        agents.append(entry)
    doc = {
        "name": cfg.name,
        "duration": cfg.duration,
        "tick_rate": cfg.tick_rate,
        "seed": cfg.seed,
        "objects": [dict(object_id=o.object_id, class_label=o.class_label.value,
                         dimensions=list(o.dimensions), **_trajectory_dict(o.trajectory)) for o in cfg.objects],
        "agents": agents,
        "occluders": [{"center": list(o.center), "dimensions": list(o.dimensions), "yaw": o.yaw}
                      for o in cfg.occluders],
    }
    return doc


def serialize_scenario(cfg: ScenarioConfig) -> str:
    """Canonical JSON with every default written out."""
    return json.dumps(scenario_to_dict(cfg), indent=2) + "\n"
