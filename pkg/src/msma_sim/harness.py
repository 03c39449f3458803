"""Simulation driver, experiment matrix and label export."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass
from multiprocessing import Pool
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, MsmaError, RunError, ValidationError
from .evaluation import FrameMatch, RunMetrics, TruthFrame, evaluate, match_frame
from .fusion import EgoModel, fuse_at_tracking, fuse_post_tracking
from .geometry import WORLD_FRAME, ClassLabel
from .network import MessageLog, Network, TopologyKind, ingest_crosstalk, make_payload
from .rng import rng_stream
from .scenario import ScenarioConfig, WorldSnapshot, load_scenario, world_state_at
from .sensing import Detection, sense
from .settings import Settings
from .tracking import Tracker
from .visibility import OcclusionCategory, occlusion_frame

logger = logging.getLogger(__name__)

THREADS_ENV = "MSMA_THREADS"


@dataclass(frozen=True)
class RunSpec:
    scenario: Union[str, Path, ScenarioConfig]
    ego_model: EgoModel = EgoModel.LOCAL
    topology: TopologyKind = TopologyKind.NO_CORRELATION
    seed: Optional[int] = None
    out_dir: Optional[Path] = None
    log_frames: bool = False
    log_messages: bool = False

    def __post_init__(self):
        if isinstance(self.ego_model, str) and not isinstance(self.ego_model, EgoModel):
            object.__setattr__(self, "ego_model", EgoModel.parse(self.ego_model))
        if isinstance(self.topology, str) and not isinstance(self.topology, TopologyKind):
            object.__setattr__(self, "topology", TopologyKind.parse(self.topology))
        if self.out_dir is not None:
            object.__setattr__(self, "out_dir", Path(self.out_dir))

    def scenario_config(self) -> ScenarioConfig:
        cfg = self.scenario if isinstance(self.scenario, ScenarioConfig) else load_scenario(self.scenario)
        return cfg if self.seed is None else cfg.with_seed(self.seed)


@dataclass(frozen=True, eq=False)
class SensingRecord:
    """World snapshots and every agent's detections for one (scenario, seed)."""

    snapshots: Tuple[WorldSnapshot, ...]
    detections: Tuple[Dict[str, Tuple[Detection, ...]], ...]


class FrameLog:
    """Append-only, one record per tick."""

    def __init__(self):
        self.records: List[dict] = []

    def append(self, record):
        if self.records and record["tick"] <= self.records[-1]["tick"]:
            raise ValidationError(f"frame log tick {record['tick']} is not after {self.records[-1]['tick']}")
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def write(self, path):
        with open(path, "w") as fh:
            for record in self.records:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path):
        log = cls()
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    log.append(json.loads(line))
        return log


@dataclass(frozen=True, eq=False)
class RunResult:
    metrics: RunMetrics
    frames: Optional[FrameLog] = None
    messages_sent: int = 0


def compute_visibility(cfg: ScenarioConfig, settings: Settings, snapshots=None):
    """{sensor frame id: {object_id: OcclusionResult}} for every tick; seed independent."""
    snapshots = snapshots or [world_state_at(cfg, t) for t in range(cfg.n_ticks)]
    out = []
    for snapshot in snapshots:
        per_sensor = {}
        for agent in cfg.agents:
            for sensor in agent.sensors:
                cam_pose = snapshot.frames.transform_to(sensor.frame_id, WORLD_FRAME)
                _, per_sensor[sensor.frame_id] = occlusion_frame(snapshot.boxes, sensor.camera, cam_pose,
                                                                 settings.visibility, snapshot.occluders)
        out.append(per_sensor)
    return out


def compute_sensing(cfg: ScenarioConfig, settings: Settings, visibility=None) -> SensingRecord:
    """Sense every tick for every agent; draws are keyed by (seed, agent, tick)."""
    snapshots = [world_state_at(cfg, t) for t in range(cfg.n_ticks)]
    if visibility is None:
        visibility = compute_visibility(cfg, settings, snapshots)
    detections = []
    for snapshot in snapshots:
        per_agent = {}
        for agent in cfg.agents:
            rng = rng_stream(cfg.seed, "sense", agent.agent_id, snapshot.tick, generator=settings.rng.generator)
            per_agent[agent.agent_id] = tuple(sense(snapshot, agent, settings.detection, rng,
                                                    settings.visibility, visibility[snapshot.tick]))
        detections.append(per_agent)
    return SensingRecord(tuple(snapshots), tuple(detections))


def fuse_into_ego(tracker: Tracker, messages, ego_model: EgoModel, tick, settings: Settings):
    if ego_model == EgoModel.LOCAL:
        return tracker
    for message in sorted(messages, key=lambda m: (m.tick_sent, m.sender_id)):
        if ego_model == EgoModel.FUSION_AT_TRACKING:
            fuse_at_tracking(tracker, message.payload)
        else:
            tracker.tracks = fuse_post_tracking(tracker.tracks, message.payload, tick, settings.association,
                                                settings.fusion, tracker.id_source())
    return tracker


def _frame_record(snapshot, sensing_tick, trackers, messages, ego_id):
    return {
        "tick": snapshot.tick,
        "time": snapshot.time,
        "detections": {aid: [d.to_dict() for d in dets] for aid, dets in sensing_tick.items()},
        "tracks": {aid: [t.to_dict() for t in tr.tracks] for aid, tr in trackers.items() if aid != ego_id},
        "messages": [m.to_record() for m in messages],
        "ego_tracks": [t.to_dict() for t in trackers[ego_id].tracks],
        "truth": TruthFrame.from_snapshot(snapshot).to_dict(),
    }


def simulate(cfg: ScenarioConfig, ego_model: EgoModel, topology: TopologyKind, settings: Settings,
             sensing: Optional[SensingRecord] = None, frame_log: Optional[FrameLog] = None,
             message_log: Optional[MessageLog] = None) -> RunResult:
    """Lockstep loop over ticks, then evaluation of the ego's confirmed tracks.

    Per tick: local tracking on every agent, crosstalk routing and absorption by
    infrastructure, then fresh payloads to the ego, ego fusion per `ego_model`
    and lifecycle close.
    """
    sensing = sensing or compute_sensing(cfg, settings)
    ego_id = cfg.ego.agent_id
    infra_ids = [a.agent_id for a in cfg.infrastructure]
    trackers = {a.agent_id: Tracker(a.agent_id, cfg.dt, settings.tracker, settings.association)
                for a in cfg.agents}
    network = Network(ego_id, infra_ids, settings.network.topology(topology), cfg.seed,
                      settings.network.latency_ticks, settings.rng.generator, log=message_log)
    context = {"scenario": cfg.name, "ego_model": ego_model.cli_name, "topology": topology.cli_name,
               "seed": cfg.seed}
    frames: List[FrameMatch] = []
    for tick, snapshot in enumerate(sensing.snapshots):
        try:
            for agent in cfg.agents:
                tracker = trackers[agent.agent_id]
                tracker.begin_tick(tick)
                tracker.ingest_by_sensor(sensing.detections[tick][agent.agent_id])
            payloads = {aid: make_payload(trackers[aid], aid) for aid in infra_ids}
            crosstalk = network.exchange_crosstalk(payloads, tick)
            for aid in infra_ids:
                ingest_crosstalk(trackers[aid], crosstalk.get(aid, []))
            # the ego hears each agent after its crosstalk is absorbed
            payloads = {aid: make_payload(trackers[aid], aid) for aid in infra_ids}
            to_ego = network.send_to_ego(payloads, tick)
            fuse_into_ego(trackers[ego_id], to_ego, ego_model, tick, settings)
            for tracker in trackers.values():
                tracker.end_tick()
        except ConfigError:
            raise
        except MsmaError as e:
            raise RunError(str(e), {**context, "tick": tick}) from e
        frames.append(match_frame(trackers[ego_id].confirmed_tracks, snapshot, settings.evaluation))
        if frame_log is not None:
            routed = [m for msgs in crosstalk.values() for m in msgs] + to_ego
            frame_log.append(_frame_record(snapshot, sensing.detections[tick], trackers, routed, ego_id))
    metrics = evaluate(frames, settings.evaluation)
    return RunResult(metrics, frame_log, network.sent)


def _check_burn_in(cfg, settings):
    if settings.evaluation.burn_in >= cfg.duration:
        raise ValidationError(f"evaluation.burn_in ({settings.evaluation.burn_in}s) must be shorter than "
                              f"the scenario ({cfg.duration}s)")


def run_config(spec: RunSpec, cfg: ScenarioConfig, settings: Settings):
    return {
        "scenario": cfg.name,
        "ego_model": spec.ego_model.cli_name,
        "topology": spec.topology.cli_name,
        "seed": cfg.seed,
        "settings": settings.to_dict(),
    }


def run(spec: RunSpec, settings: Optional[Settings] = None) -> RunResult:
    """One simulation; writes metrics (and optional logs) when spec.out_dir is set."""
    settings = settings or Settings()
    cfg = spec.scenario_config()
    _check_burn_in(cfg, settings)
    logger.info(f"Running {cfg.name or 'scenario'}: ego={spec.ego_model.cli_name} "
                f"topology={spec.topology.cli_name} seed={cfg.seed}")
    out = spec.out_dir
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    message_log = MessageLog(out / "messages.ndjson") if out is not None and spec.log_messages else None
    frame_log = FrameLog() if spec.log_frames else None
    try:
        result = simulate(cfg, spec.ego_model, spec.topology, settings, frame_log=frame_log,
                          message_log=message_log)
    finally:
        if message_log is not None:
            message_log.close()
    if out is not None:
        result.metrics.write_json(out / "metrics.json", run_config(spec, cfg, settings))
        result.metrics.write_csv(out / "metrics.csv")
        if frame_log is not None:
            frame_log.write(out / "frames.ndjson")
    mean_ap = result.metrics.mean_ap
    logger.info(f"Finished {cfg.name or 'scenario'}: mAP={'n/a' if mean_ap is None else f'{mean_ap:.4f}'}, "
                f"{result.messages_sent} messages")
    return result


# --- experiment matrix ------------------------------------------------------

EGO_MODELS = tuple(EgoModel)
TOPOLOGIES = tuple(TopologyKind)


@dataclass(frozen=True)
class CellSample:
    scenario: str
    seed: int
    mean_ap: Optional[float]
    false_positives: int
    false_negatives: int

    @property
    def key(self):
        return (self.scenario, self.seed)


@dataclass(frozen=True)
class MatrixCell:
    ego_model: EgoModel
    topology: TopologyKind
    samples: Tuple[CellSample, ...]

    @property
    def values(self):
        return [s.mean_ap for s in self.samples if s.mean_ap is not None]

    @property
    def mean(self):
        v = self.values
        return float(np.mean(v)) if v else None

    @property
    def stderr(self):
        return standard_error(self.values)

    def to_dict(self):
        return {
            "ego_model": self.ego_model.cli_name,
            "topology": self.topology.cli_name,
            "mAP": self.mean,
            "stderr": self.stderr,
            "n": len(self.values),
            "false_positives": sum(s.false_positives for s in self.samples),
            "false_negatives": sum(s.false_negatives for s in self.samples),
        }


def standard_error(values):
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        return 0.0
    return float(values.std(ddof=1) / math.sqrt(values.size))


def paired_difference(a: MatrixCell, b: MatrixCell):
    """Mean and standard error of mAP(b) - mAP(a) over runs sharing scenario and seed."""
    left = {s.key: s.mean_ap for s in a.samples if s.mean_ap is not None}
    diffs = [s.mean_ap - left[s.key] for s in b.samples if s.mean_ap is not None and s.key in left]
    if not diffs:
        return None, None
    return float(np.mean(diffs)), standard_error(diffs)


@dataclass(frozen=True)
class MatrixResult:
    cells: Dict[Tuple[EgoModel, TopologyKind], MatrixCell]

    def cell(self, ego_model, topology):
        ego_model = EgoModel.parse(ego_model) if isinstance(ego_model, str) else ego_model
        topology = TopologyKind.parse(topology) if isinstance(topology, str) else topology
        return self.cells[(ego_model, topology)]

    def comparisons(self):
        """Paired mAP gains of ddf over the other ego models, per topology."""
        out = []
        for baseline in (EgoModel.LOCAL, EgoModel.FUSION_AT_TRACKING):
            for topo in TOPOLOGIES:
                a = self.cells.get((baseline, topo))
                b = self.cells.get((EgoModel.FUSION_POST_TRACKING, topo))
                if a is None or b is None:
                    continue
                gap, stderr = paired_difference(a, b)
                out.append({"baseline": baseline.cli_name, "model": "ddf", "topology": topo.cli_name,
                            "gain": gap, "stderr": stderr})
        return out

    def to_dict(self):
        cells = [self.cells[k].to_dict() for k in sorted(self.cells, key=lambda k: (k[0].value, k[1].value))]
        return {"cells": cells, "comparisons": self.comparisons()}

    def format_table(self):
        corner = "ego / topology"
        header = f"{corner:<16}" + "".join(f"{t.cli_name:>20}" for t in TOPOLOGIES)
        lines = [header]
        for ego in EGO_MODELS:
            row = f"{ego.cli_name:<16}"
            for topo in TOPOLOGIES:
                cell = self.cells.get((ego, topo))
                if cell is None or cell.mean is None:
                    row += f"{'n/a':>20}"
                else:
                    row += f"{cell.mean:>11.4f} ± {cell.stderr:<6.4f}"
            lines.append(row)
        lines.append("")
        for c in self.comparisons():
            if c["gain"] is None:
                continue
            label = f"ddf - {c['baseline']} ({c['topology']})"
            lines.append(f"{label:<36}{c['gain']:>+9.4f} ± {c['stderr']:.4f}")
        return "\n".join(lines)

    def write(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "matrix.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        (out_dir / "matrix.txt").write_text(self.format_table() + "\n")


def worker_count(jobs):
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        limit = os.cpu_count() or 1
    else:
        try:
            limit = int(raw)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got '{raw}'")
        if limit < 1:
            raise ConfigError(f"{THREADS_ENV} must be >= 1")
    return max(1, min(limit, jobs))


def _matrix_job(job):
    """All nine cells for one (scenario, seed), sharing a single sensing pass."""
    cfg, settings = job
    sensing = compute_sensing(cfg, settings)
    samples = []
    for ego in EGO_MODELS:
        for topo in TOPOLOGIES:
            metrics = simulate(cfg, ego, topo, settings, sensing=sensing).metrics
            samples.append((ego, topo, CellSample(cfg.name, cfg.seed, metrics.mean_ap,
                                                  metrics.total_fp, metrics.total_fn)))
    logger.info(f"Matrix: {cfg.name} seed {cfg.seed} done")
    return samples


def run_matrix(scenarios: Sequence, seeds: Union[int, Sequence[int]], settings: Optional[Settings] = None,
               out_dir=None) -> MatrixResult:
    """Every ego model x topology over every scenario and seed.

    Args:
        scenarios: scenario paths or ScenarioConfigs.
        seeds: a count n (seeds scenario.seed .. scenario.seed + n - 1) or
            explicit seeds.
        settings: simulator settings.
        out_dir: where matrix.json and matrix.txt go, if given.
    """
    settings = settings or Settings()
    configs = [s if isinstance(s, ScenarioConfig) else load_scenario(s) for s in scenarios]
    if not configs:
        raise ValidationError("run_matrix needs at least one scenario")
    jobs = []
    for cfg in configs:
        _check_burn_in(cfg, settings)
        seed_list = range(cfg.seed, cfg.seed + seeds) if isinstance(seeds, int) else seeds
        jobs.extend((cfg.with_seed(seed), settings) for seed in seed_list)

    workers = worker_count(len(jobs))
    logger.info(f"Matrix: {len(jobs)} scenario/seed jobs x {len(EGO_MODELS) * len(TOPOLOGIES)} cells, "
                f"{workers} worker(s)")
    if workers == 1:
        results = [_matrix_job(job) for job in jobs]
    else:
        with Pool(processes=workers) as pool:
            results = pool.map(_matrix_job, jobs)

    collected = {(e, t): [] for e in EGO_MODELS for t in TOPOLOGIES}
    for samples in results:
        for ego, topo, sample in samples:
            collected[(ego, topo)].append(sample)
    matrix = MatrixResult({k: MatrixCell(k[0], k[1], tuple(v)) for k, v in collected.items()})
    if out_dir is not None:
        matrix.write(out_dir)
    return matrix


# --- label export -----------------------------------------------------------

def _write(path: Path, data):
    try:
        if isinstance(data, bytes):
            path.write_bytes(data)
        else:
            path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror or e}") from e


def export_labels(scenario, out_dir, settings: Optional[Settings] = None):
    """Depth images, visible labels, calibration and poses for every sensor and tick.

    Layout under out_dir:
        <agent>/<sensor>/calibration.json
        <agent>/<sensor>/poses.json             pose of the sensor in world per tick
        <agent>/<sensor>/depth_<tick>.bin       MSMD header + float32 ranges
        <agent>/<sensor>/labels_<tick>.json     visible objects only
        summary.json                            label counts per sensor

    Returns:
        The summary dictionary.
    """
    settings = settings or Settings()
    cfg = scenario if isinstance(scenario, ScenarioConfig) else load_scenario(scenario)
    out_dir = Path(out_dir)
    sensors = [(agent, sensor) for agent in cfg.agents for sensor in agent.sensors]
    summary = {"scenario": cfg.name, "ticks": cfg.n_ticks, "sensors": {}}
    poses = {s.frame_id: [] for _, s in sensors}
    for agent, sensor in sensors:
        sensor_dir = out_dir / agent.agent_id / sensor.sensor_id
        try:
            sensor_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise OSError(f"cannot create {sensor_dir}: {e.strerror or e}") from e
        _write(sensor_dir / "calibration.json", sensor.camera.to_dict())
        summary["sensors"][sensor.frame_id] = {
            "labels": 0,
            "by_class": {c.value: 0 for c in ClassLabel},
            "in_view_by_occlusion": {c.value: 0 for c in OcclusionCategory if c != OcclusionCategory.NOT_IN_VIEW},
        }

    for tick in range(cfg.n_ticks):
        snapshot = world_state_at(cfg, tick)
        for agent, sensor in sensors:
            sensor_dir = out_dir / agent.agent_id / sensor.sensor_id
            cam_pose = snapshot.frames.transform_to(sensor.frame_id, WORLD_FRAME)
            to_sensor = cam_pose.inverse()
            depth, results = occlusion_frame(snapshot.boxes, sensor.camera, cam_pose, settings.visibility,
                                             snapshot.occluders)
            labels = []
            counts = summary["sensors"][sensor.frame_id]
            for box in snapshot.boxes:
                result = results[box.object_id]
                if result.category != OcclusionCategory.NOT_IN_VIEW:
                    counts["in_view_by_occlusion"][result.category.value] += 1
                if not result.visible:
                    continue
                labels.append({
                    "object_id": box.object_id,
                    "class": box.class_label.value,
                    "occlusion": result.category.value,
                    "ratio": result.ratio,
                    "box": box.transformed(to_sensor, sensor.frame_id).to_dict(),
                    "box_world": box.to_dict(),
                })
                counts["labels"] += 1
                counts["by_class"][box.class_label.value] += 1
            _write(sensor_dir / f"depth_{tick:05d}.bin", depth.to_bytes())
            _write(sensor_dir / f"labels_{tick:05d}.json", {"tick": tick, "time": snapshot.time, "labels": labels})
            poses[sensor.frame_id].append({"tick": tick, **cam_pose.to_dict()})

    for agent, sensor in sensors:
        _write(out_dir / agent.agent_id / sensor.sensor_id / "poses.json", poses[sensor.frame_id])
    _write(out_dir / "summary.json", summary)
    total = sum(s["labels"] for s in summary["sensors"].values())
    logger.info(f"Exported {total} labels from {len(sensors)} sensor(s) over {cfg.n_ticks} ticks to {out_dir}")
    return summary
