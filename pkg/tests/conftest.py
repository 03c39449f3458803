"""Pytest configuration and fixtures."""
import copy
import sys
from pathlib import Path

import pytest

# Add src directory to path so tests can import the package
src_path = Path(__file__).parent.parent / "src"
sys.path.insert(0, str(src_path))

from msma_sim.geometry import CameraCalibration  # noqa: E402
from msma_sim.scenario import scenario_from_dict  # noqa: E402

SCENARIO_DIR = Path(__file__).parent.parent / "scenarios"

SMALL_CAMERA = {"fx": 80.0, "fy": 80.0, "cx": 80.0, "cy": 60.0, "width": 160, "height": 120}

BASE_DOC = {
    "name": "small",
    "duration": 3.0,
    "tick_rate": 10.0,
    "seed": 7,
    "objects": [
        {"object_id": 1, "class_label": "car", "position": [20.0, 0.0], "heading": 0.0, "speed": 0.0,
         "dimensions": [4.5, 1.9, 1.5]},
        {"object_id": 2, "class_label": "pedestrian", "position": [30.0, -3.0], "heading": 1.5707963, "speed": 0.0,
         "dimensions": [0.6, 0.6, 1.8]},
    ],
    "agents": [
        {
            "agent_id": "ego",
            "kind": "ego_vehicle",
            "trajectory": {"position": [0.0, 0.0], "heading": 0.0, "speed": 0.0},
            "sensors": [{"sensor_id": "front", "camera": SMALL_CAMERA, "mount": {"position": [1.5, 0.0, 1.6]}}],
        },
        {
            "agent_id": "pole",
            "kind": "infrastructure",
            "mount": {"position": [25.0, 12.0, 6.0], "yaw": -1.5707963, "pitch": 0.3},
            "sensors": [{"sensor_id": "cam", "camera": SMALL_CAMERA}],
        },
    ],
}


@pytest.fixture
def scenario_doc():
    """A fresh copy of a small two-object, ego + one pole scenario document."""
    return copy.deepcopy(BASE_DOC)


@pytest.fixture
def small_scenario(scenario_doc):
    return scenario_from_dict(scenario_doc)


@pytest.fixture
def ego_only_scenario(scenario_doc):
    scenario_doc["agents"] = scenario_doc["agents"][:1]
    return scenario_from_dict(scenario_doc)


@pytest.fixture
def camera():
    """800x600 pinhole camera with fx = fy = 500."""
    return CameraCalibration.from_params(500.0, 500.0, 400.0, 300.0, 800, 600, "cam")


@pytest.fixture
def small_camera():
    return CameraCalibration.from_params(50.0, 50.0, 40.0, 30.0, 80, 60, "cam")


@pytest.fixture
def scenario_dir():
    return SCENARIO_DIR
