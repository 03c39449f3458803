"""MSMA-Sim - multi-sensor multi-agent tracking and fusion simulator."""

from .fusion import EgoModel, covariance_intersection
from .harness import RunSpec, export_labels, run, run_matrix
from .main import main
from .network import TopologyKind
from .scenario import load_scenario
from .settings import Settings, load_settings

__all__ = ['EgoModel', 'covariance_intersection', 'RunSpec', 'export_labels', 'run', 'run_matrix', 'main',
           'TopologyKind', 'load_scenario', 'Settings', 'load_settings']
