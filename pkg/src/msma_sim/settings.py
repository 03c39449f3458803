"""Simulator settings file (config.yaml)."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .association import AssociationConfig
from .errors import ConfigError, ParseError
from .evaluation import EvalConfig
from .fusion import FusionConfig
from .network import NetworkConfig
from .rng import GENERATORS
from .sensing import DetectionModel
from .tracking import TrackerConfig
from .visibility import VisibilityConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RngConfig:
    generator: str = "philox"

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ConfigError(f"rng.generator must be one of {sorted(GENERATORS)}")


SECTIONS = {
    "visibility": VisibilityConfig,
    "detection": DetectionModel,
    "tracker": TrackerConfig,
    "association": AssociationConfig,
    "fusion": FusionConfig,
    "network": NetworkConfig,
    "evaluation": EvalConfig,
    "rng": RngConfig,
}


@dataclass(frozen=True)
class Settings:
    visibility: VisibilityConfig = field(default_factory=VisibilityConfig)
    detection: DetectionModel = field(default_factory=DetectionModel)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    association: AssociationConfig = field(default_factory=AssociationConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    rng: RngConfig = field(default_factory=RngConfig)

    @classmethod
    def from_dict(cls, raw):
        raw = raw or {}
        if not isinstance(raw, dict):
            raise ParseError("settings document must be a mapping")
        unknown = set(raw) - set(SECTIONS)
        if unknown:
            raise ParseError(f"unknown settings section '{sorted(unknown)[0]}'")
        built = {}
        for name, section_cls in SECTIONS.items():
            section = raw.get(name)
            if section is None:
                logger.info(f"No '{name}' section in settings, using defaults")
                built[name] = section_cls()
                continue
            if not isinstance(section, dict):
                raise ParseError("expected a mapping", field=name)
            allowed = {f.name for f in fields(section_cls)}
            for key in section:
                if key not in allowed:
                    raise ParseError(f"unknown key '{key}'", field=f"{name}.{key}")
            try:
                if section_cls is DetectionModel:
                    # partial miss-rate maps merge into the defaults
                    built[name] = DetectionModel().with_overrides(section)
                else:
                    built[name] = section_cls(**section)
            except (TypeError, ValueError) as e:
                raise ParseError(f"invalid value: {e}", field=name)
        return cls(**built)

    def to_dict(self):
        return {
            "visibility": {f.name: getattr(self.visibility, f.name) for f in fields(self.visibility)},
            "detection": self.detection.to_dict(),
            "tracker": {f.name: getattr(self.tracker, f.name) for f in fields(self.tracker)},
            "association": {"gate": self.association.gate_value,
                            "position_dims": list(self.association.position_dims)},
            "fusion": {f.name: getattr(self.fusion, f.name) for f in fields(self.fusion)},
            "network": {"crosstalk": {k.cli_name: v for k, v in self.network.crosstalk.items()},
                        "latency_ticks": self.network.latency_ticks},
            "evaluation": self.evaluation.to_dict(),
            "rng": {"generator": self.rng.generator},
        }


def load_settings(path=None) -> Settings:
    """Read settings from YAML; a missing path gives the defaults."""
    if path is None:
        return Settings()
    path = Path(path)
    try:
        with open(path, "r") as f:
            raw = yaml.safe_load(f)
    except FileNotFoundError:
        raise ConfigError(f"settings file not found: {path}")
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ParseError(f"malformed settings file {path}: {e}", line=mark.line + 1 if mark else None)
    return Settings.from_dict(raw)
