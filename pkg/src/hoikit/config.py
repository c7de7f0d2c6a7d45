"""Pipeline configuration: one JSON object, unknown keys rejected."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, Optional

from .contact import CONTACT_THRESHOLD
from .curation import FLOAT_GROUND_HEIGHT, FLOAT_HUMAN_DISTANCE, N_PER_SUBSET, PENETRATION_THRESHOLD
from .registration import DEFAULT_MIN_IMPROVEMENT, DEFAULT_ROUNDS
from .render import DEFAULT_FOV_DEG, DEFAULT_N_BANDS, DEFAULT_N_VIEWS, DEFAULT_RESOLUTION
from .segmentation import DEFAULT_TAU


class ConfigError(ValueError):
    """Invalid configuration or command-line usage (exit code 2)."""


@dataclass
class PipelineConfig:
    # paths
    mesh: Optional[str] = None
    trajectory: Optional[str] = None
    masks: Optional[str] = None
    body: Optional[str] = None
    human_mesh: Optional[str] = None
    object_mesh: Optional[str] = None
    body_mesh: Optional[str] = None
    part_labels: Optional[str] = None
    alignment: Optional[str] = None
    poses: Optional[str] = None
    spec: Optional[str] = None
    manifest: Optional[str] = None
    rules: Optional[str] = None
    candidates: Optional[str] = None
    front_mask: Optional[str] = None
    output_dir: Optional[str] = None
    # segmentation
    delta: Optional[float] = None  # meters; None = 0.5% of the bbox diagonal
    tau: float = DEFAULT_TAU
    dump_depth: bool = False
    # trajectory
    n_views: int = DEFAULT_N_VIEWS
    n_bands: int = DEFAULT_N_BANDS
    width: int = DEFAULT_RESOLUTION
    height: int = DEFAULT_RESOLUTION
    fov_deg: float = DEFAULT_FOV_DEG
    center: Optional[list] = None
    radius: Optional[float] = None
    # registration
    front_azimuth: float = 0.0
    rounds: int = DEFAULT_ROUNDS
    min_improvement: float = DEFAULT_MIN_IMPROVEMENT
    # contact / curation
    contact_threshold: float = CONTACT_THRESHOLD
    penetration_threshold: float = PENETRATION_THRESHOLD
    float_human_distance: float = FLOAT_HUMAN_DISTANCE
    float_ground_height: float = FLOAT_GROUND_HEIGHT
    up_axis: int = 1
    n_per_subset: int = N_PER_SUBSET
    seed: Optional[int] = None
    threads: int = 1

    def validate(self) -> "PipelineConfig":
        def need(cond: bool, msg: str):
            if not cond:
                raise ConfigError(msg)

        need(0 < self.tau < 1, f"tau must be in (0, 1), got {self.tau}")
        need(self.delta is None or self.delta > 0, f"delta must be > 0, got {self.delta}")
        need(self.contact_threshold > 0, "contact_threshold must be > 0")
        need(0 <= self.penetration_threshold <= 1, "penetration_threshold must be in [0, 1]")
        need(self.float_human_distance >= 0 and self.float_ground_height >= 0,
             "floating-object distances must be >= 0")
        need(self.n_bands >= 1 and self.n_views >= 1, "n_views and n_bands must be >= 1")
        need(self.width >= 1 and self.height >= 1, "width and height must be >= 1")
        need(0 < self.fov_deg < 180, "fov_deg must be in (0, 180)")
        need(self.radius is None or self.radius > 0, "radius must be > 0")
        need(self.center is None or (isinstance(self.center, list) and len(self.center) == 3),
             "center must be a list of 3 numbers")
        need(self.rounds >= 1, "rounds must be >= 1")
        need(self.min_improvement >= 0, "min_improvement must be >= 0")
        need(self.up_axis in (0, 1, 2), "up_axis must be 0, 1 or 2")
        need(self.n_per_subset >= 0, "n_per_subset must be >= 0")
        need(self.threads >= 1, "threads must be >= 1")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


FIELD_NAMES = tuple(f.name for f in fields(PipelineConfig))

_FLOATS = {"delta", "tau", "fov_deg", "radius", "front_azimuth", "min_improvement", "contact_threshold",
           "penetration_threshold", "float_human_distance", "float_ground_height"}
_INTS = {"n_views", "n_bands", "width", "height", "rounds", "up_axis", "n_per_subset", "seed", "threads"}
_BOOLS = {"dump_depth"}


def _coerce(name: str, value):
    if value is None:
        return None
    if name in _BOOLS:
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be true or false")
        return value
    if name in _INTS:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer, got {value!r}")
        return value
    if name in _FLOATS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number, got {value!r}")
        return float(value)
    if name == "center":
        if not isinstance(value, list) or len(value) != 3 or not all(
                isinstance(x, (int, float)) and not isinstance(x, bool) for x in value):
            raise ConfigError("center must be a list of 3 numbers")
        return [float(x) for x in value]
    if not isinstance(value, str):
        raise ConfigError(f"{name} must be a path string, got {value!r}")
    return value


def config_from_dict(d: Dict[str, Any]) -> PipelineConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(d) - set(FIELD_NAMES))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return PipelineConfig(**{k: _coerce(k, v) for k, v in d.items()})


def read_config_dict(path) -> Dict[str, Any]:
    """Raw key/value pairs of a config file, type-checked but without defaults."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    config_from_dict(raw)
    return {k: _coerce(k, v) for k, v in raw.items()}


def load_config(path) -> PipelineConfig:
    return config_from_dict(read_config_dict(path))
