"""Configuration dataclasses and their YAML/JSON loaders.

Every document maps onto a tree of dataclasses.  Unknown or malformed keys
raise :class:`ConfigError` naming the dotted key path.  All numeric defaults
here are simulator calibration knobs, not measured values.
"""
from __future__ import annotations

import dataclasses
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .camera import CameraModel
from .errors import ConfigError


@dataclass
class DynamicsConfig:
    # per axis: surge, sway, heave, yaw
    tau: tuple = (0.6, 0.6, 0.6, 0.6)
    max_speed: tuple = (0.4, 0.3, 0.25, 0.6)
    quad_drag: tuple = (0.5, 0.5, 0.5, 0.2)
    gripper_rate: float = 2.0  # aperture units per second
    slip_rate: float = 0.5  # lambda, 1/s
    slip_accel_gain: float = 0.3  # kappa, s^2/m
    min_altitude: float = 0.03
    wall_margin: float = 0.15

    def with_lag(self, tau: float) -> "DynamicsConfig":
        return dataclasses.replace(self, tau=(tau,) * 4)


@dataclass
class GripperConfig:
    anchor: tuple = (0.25, 0.0, 0.04)  # body frame, metres; calibrated from closure-time rollouts
    workspace: tuple = (0.12, 0.10, 0.08)  # full box size, metres


@dataclass
class CameraMountConfig:
    offset: tuple = (0.0, 0.0, 0.0)  # body frame, metres
    fx: float = 260.0
    fy: float = 260.0
    cx: float = 111.5
    cy: float = 79.5
    width: int = 224
    height: int = 160
    dist: tuple = (0.0, 0.0, 0.0, 0.0, 0.0)

    @property
    def model(self) -> CameraModel:
        return CameraModel(self.fx, self.fy, self.cx, self.cy, self.width, self.height, tuple(self.dist))


def _top_camera():
    return CameraMountConfig(offset=(0.0, 0.0, 0.10), fx=140.0, fy=140.0)


@dataclass
class ResetConfig:
    rov_x: tuple = (0.5, 0.7)
    rov_y: tuple = (0.7, 1.3)
    rov_z: tuple = (0.45, 0.6)
    rov_yaw_deg: tuple = (-15.0, 15.0)
    object_range: tuple = (1.5, 2.4)  # horizontal distance ahead of the ROV
    object_bearing_deg: tuple = (-16.0, 16.0)
    min_separation: float = 0.35
    visible_margin_px: float = 16.0
    min_visible_px: int = 20
    max_attempts: int = 100


@dataclass
class ObjectSpec:
    shape: str = "rock"
    graspability: float = 1.0
    scale: float = 1.0


@dataclass
class ScenarioConfig:
    name: str = "default"
    pool_extent: tuple = (4.0, 2.0, 1.0)  # length, width, depth
    n_objects: int = 1
    shape_set: tuple = ("rock", "seagrass", "duck")
    graspability: tuple = (1.0, 1.0)
    scale: tuple = (0.9, 1.1)
    objects: tuple = ()  # explicit ObjectSpec list; overrides shape_set sampling
    pitch_deg: float = 10.0
    depth_noise: float = 0.0
    far_plane: float = 10.0
    render_floor: bool = False
    # reuse one layout (seeded by ``seed`` below) for every episode instead of re-scattering
    persist_layout: bool = False
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)
    gripper: GripperConfig = field(default_factory=GripperConfig)
    forward_camera: CameraMountConfig = field(default_factory=CameraMountConfig)
    top_camera: CameraMountConfig = field(default_factory=_top_camera)
    reset: ResetConfig = field(default_factory=ResetConfig)
    seed: int = 0


@dataclass
class AxisGains:
    kp: float = 0.0
    kd: float = 0.0
    deadband: float = 5.0
    clip: float = 1.0
    alpha: float = 0.5  # derivative low-pass


@dataclass
class ControllerConfig:
    mode: str = "center_bias"  # or "affordance"
    yaw: AxisGains = field(default_factory=lambda: AxisGains(kp=0.006, kd=0.003, deadband=5.0))
    forward: AxisGains = field(default_factory=lambda: AxisGains(kp=0.01, kd=0.004, deadband=5.0))
    depth: AxisGains = field(default_factory=lambda: AxisGains(kp=0.012, kd=0.004, deadband=0.0))
    yaw_align_threshold: float = 5.0
    lower_line_frac: float = 0.75
    band_frac: tuple = (0.20, 0.35)
    margin_px: float = 12.0
    close_range_depth: float = 0.5
    grasp_depth: float = 0.25
    creep_command: float = 0.45
    close_duration: float = 1.0
    drag_command: float = -0.3
    drag_duration: float = 3.0
    stage_timeout: float = 20.0
    coast_time: float = 0.5
    perception_period: float = 0.1
    regrasp_enabled: bool = True
    backup_enabled: bool = True
    max_regrasps: int = 3
    max_backups: int = 4
    back_duration: float = 1.5
    back_command: float = -0.5
    retreat_duration: float = 3.0
    retreat_command: float = -0.6
    lateral_offset: tuple = (0.05, 0.15)  # metres, sign drawn at random
    lateral_command: float = 0.6
    lateral_speed: float = 0.18  # nominal sway speed at lateral_command, m/s
    heatmap_sigma: float = 3.0


@dataclass
class CampaignSpec:
    n_episodes: int = 20
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    seed_base: int = 0
    output_dir: str = ""
    save_frames: bool = False
    max_episode_time: float = 90.0
    goal: str = "none"  # none | random | off_center
    jobs: int = 0


# -- generic loading ------------------------------------------------------

def _convert(value, tp, key, path, base=None):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return from_mapping(tp, value, key, path, base=base)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected a boolean, got {value!r}", key, path)
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", key, path)
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", key, path)
        if not math.isfinite(value):
            raise ConfigError(f"expected a finite number, got {value!r}", key, path)
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", key, path)
        return value
    if tp is tuple or origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"expected a list, got {value!r}", key, path)
        return tuple(value)
    raise ConfigError(f"unsupported field type {tp}", key, path)


def from_mapping(cls, data, prefix="", path=None, base=None):
    """Instantiate dataclass ``cls`` from a mapping.

    Missing keys keep the values of ``base`` (or the class defaults), so a
    document only needs to name what it overrides.
    """
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("expected a mapping", prefix or None, path)
    if base is None:
        base = cls()
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError("unknown key", f"{prefix}.{key}" if prefix else str(key), path)
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        full = f"{prefix}.{f.name}" if prefix else f.name
        kwargs[f.name] = _convert(data[f.name], hints[f.name], full, path, getattr(base, f.name))
    obj = dataclasses.replace(base, **kwargs)
    if cls is ScenarioConfig and obj.objects:
        obj.objects = tuple(
            from_mapping(ObjectSpec, o, f"{prefix + '.' if prefix else ''}objects[{i}]", path)
            if isinstance(o, dict) else o
            for i, o in enumerate(obj.objects)
        )
    return obj


def to_mapping(obj):
    """Plain-data view of a config dataclass (tuples become lists)."""
    if dataclasses.is_dataclass(obj):
        return {f.name: to_mapping(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_mapping(v) for v in obj]
    return obj


def read_document(path):
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError("file not found", None, path) from None
    except OSError as exc:
        raise ConfigError(f"cannot read: {exc.strerror}", None, path) from None
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed document: {exc}", None, path) from None


def load_campaign_spec(path) -> CampaignSpec:
    """Campaign documents may inline ``scenario``/``controller`` or name files."""
    path = Path(path)
    data = read_document(path)
    if not isinstance(data, dict):
        raise ConfigError("campaign spec must be a mapping", None, path)
    data = dict(data)
    for key in ("scenario", "controller"):
        ref = data.get(key)
        if isinstance(ref, str):
            sub = path.parent / ref
            data[key] = read_document(sub)
    spec = from_mapping(CampaignSpec, data, "", path)
    validate_campaign(spec, path)
    return spec


def validate_campaign(spec: CampaignSpec, path=None):
    if spec.n_episodes < 1:
        raise ConfigError("must be >= 1", "n_episodes", path)
    if spec.controller.mode not in ("center_bias", "affordance"):
        raise ConfigError(f"unknown mode {spec.controller.mode!r}", "controller.mode", path)
    if spec.goal not in ("none", "random", "off_center"):
        raise ConfigError(f"unknown goal policy {spec.goal!r}", "goal", path)
    if spec.scenario.n_objects < 0:
        raise ConfigError("must be >= 0", "scenario.n_objects", path)
    lo, hi = spec.controller.band_frac
    if not 0 < lo < hi < 1:
        raise ConfigError("band must satisfy 0 < lo < hi < 1", "controller.band_frac", path)
