"""Scenario configuration: schema, defaults, validation and hashing.

A scenario is one YAML file. Every section is optional except ``scenario_id``,
``seed``, ``tags``, ``layout`` and ``trajectory``; omitted keys take the
defaults of the dataclasses below. See ``README.md`` for the full schema.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any

import yaml

ROAD_SCENES = (
    "multi_lane_road",
    "single_lane_road",
    "curved_road",
    "open_road",
    "t_intersection",
    "intersection",
)

LIGHTING_CONDITIONS = (
    "no_streetlight",
    "vehicle_low_beam",
    "bilateral_streetlight_vehicle_low_beam",
    "unilateral_streetlight_vehicle_low_beam",
    "bilateral_streetlight",
    "vehicle_high_beam",
    "bilateral_streetlight_vehicle_high_beam",
    "unilateral_streetlight_vehicle_high_beam",
    "unilateral_streetlight",
    "vehicle_backlight",
    "bilateral_streetlight_vehicle_backlight",
    "unilateral_streetlight_vehicle_backlight",
)


class ConfigError(ValueError):
    """Raised when a scenario file does not parse or validate."""


@dataclass(frozen=True)
class Road:
    points: tuple[tuple[float, float], ...]
    width: float = 4.0
    curb_height: float = 0.15


@dataclass(frozen=True)
class Pole:
    x: float
    y: float
    radius: float = 0.15
    height: float = 4.0


@dataclass(frozen=True)
class Box:
    """An axis-aligned-in-yaw box resting on the ground (parked vehicle, building)."""

    center: tuple[float, float]
    size: tuple[float, float, float]
    yaw: float = 0.0
    z: float = 0.0


@dataclass(frozen=True)
class Layout:
    roads: tuple[Road, ...] = ()
    poles: tuple[Pole, ...] = ()
    boxes: tuple[Box, ...] = ()
    ground_margin: float = 4.0
    # margin above the 50 points/m^2 floor so random sampling stays above it
    ground_density: float = 60.0
    surface_density: float = 150.0
    # isotropic map error (m) added to every non-ground point
    surface_noise: float = 0.01

    @property
    def is_empty(self) -> bool:
        return not (self.roads or self.poles or self.boxes)


@dataclass(frozen=True)
class Tags:
    road_scene: str
    lighting: str


@dataclass(frozen=True)
class TrajectorySpec:
    waypoints: tuple[tuple[float, float], ...]
    speed: float = 4.0
    z: float = 1.8
    spacing: float = 0.25
    accel_ramp: float = 1.0


@dataclass(frozen=True)
class Rates:
    lidar: int = 20
    day_camera: int = 10
    night_camera: int = 6


@dataclass(frozen=True)
class LidarSpec:
    max_range: float = 200.0
    fov_min_deg: float = -25.0
    fov_max_deg: float = 15.0
    range_sigma: float = 0.01
    max_points: int = 1500


@dataclass(frozen=True)
class NoiseSpec:
    accel_sigma: float = 0.02
    steer_sigma: float = 0.0005
    night_noise_scale: float = 1.2
    day_friction: float = 1.0
    night_friction: float = 0.98


@dataclass(frozen=True)
class VehicleSpec:
    wheelbase: float = 2.7
    max_steer: float = 0.55
    max_steer_rate: float = 0.8
    max_accel: float = 2.0
    max_decel: float = 3.0
    steer_lag: float = 0.05
    accel_lag: float = 0.05


@dataclass(frozen=True)
class ControllerSpec:
    kp: float = 1.5
    ki: float = 0.05
    kd: float = 0.05
    integral_limit: float = 2.0
    lookahead_gain: float = 1.5
    lookahead_min: float = 2.0
    lookahead_max: float = 8.0
    off_track_limit: float = 5.0


@dataclass(frozen=True)
class GridSpec:
    cell_size: float = 1.0
    origin: tuple[float, float, float] = (0.5, 0.5, -0.5)


@dataclass(frozen=True)
class MatchingSpec:
    delta: float = 0.05
    diag_delta: float = 0.30
    decimeter: float = 0.10
    angular_warn_deg: float = 1.0
    unique: bool = False


@dataclass(frozen=True)
class AnomalySpec:
    day_rate: float = 0.0
    night_rate: float = 0.0


@dataclass(frozen=True)
class ScenarioConfig:
    scenario_id: str
    seed: int
    tags: Tags
    layout: Layout
    trajectory: TrajectorySpec
    rates: Rates = field(default_factory=Rates)
    lidar: LidarSpec = field(default_factory=LidarSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    vehicle: VehicleSpec = field(default_factory=VehicleSpec)
    controller: ControllerSpec = field(default_factory=ControllerSpec)
    grid: GridSpec = field(default_factory=GridSpec)
    matching: MatchingSpec = field(default_factory=MatchingSpec)
    anomalies: AnomalySpec = field(default_factory=AnomalySpec)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_overrides(self, seed=None, delta=None, unique=None) -> ScenarioConfig:
        cfg = self
        if seed is not None:
            if int(seed) < 0:
                raise ConfigError("seed must be >= 0")
            cfg = replace(cfg, seed=int(seed))
        m = cfg.matching
        if delta is not None:
            m = replace(m, delta=float(delta))
        if unique is not None:
            m = replace(m, unique=bool(unique))
        cfg = replace(cfg, matching=m)
        validate(cfg)
        return cfg


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


def _build(cls, data: Any, where: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        kwargs[name] = _tuplify(value)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def from_dict(data: dict) -> ScenarioConfig:
    if not isinstance(data, dict):
        raise ConfigError("scenario file must contain a mapping")
    for key in ("scenario_id", "seed", "tags", "layout", "trajectory"):
        if key not in data:
            raise ConfigError(f"missing required key '{key}'")
    layout_raw = dict(data["layout"] or {})
    roads = tuple(_build(Road, r, "layout.roads") for r in layout_raw.pop("roads", []) or [])
    poles = tuple(_build(Pole, p, "layout.poles") for p in layout_raw.pop("poles", []) or [])
    boxes = tuple(_build(Box, b, "layout.boxes") for b in layout_raw.pop("boxes", []) or [])
    layout = _build(Layout, layout_raw, "layout")
    layout = replace(layout, roads=roads, poles=poles, boxes=boxes)

    sections = {
        "rates": Rates,
        "lidar": LidarSpec,
        "noise": NoiseSpec,
        "vehicle": VehicleSpec,
        "controller": ControllerSpec,
        "grid": GridSpec,
        "matching": MatchingSpec,
        "anomalies": AnomalySpec,
    }
    unknown = set(data) - set(sections) - {"scenario_id", "seed", "tags", "layout", "trajectory"}
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    seed = data["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    if seed < 0:
        raise ConfigError("seed must be >= 0")
    cfg = ScenarioConfig(
        scenario_id=str(data["scenario_id"]),
        seed=seed,
        tags=_build(Tags, data["tags"], "tags"),
        layout=layout,
        trajectory=_build(TrajectorySpec, data["trajectory"], "trajectory"),
        **{k: _build(cls, data.get(k), k) for k, cls in sections.items()},
    )
    validate(cfg)
    return cfg


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(data)


def _require(cond: bool, msg: str):
    if not cond:
        raise ConfigError(msg)


def _finite_numbers(obj, where: str):
    if is_dataclass(obj):
        for f in fields(obj):
            _finite_numbers(getattr(obj, f.name), f"{where}.{f.name}")
    elif isinstance(obj, (tuple, list)):
        for i, v in enumerate(obj):
            _finite_numbers(v, f"{where}[{i}]")
    elif isinstance(obj, bool) or isinstance(obj, str):
        return
    elif isinstance(obj, (int, float)):
        _require(math.isfinite(obj), f"{where} must be finite")
    else:
        raise ConfigError(f"{where}: unexpected value {obj!r}")


def validate(cfg: ScenarioConfig) -> None:
    _finite_numbers(cfg, "config")
    _require(cfg.tags.road_scene in ROAD_SCENES, f"tags.road_scene must be one of {ROAD_SCENES}")
    _require(
        cfg.tags.lighting in LIGHTING_CONDITIONS,
        f"tags.lighting must be one of {LIGHTING_CONDITIONS}",
    )
    _require(not cfg.layout.is_empty, "layout is empty")
    for r in cfg.layout.roads:
        _require(len(r.points) >= 2, "road needs at least 2 points")
        _require(all(len(p) == 2 for p in r.points), "road points are [x, y]")
        _require(r.width > 0, "road width must be positive")
    for p in cfg.layout.poles:
        _require(p.radius > 0 and p.height > 0, "pole radius/height must be positive")
    for b in cfg.layout.boxes:
        _require(len(b.center) == 2 and len(b.size) == 3, "box center is [x, y], size is [l, w, h]")
        _require(all(s > 0 for s in b.size), "box sizes must be positive")
    _require(cfg.layout.ground_density >= 50.0, "layout.ground_density must be >= 50 points/m^2")
    _require(cfg.layout.surface_density > 0, "layout.surface_density must be positive")
    _require(cfg.layout.surface_noise >= 0, "layout.surface_noise must be >= 0")

    t = cfg.trajectory
    _require(len(t.waypoints) >= 1, "trajectory needs at least one waypoint")
    _require(all(len(w) == 2 for w in t.waypoints), "trajectory waypoints are [x, y]")
    _require(t.speed > 0, "trajectory.speed must be positive")
    _require(0 < t.spacing <= 1.0, "trajectory.spacing must be in (0, 1] m")
    _require(t.accel_ramp > 0, "trajectory.accel_ramp must be positive")

    for name in ("lidar", "day_camera", "night_camera"):
        rate = getattr(cfg.rates, name)
        _require(
            isinstance(rate, int) and not isinstance(rate, bool) and rate > 0,
            f"rates.{name} must be a positive integer (Hz)",
        )
    li = cfg.lidar
    _require(li.max_range > 0, "lidar.max_range must be positive")
    _require(li.fov_min_deg < li.fov_max_deg, "lidar FOV bounds out of order")
    _require(li.range_sigma >= 0, "lidar.range_sigma must be >= 0")
    _require(li.max_points >= 1, "lidar.max_points must be >= 1")

    n = cfg.noise
    _require(n.accel_sigma >= 0 and n.steer_sigma >= 0, "noise sigmas must be >= 0")
    _require(
        n.night_noise_scale > 0 and n.day_friction > 0 and n.night_friction > 0,
        "noise multipliers must be positive",
    )
    v = cfg.vehicle
    _require(v.wheelbase > 0 and v.max_steer > 0 and v.max_steer_rate > 0, "vehicle limits must be positive")
    _require(v.max_accel > 0 and v.max_decel > 0, "vehicle accel limits must be positive")
    _require(v.steer_lag >= 0 and v.accel_lag >= 0, "vehicle lags must be >= 0")
    c = cfg.controller
    _require(0 < c.lookahead_min <= c.lookahead_max, "lookahead bounds out of order")
    _require(c.off_track_limit > 0, "controller.off_track_limit must be positive")
    _require(cfg.grid.cell_size > 0, "grid.cell_size must be positive")
    _require(len(cfg.grid.origin) == 3, "grid.origin is [x, y, z]")
    m = cfg.matching
    _require(m.delta > 0 and m.diag_delta > 0 and m.decimeter > 0, "matching thresholds must be positive")
    for name in ("day_rate", "night_rate"):
        r = getattr(cfg.anomalies, name)
        _require(0 <= r <= 1, f"anomalies.{name} must be in [0, 1]")
