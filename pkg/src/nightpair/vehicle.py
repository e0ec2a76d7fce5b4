"""Vehicle simulation: kinematic bicycle, LiDAR sampling and the sensor clock.

The vehicle pose is the pose of the LiDAR origin, which sits above the rear
axle; the bicycle model therefore integrates that point directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np

from .config import LidarSpec, NoiseSpec, Rates, VehicleSpec
from .field import PointCloud
from .geometry import Pose6D, pose_to_htm, wrap_angle

DAY, NIGHT = "day", "night"



@dataclass(frozen=True)
class ControlCommand:
    acceleration: float = 0.0
    steering: float = 0.0


@dataclass(frozen=True)
class VehicleState:
    pose: Pose6D
    speed: float = 0.0
    steering: float = 0.0
    timestamp: Fraction = Fraction(0)
    acceleration: float = 0.0

    def __post_init__(self):
        if self.speed < 0:
            raise ValueError("speed must be >= 0")


@dataclass(frozen=True)
class RunCondition:
    mode: str
    noise_scale: float = 1.0
    friction: float = 1.0
    camera_rate: int = 10

    def __post_init__(self):
        if self.mode not in (DAY, NIGHT):
            raise ValueError(f"mode must be 'day' or 'night', got {self.mode!r}")
        if not (self.noise_scale > 0 and self.friction > 0 and self.camera_rate > 0):
            raise ValueError("run condition multipliers and camera rate must be positive")

    @classmethod
    def for_mode(cls, mode: str, noise: NoiseSpec = NoiseSpec(), rates: Rates = Rates()) -> RunCondition:
        if mode == DAY:
            return cls(DAY, 1.0, noise.day_friction, rates.day_camera)
        if mode == NIGHT:
            return cls(NIGHT, noise.night_noise_scale, noise.night_friction, rates.night_camera)
        raise ValueError(f"mode must be 'day' or 'night', got {mode!r}")


@dataclass(frozen=True)
class LidarScan:
    points: np.ndarray  # (N, 4) sensor frame, may be empty
    timestamp: Fraction
    frame_index: int

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class SensorClock:
    """Shared-start clock for the LiDAR and both cameras. Timestamps are exact
    ``Fraction`` values: tick ``k`` of a stream at rate ``r`` is ``start + k / r``."""

    lidar_rate: int = 20
    day_camera_rate: int = 10
    night_camera_rate: int = 6
    start: Fraction = Fraction(0)

    def __post_init__(self):
        for r in (self.lidar_rate, self.day_camera_rate, self.night_camera_rate):
            if not Fraction(r) > 0:
                raise ValueError("sensor rates must be positive")

    @classmethod
    def from_rates(cls, rates: Rates) -> SensorClock:
        return cls(rates.lidar, rates.day_camera, rates.night_camera)

    def rate(self, stream: str) -> Fraction:
        rates = {
            "lidar": self.lidar_rate,
            DAY: self.day_camera_rate,
            NIGHT: self.night_camera_rate,
        }
        if stream not in rates:
            raise ValueError(f"unknown stream {stream!r}")
        return Fraction(rates[stream])

    def tick(self, stream: str, k: int) -> Fraction:
        return Fraction(self.start) + Fraction(k) / self.rate(stream)

    def ticks(self, stream: str, duration) -> list[tuple[int, Fraction]]:
        """Ticks in ``[start, start + duration)``."""
        duration = Fraction(duration)
        if duration <= 0:
            raise ValueError("duration must be positive")
        count = math.ceil(duration * self.rate(stream))
        return [(k, self.tick(stream, k)) for k in range(count)]


def camera_trigger_times(clock: SensorClock, mode: str, duration) -> list[tuple[int, Fraction]]:
    return clock.ticks(mode, duration)


def _lag(current: float, target: float, dt: float, tau: float) -> float:
    if tau <= 0:
        return target
    return current + (target - current) * (1.0 - math.exp(-dt / tau))


def step_kinematics(
    state: VehicleState,
    cmd: ControlCommand,
    dt,
    cond: RunCondition,
    rng: np.random.Generator | None = None,
    params: VehicleSpec = VehicleSpec(),
    noise: NoiseSpec = NoiseSpec(),
) -> VehicleState:
    """Advance the bicycle model by ``dt``.

    Commands pass through first-order lags; when ``rng`` is given, Gaussian
    actuation noise scaled by ``cond.noise_scale`` is added to both commands.
    The pose is integrated exactly along the constant-curvature arc of the step.
    """
    dt_f = float(dt)
    if not dt_f > 0:
        raise ValueError("dt must be positive")
    a_cmd, d_cmd = cmd.acceleration, cmd.steering
    if rng is not None:
        a_cmd += rng.normal(0.0, noise.accel_sigma * cond.noise_scale)
        d_cmd += rng.normal(0.0, noise.steer_sigma * cond.noise_scale)
    d_cmd = min(max(d_cmd, -params.max_steer), params.max_steer)

    accel = _lag(state.acceleration, a_cmd, dt_f, params.accel_lag)
    steer = _lag(state.steering, d_cmd, dt_f, params.steer_lag)
    v0 = state.speed
    v1 = max(0.0, v0 + cond.friction * accel * dt_f)
    s = 0.5 * (v0 + v1) * dt_f

    p = state.pose
    dyaw = s * math.tan(steer) / params.wheelbase
    if dyaw == 0.0:
        x = p.x + s * math.cos(p.yaw)
        y = p.y + s * math.sin(p.yaw)
    else:
        radius = s / dyaw
        x = p.x + radius * (math.sin(p.yaw + dyaw) - math.sin(p.yaw))
        y = p.y - radius * (math.cos(p.yaw + dyaw) - math.cos(p.yaw))
    pose = Pose6D(x, y, p.z, p.roll, wrap_angle(p.yaw + dyaw), p.pitch)
    return replace(
        state,
        pose=pose,
        speed=v1,
        steering=steer,
        acceleration=accel,
        timestamp=state.timestamp + Fraction(dt),
    )


def heading_rate(state: VehicleState, wheelbase: float) -> float:
    return state.speed * math.tan(state.steering) / wheelbase


def simulate_scan(
    true_pose: Pose6D,
    field: PointCloud,
    cfg: LidarSpec = LidarSpec(),
    rng: np.random.Generator | None = None,
    timestamp=Fraction(0),
    frame_index: int = 0,
) -> LidarScan:
    """Sample the field as seen from ``true_pose``, in the sensor frame.

    Keeps points within ``max_range`` and the vertical FOV, draws at most
    ``max_points`` of them with probability weights falling off as
    ``range**-2`` (a spinning sensor's return density on a surface), and
    perturbs each range by N(0, range_sigma).
    Without ``rng`` the subsample is a fixed stride and no noise is added.
    """
    if len(field) == 0:
        raise ValueError("field is empty")
    h = pose_to_htm(true_pose)
    rot, origin = h[:3, :3], h[:3, 3]
    # bulk filtering runs in float32 (sub-0.1 mm at field scale); the kept
    # points are recomputed in float64 below
    x, y, z = (field.columns32[i] - np.float32(origin[i]) for i in range(3))
    r2 = x * x + y * y + z * z
    # sensor-frame height; the range is rotation invariant, so only one
    # rotated coordinate is needed for the FOV test
    up = np.float32(rot[0, 2]) * x + np.float32(rot[1, 2]) * y + np.float32(rot[2, 2]) * z
    rxy = np.sqrt(np.maximum(r2 - up * up, np.float32(0)))
    keep = (r2 <= np.float32(cfg.max_range**2)) & (r2 > 0)
    keep &= up >= np.float32(math.tan(math.radians(cfg.fov_min_deg))) * rxy
    keep &= up <= np.float32(math.tan(math.radians(cfg.fov_max_deg))) * rxy
    n_keep = int(np.count_nonzero(keep))
    if n_keep > cfg.max_points:
        if rng is None:
            # deterministic: every point at the same weighted stride
            idx = np.flatnonzero(keep)
            cum = np.cumsum(1.0 / r2[idx].astype(float))
            marks = (np.arange(cfg.max_points) + 0.5) * (cum[-1] / cfg.max_points)
            idx = idx[np.unique(np.searchsorted(cum, marks))]
        else:
            # weighted sampling without replacement (Efraimidis-Spirakis keys
            # log(u) / w with w = range**-2); one key per field point
            u = np.float32(1) - rng.random(len(r2), dtype=np.float32)
            keys = np.log(u) * r2
            keys[~keep] = -np.inf
            idx = np.sort(np.argpartition(keys, len(keys) - cfg.max_points)[-cfg.max_points :])
    else:
        idx = np.flatnonzero(keep)
    if len(idx):
        offsets = field.xyz[idx] - origin
        pts = offsets @ rot
        if rng is not None and cfg.range_sigma > 0:
            r = np.linalg.norm(offsets, axis=1)
            pts = pts * (1.0 + rng.normal(0.0, cfg.range_sigma, len(idx)) / r)[:, None]
        out = np.column_stack([pts, field.intensity[idx]])
    else:
        out = np.empty((0, 4))
    return LidarScan(out, Fraction(timestamp), frame_index)
