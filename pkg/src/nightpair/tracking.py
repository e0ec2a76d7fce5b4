"""Trajectories, pure pursuit planning, PID control and the closed tracking loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import rng as rng_streams
from .config import ControllerSpec, LidarSpec, NoiseSpec, TrajectorySpec, VehicleSpec
from .geometry import Pose6D, htm_to_pose, invert, pose_to_htm
from .localization import localize_frame
from .vehicle import (
    ControlCommand,
    RunCondition,
    SensorClock,
    VehicleState,
    camera_trigger_times,
    simulate_scan,
    step_kinematics,
)

log = logging.getLogger(__name__)

MAX_SAMPLE_GAP = 1.0
TRAJECTORY_FORMAT = "nightpair-trajectory/1"
TRAJECTORY_COLUMNS = ("timestamp", "x", "y", "z", "roll", "yaw", "pitch", "velocity")


class OffTrajectoryError(RuntimeError):
    """The vehicle is farther than the off-track limit from every sample."""


class TrackingError(RuntimeError):
    """A tracked run aborted; ``stage`` names the failing step."""

    def __init__(self, message: str, stage: str, tick: int | None = None):
        super().__init__(message)
        self.stage = stage
        self.tick = tick


# -- trajectories -------------------------------------------------------------


@dataclass(frozen=True)
class Trajectory:
    """Time-ordered ``(timestamp, pose, velocity)`` samples.

    Timestamps are kept as given (``Fraction`` for clock-driven runs, floats for
    authored paths); poses are an ``(N, 6)`` array in ``Pose6D`` order.
    """

    timestamps: tuple
    poses: np.ndarray
    velocities: np.ndarray
    max_gap: float = MAX_SAMPLE_GAP

    def __post_init__(self):
        poses = np.array(self.poses, dtype=float).reshape(-1, 6)
        vel = np.array(self.velocities, dtype=float).reshape(-1)
        ts = tuple(self.timestamps)
        if not (len(ts) == len(poses) == len(vel)) or len(ts) == 0:
            raise ValueError("trajectory needs matching, nonempty timestamps, poses and velocities")
        if not (np.all(np.isfinite(poses)) and np.all(np.isfinite(vel))):
            raise ValueError("trajectory contains non-finite values")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("trajectory timestamps must be strictly increasing")
        gaps = np.linalg.norm(np.diff(poses[:, :3], axis=0), axis=1)
        if len(gaps) and gaps.max() > self.max_gap:
            raise ValueError(f"consecutive samples {gaps.max():.3f} m apart (limit {self.max_gap} m)")
        poses.setflags(write=False)
        vel.setflags(write=False)
        object.__setattr__(self, "poses", poses)
        object.__setattr__(self, "velocities", vel)
        object.__setattr__(self, "timestamps", ts)

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def positions(self) -> np.ndarray:
        return self.poses[:, :3]

    @property
    def arc_length(self) -> np.ndarray:
        """Cumulative path length at each sample."""
        seg = np.linalg.norm(np.diff(self.positions, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(seg)])

    def pose(self, i: int) -> Pose6D:
        return Pose6D.from_array(self.poses[i])

    @classmethod
    def from_samples(cls, samples, max_gap: float = MAX_SAMPLE_GAP) -> Trajectory:
        samples = list(samples)
        return cls(
            tuple(s[0] for s in samples),
            np.array([s[1].as_array() for s in samples]).reshape(-1, 6),
            np.array([s[2] for s in samples], dtype=float),
            max_gap,
        )


def _speed_profile(s: np.ndarray, speed: float, accel: float) -> tuple[np.ndarray, np.ndarray]:
    """Velocity and time at arc positions ``s`` for a ramp from rest at ``accel``."""
    s_ramp = speed**2 / (2.0 * accel)
    in_ramp = s < s_ramp
    v = np.where(in_ramp, np.sqrt(2.0 * accel * s), speed)
    t = np.where(in_ramp, np.sqrt(2.0 * s / accel), speed / accel + (s - s_ramp) / speed)
    return v, t


def author_trajectory(spec: TrajectorySpec) -> Trajectory:
    """Desired path from a waypoint polyline, resampled by arc length.

    Samples are spaced evenly at no more than ``spec.spacing``; the speed
    ramps up from rest at ``spec.accel_ramp`` m/s^2 to ``spec.speed``.
    """
    wp = np.asarray(spec.waypoints, dtype=float).reshape(-1, 2)
    keep = np.concatenate([[True], np.any(np.diff(wp, axis=0) != 0, axis=1)])
    wp = wp[keep]
    if len(wp) == 1:
        pose = np.array([[wp[0, 0], wp[0, 1], spec.z, 0.0, 0.0, 0.0]])
        return Trajectory((0.0,), pose, np.zeros(1))

    seg = np.linalg.norm(np.diff(wp, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    n = max(1, math.ceil(cum[-1] / spec.spacing - 1e-9))
    s = cum[-1] * np.arange(n + 1) / n
    xy = np.column_stack([np.interp(s, cum, wp[:, 0]), np.interp(s, cum, wp[:, 1])])
    d = np.gradient(xy, axis=0)
    yaw = np.arctan2(d[:, 1], d[:, 0])
    v, t = _speed_profile(s, spec.speed, spec.accel_ramp)
    poses = np.column_stack([xy, np.full(len(s), spec.z), np.zeros(len(s)), yaw, np.zeros(len(s))])
    return Trajectory(tuple(float(x) for x in t), poses, v)


def _format_time(t) -> str:
    if isinstance(t, Fraction):
        return str(t)
    return repr(float(t))


def _parse_time(tok: str):
    if "/" in tok or tok.lstrip("-").isdigit():
        return Fraction(tok)
    return float(tok)


def format_trajectory(traj: Trajectory) -> str:
    """One line per sample under a two-line versioned header.

    Timestamps of clock-driven runs are written as exact fractions (``3/20``).
    """
    lines = [f"# {TRAJECTORY_FORMAT}", "# " + " ".join(TRAJECTORY_COLUMNS)]
    for t, p, v in zip(traj.timestamps, traj.poses, traj.velocities):
        lines.append(" ".join([_format_time(t), *(repr(float(x)) for x in p), repr(float(v))]))
    return "\n".join(lines) + "\n"


def save_trajectory(traj: Trajectory, path) -> None:
    Path(path).write_text(format_trajectory(traj))


def load_trajectory(path) -> Trajectory:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != f"# {TRAJECTORY_FORMAT}":
        raise ValueError(f"{path}: not a {TRAJECTORY_FORMAT} file")
    ts, poses, vel = [], [], []
    for line in lines[1:]:
        if not line.strip() or line.startswith("#"):
            continue
        tok = line.split()
        if len(tok) != len(TRAJECTORY_COLUMNS):
            raise ValueError(f"{path}: expected {len(TRAJECTORY_COLUMNS)} columns, got {len(tok)}")
        ts.append(_parse_time(tok[0]))
        poses.append([float(x) for x in tok[1:7]])
        vel.append(float(tok[7]))
    return Trajectory(tuple(ts), np.array(poses), np.array(vel), max_gap=math.inf)


# -- pure pursuit -------------------------------------------------------------


@dataclass(frozen=True)
class MotionPlan:
    """Lookahead target plus the pursuit geometry that produced it.

    ``curvature * lookahead_distance == 2 * sin(bearing)`` where
    ``lookahead_distance`` is the straight-line distance to the target.
    """

    target_pose: Pose6D
    target_velocity: float
    curvature: float = 0.0
    bearing: float = 0.0
    lookahead_distance: float = 0.0
    nearest_index: int = 0
    target_index: int = 0
    progress: float = 0.0
    finished: bool = False

    def __post_init__(self):
        if self.target_velocity < 0:
            raise ValueError("target velocity must be >= 0")


def lookahead_distance(speed: float, params: ControllerSpec = ControllerSpec()) -> float:
    return min(max(params.lookahead_gain * speed, params.lookahead_min), params.lookahead_max)


def nearest_sample(position, traj: Trajectory) -> tuple[int, float]:
    """Index of the closest sample and its distance (first index on ties)."""
    d2 = np.sum((traj.positions - np.asarray(position, dtype=float)) ** 2, axis=1)
    i = int(np.argmin(d2))
    return i, math.sqrt(d2[i])


def _progress(position: np.ndarray, traj: Trajectory, i: int, arc: np.ndarray) -> tuple[float, bool]:
    """Arc position of ``position`` projected near sample ``i``; flags passing the end."""
    pts = traj.positions
    best = (arc[i], math.inf)
    for j in (i - 1, i):
        if j < 0 or j + 1 >= len(pts):
            continue
        seg = pts[j + 1] - pts[j]
        ln2 = float(seg @ seg)
        u = float((position - pts[j]) @ seg) / ln2
        if j + 1 == len(pts) - 1 and u > 1.0:
            return arc[-1] + (u - 1.0) * math.sqrt(ln2), True
        u = min(max(u, 0.0), 1.0)
        dist = float(np.linalg.norm(pts[j] + u * seg - position))
        if dist < best[1]:
            best = (arc[j] + u * math.sqrt(ln2), dist)
    return best[0], len(pts) == 1


def pure_pursuit_plan(
    pose: Pose6D,
    speed: float,
    traj: Trajectory,
    params: ControllerSpec = ControllerSpec(),
) -> MotionPlan:
    """Next target on ``traj`` and the curvature of the arc that reaches it.

    The nearest sample (Euclidean position distance) anchors the vehicle on
    the path; the target is the first sample at least one lookahead distance
    further along. The curvature uses the straight-line distance to that
    sample, which is exact for a vehicle on a circular path.
    """
    pos = pose.position
    i, dist = nearest_sample(pos, traj)
    if dist > params.off_track_limit:
        raise OffTrajectoryError(
            f"vehicle at ({pos[0]:.2f}, {pos[1]:.2f}) is {dist:.2f} m from the trajectory "
            f"(limit {params.off_track_limit} m)"
        )
    arc = traj.arc_length
    progress, finished = _progress(pos, traj, i, arc)
    ld = lookahead_distance(speed, params)
    j = int(min(np.searchsorted(arc, progress + ld), len(traj) - 1))
    j = max(j, i)
    target = traj.poses[j]
    dx, dy = target[0] - pos[0], target[1] - pos[1]
    chord = math.hypot(dx, dy)
    if chord < 1e-9:
        bearing = curvature = 0.0
    else:
        bearing = math.atan2(dy, dx) - pose.yaw
        bearing = math.atan2(math.sin(bearing), math.cos(bearing))
        curvature = 2.0 * math.sin(bearing) / chord
    return MotionPlan(
        target_pose=Pose6D.from_array(target),
        target_velocity=float(traj.velocities[j]),
        curvature=curvature,
        bearing=bearing,
        lookahead_distance=chord,
        nearest_index=i,
        target_index=j,
        progress=float(progress),
        finished=finished,
    )


# -- PID ----------------------------------------------------------------------


@dataclass(frozen=True)
class PidState:
    integral: float = 0.0
    previous_error: float | None = None
    steering: float = 0.0


def pid_control(
    plan: MotionPlan,
    state: VehicleState,
    ctl: PidState,
    dt,
    params: ControllerSpec = ControllerSpec(),
    vehicle: VehicleSpec = VehicleSpec(),
) -> tuple[ControlCommand, PidState]:
    """Velocity PID for acceleration, pursuit curvature for steering.

    The output uses the integral accumulated before this step, so a fresh
    state answers with the proportional term alone. The integral is clamped
    to ``params.integral_limit``; steering follows ``atan(L * kappa)`` under a
    rate limit and both commands are clamped to the actuator limits.
    """
    dt = float(dt)
    if not dt > 0:
        raise ValueError("dt must be positive")
    err = plan.target_velocity - state.speed
    deriv = 0.0 if ctl.previous_error is None else (err - ctl.previous_error) / dt
    accel = params.kp * err + params.ki * ctl.integral + params.kd * deriv
    accel = min(max(accel, -vehicle.max_decel), vehicle.max_accel)
    integral = min(max(ctl.integral + err * dt, -params.integral_limit), params.integral_limit)

    want = math.atan(vehicle.wheelbase * plan.curvature)
    max_change = vehicle.max_steer_rate * dt
    steer = ctl.steering + min(max(want - ctl.steering, -max_change), max_change)
    steer = min(max(steer, -vehicle.max_steer), vehicle.max_steer)
    return ControlCommand(accel, steer), PidState(integral, err, steer)


# -- closed loop --------------------------------------------------------------


@dataclass(frozen=True)
class TickRecord:
    frame_index: int
    timestamp: Fraction
    true_pose: Pose6D
    estimated_pose: Pose6D
    speed: float
    command: ControlCommand | None


@dataclass(frozen=True)
class TrackingRun:
    mode: str
    trajectory: Trajectory  # estimated poses at LiDAR ticks
    true_trajectory: Trajectory
    lidar_times: tuple[Fraction, ...]
    camera_triggers: tuple[tuple[int, Fraction], ...]
    duration: Fraction  # one LiDAR period per tick
    log: tuple[TickRecord, ...] = field(repr=False)


def _predict(prev: np.ndarray, last: np.ndarray) -> np.ndarray:
    """Constant-velocity extrapolation of the last two pose estimates."""
    return last @ (invert(prev) @ last)


def track_trajectory(
    traj: Trajectory,
    cond: RunCondition,
    field_cloud,
    grid,
    clock: SensorClock,
    seed: int,
    *,
    controller: ControllerSpec = ControllerSpec(),
    vehicle: VehicleSpec = VehicleSpec(),
    noise: NoiseSpec = NoiseSpec(),
    lidar: LidarSpec = LidarSpec(),
    duration=None,
    noise_free: bool = False,
    perfect_localization: bool = False,
    timeout_factor: float = 3.0,
) -> TrackingRun:
    """Drive the simulated vehicle along ``traj`` at the LiDAR rate.

    Each tick: scan the field from the true pose, localize against ``grid``
    (seeded by a constant-velocity prediction), plan with pure pursuit from
    the estimate, compute the PID command and advance the kinematics by one
    LiDAR period. The run ends when the vehicle passes the end of ``traj``
    or, with ``duration`` set, after exactly ``ceil(duration * lidar_rate)``
    ticks. Camera triggers cover the run at the rate of ``cond.mode``.
    """
    rate = clock.rate("lidar")
    dt = 1 / rate
    act_rng = None if noise_free else rng_streams.stream(seed, f"actuation-{cond.mode}")
    scan_rng = None if noise_free else rng_streams.stream(seed, f"lidar-noise-{cond.mode}")
    if duration is not None:
        max_ticks = math.ceil(Fraction(duration) * rate)
        if max_ticks < 1:
            raise ValueError("duration must be positive")
    else:
        t_end = float(traj.timestamps[-1]) - float(traj.timestamps[0])
        max_ticks = math.ceil((timeout_factor * t_end + 10.0) * float(rate))

    state = VehicleState(traj.pose(0), speed=float(traj.velocities[0]), timestamp=clock.tick("lidar", 0))
    ctl = PidState()
    estimates: list[np.ndarray] = []
    records: list[TickRecord] = []
    for k in range(max_ticks):
        t = clock.tick("lidar", k)
        state = VehicleState(state.pose, state.speed, state.steering, t, state.acceleration)
        if perfect_localization:
            est = state.pose
        else:
            if not estimates:
                seed_h = pose_to_htm(traj.pose(0))
            elif len(estimates) == 1:
                seed_h = estimates[-1]
            else:
                seed_h = _predict(estimates[-2], estimates[-1])
            scan = simulate_scan(state.pose, field_cloud, lidar, scan_rng, t, k)
            try:
                est = localize_frame(scan, grid, htm_to_pose(seed_h))
            except RuntimeError as exc:
                raise TrackingError(f"{cond.mode} run, tick {k}: {exc}", "localization", k) from exc
        estimates.append(pose_to_htm(est))
        try:
            plan = pure_pursuit_plan(est, state.speed, traj, controller)
        except OffTrajectoryError as exc:
            raise TrackingError(f"{cond.mode} run, tick {k}: {exc}", "planning", k) from exc
        done = plan.finished or (duration is not None and k == max_ticks - 1)
        if done:
            records.append(TickRecord(k, t, state.pose, est, state.speed, None))
            break
        cmd, ctl = pid_control(plan, state, ctl, dt, controller, vehicle)
        records.append(TickRecord(k, t, state.pose, est, state.speed, cmd))
        state = step_kinematics(state, cmd, dt, cond, act_rng, vehicle, noise)
    else:
        raise TrackingError(
            f"{cond.mode} run did not reach the end of the trajectory in {max_ticks} ticks", "timeout"
        )

    lidar_times = tuple(r.timestamp for r in records)
    run_time = Fraction(len(records)) / rate
    triggers = tuple(camera_trigger_times(clock, cond.mode, run_time))
    realized = Trajectory.from_samples(
        ((r.timestamp, r.estimated_pose, r.speed) for r in records), max_gap=math.inf
    )
    true = Trajectory.from_samples(((r.timestamp, r.true_pose, r.speed) for r in records), max_gap=math.inf)
    return TrackingRun(cond.mode, realized, true, lidar_times, triggers, run_time, tuple(records))
