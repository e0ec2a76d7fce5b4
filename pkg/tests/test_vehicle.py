from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nightpair.config import LidarSpec, NoiseSpec, Rates, VehicleSpec
from nightpair.field import PointCloud
from nightpair.geometry import Pose6D, invert, pose_to_htm, transform_points, wrap_angle
from nightpair.vehicle import (
    DAY,
    NIGHT,
    ControlCommand,
    RunCondition,
    SensorClock,
    VehicleState,
    camera_trigger_times,
    heading_rate,
    simulate_scan,
    step_kinematics,
)

# wheelbase / tan(0.2) for a 2.7 m wheelbase, evaluated at 40 digits with mpmath
TURN_RADIUS_0_2 = 13.319518164084613

DAY_COND = RunCondition(DAY)


def cloud_of(xyz) -> PointCloud:
    xyz = np.asarray(xyz, dtype=float)
    return PointCloud(np.column_stack([xyz, np.full(len(xyz), 0.5)]))


# -- kinematics ---------------------------------------------------------------


def test_stationary_vehicle_only_advances_time():
    s0 = VehicleState(Pose6D(1, 2, 1.8, 0, 0.3, 0), timestamp=Fraction(1, 2))
    s1 = step_kinematics(s0, ControlCommand(), Fraction(1, 20), DAY_COND)
    assert s1.pose == s0.pose and s1.speed == 0.0 and s1.steering == 0.0
    assert s1.timestamp == Fraction(11, 20)


def test_constant_speed_straight_displacement():
    yaw, v, dt = 0.7, 4.0, 0.05
    s0 = VehicleState(Pose6D(1, 2, 1.8, 0, yaw, 0), speed=v)
    s1 = step_kinematics(s0, ControlCommand(), dt, DAY_COND)
    assert s1.pose.x - 1 == pytest.approx(v * dt * math.cos(yaw), abs=1e-12)
    assert s1.pose.y - 2 == pytest.approx(v * dt * math.sin(yaw), abs=1e-12)
    assert s1.pose.yaw == yaw and s1.speed == v


def test_constant_steering_traces_the_bicycle_circle():
    phi, v, dt = 0.2, 3.0, Fraction(1, 20)
    s = VehicleState(Pose6D(0, 0, 1.8, 0, 0.4, 0), speed=v, steering=phi)
    center = np.array([-TURN_RADIUS_0_2 * math.sin(0.4), TURN_RADIUS_0_2 * math.cos(0.4)])
    steps = math.ceil(2 * math.pi * TURN_RADIUS_0_2 / (v * float(dt))) + 1
    worst = 0.0
    for _ in range(steps):
        s = step_kinematics(s, ControlCommand(0.0, phi), dt, DAY_COND)
        worst = max(worst, abs(math.hypot(s.pose.x - center[0], s.pose.y - center[1]) - TURN_RADIUS_0_2))
    assert worst < 1e-6
    assert wrap_angle(s.pose.yaw - 0.4) == pytest.approx(steps * v * float(dt) / TURN_RADIUS_0_2 - 2 * math.pi, abs=1e-9)


def test_heading_rate_integrates_to_heading_change():
    s = VehicleState(Pose6D(yaw=0.1), speed=2.5)
    rng = np.random.default_rng(0)
    total = 0.0
    dt = 0.05
    for _ in range(400):
        s = step_kinematics(s, ControlCommand(0.0, float(rng.uniform(-0.4, 0.4))), dt, DAY_COND)
        total += heading_rate(s, VehicleSpec().wheelbase) * dt
    assert wrap_angle(s.pose.yaw - 0.1 - total) == pytest.approx(0.0, abs=1e-6)


def test_steering_is_clamped_and_speed_never_negative():
    params = VehicleSpec(steer_lag=0.0, accel_lag=0.0)
    s = VehicleState(Pose6D(), speed=0.1)
    s = step_kinematics(s, ControlCommand(-3.0, 2.0), 0.05, DAY_COND, params=params)
    assert s.steering == params.max_steer
    assert s.speed == 0.0
    with pytest.raises(ValueError):
        VehicleState(Pose6D(), speed=-1.0)
    with pytest.raises(ValueError):
        step_kinematics(s, ControlCommand(), 0.0, DAY_COND)


def test_command_lag_is_first_order():
    params = VehicleSpec(accel_lag=0.1)
    s = step_kinematics(VehicleState(Pose6D()), ControlCommand(1.0, 0.0), 0.05, DAY_COND, params=params)
    assert s.acceleration == pytest.approx(1.0 - math.exp(-0.5), abs=1e-15)


def test_friction_scales_the_speed_change():
    params = VehicleSpec(accel_lag=0.0)
    slick = RunCondition(NIGHT, friction=0.5, camera_rate=6)
    s0 = VehicleState(Pose6D(), speed=1.0)
    a = step_kinematics(s0, ControlCommand(1.0, 0.0), 0.1, DAY_COND, params=params)
    b = step_kinematics(s0, ControlCommand(1.0, 0.0), 0.1, slick, params=params)
    assert a.speed - 1.0 == pytest.approx(0.1, abs=1e-15)
    assert b.speed - 1.0 == pytest.approx(0.05, abs=1e-15)


def test_actuation_noise_is_seeded_and_scaled():
    s0 = VehicleState(Pose6D(), speed=3.0)
    cmd = ControlCommand(0.0, 0.0)

    def run(seed, cond):
        gen = np.random.default_rng(seed)
        s = s0
        for _ in range(50):
            s = step_kinematics(s, cmd, 0.05, cond, gen)
        return s

    assert run(1, DAY_COND) == run(1, DAY_COND)
    assert run(1, DAY_COND) != run(2, DAY_COND)
    noise = NoiseSpec(accel_sigma=0.1)
    night = RunCondition.for_mode(NIGHT, noise)
    params = VehicleSpec(accel_lag=0.0)
    gd, gn = np.random.default_rng(3), np.random.default_rng(3)
    d = step_kinematics(s0, cmd, 0.05, DAY_COND, gd, params, noise)
    n = step_kinematics(s0, cmd, 0.05, night, gn, params, noise)
    assert (n.acceleration) == pytest.approx(d.acceleration * noise.night_noise_scale, rel=1e-12)


def test_run_condition_modes():
    noise, rates = NoiseSpec(), Rates()
    day, night = RunCondition.for_mode(DAY, noise, rates), RunCondition.for_mode(NIGHT, noise, rates)
    assert (day.camera_rate, night.camera_rate) == (10, 6)
    assert night.noise_scale == 1.2 and day.noise_scale == 1.0
    with pytest.raises(ValueError):
        RunCondition("dusk")
    with pytest.raises(ValueError):
        RunCondition(DAY, noise_scale=0.0)


# -- sensor clock -------------------------------------------------------------


def test_day_and_night_one_second_triggers():
    clock = SensorClock()
    assert camera_trigger_times(clock, DAY, 1) == [(k, Fraction(k, 10)) for k in range(10)]
    assert camera_trigger_times(clock, NIGHT, 1) == [(k, Fraction(k, 6)) for k in range(6)]


def enumerate_ticks(rate: Fraction, duration: Fraction):
    out, k = [], 0
    while Fraction(k) / rate < duration:
        out.append((k, Fraction(k) / rate))
        k += 1
    return out


@given(st.integers(1, 60), st.fractions(min_value=Fraction(1, 100), max_value=20, max_denominator=1000))
def test_trigger_count_matches_enumeration(rate, duration):
    clock = SensorClock(lidar_rate=20, day_camera_rate=rate)
    ticks = camera_trigger_times(clock, DAY, duration)
    assert ticks == enumerate_ticks(Fraction(rate), duration)
    d_r = duration * rate
    assert len(ticks) == math.floor(d_r) + (0 if d_r.denominator == 1 else 1)


@given(st.integers(1, 1000), st.integers(1, 10**6))
def test_tick_spacing_is_exact(rate, k):
    clock = SensorClock(lidar_rate=rate, start=Fraction(3, 7))
    assert clock.tick("lidar", k) - clock.tick("lidar", k - 1) == Fraction(1, rate)
    assert clock.tick("lidar", k) == Fraction(3, 7) + Fraction(k, rate)


def test_clock_rejects_bad_input():
    with pytest.raises(ValueError):
        SensorClock(night_camera_rate=0)
    with pytest.raises(ValueError):
        SensorClock().ticks(DAY, 0)
    with pytest.raises(ValueError):
        SensorClock().rate("radar")


# -- LiDAR --------------------------------------------------------------------


def test_range_and_vertical_fov_limits():
    pts = [
        [300.0, 0.0, 1.8],  # beyond range
        [10.0 * math.cos(math.radians(20)), 0.0, 1.8 + 10 * math.sin(math.radians(20))],  # above +15 deg
        [10.0 * math.cos(math.radians(-30)), 0.0, 1.8 + 10 * math.sin(math.radians(-30))],  # below -25 deg
        [150.0, 0.0, 1.8],  # in range, level
        [10.0 * math.cos(math.radians(10)), 0.0, 1.8 + 10 * math.sin(math.radians(10))],
    ]
    scan = simulate_scan(Pose6D(0, 0, 1.8), cloud_of(pts))
    assert len(scan) == 2
    assert np.allclose(scan.points[:, :3], np.array(pts[3:]) - [0, 0, 1.8], atol=1e-12)


def test_noise_free_scan_is_the_exact_inverse_transform():
    rng = np.random.default_rng(1)
    pose = Pose6D(3, -2, 1.8, 0.02, 0.9, -0.03)
    pts = pose.position + rng.uniform(-20, 20, (400, 3)) * [1, 1, 0.1]
    scan = simulate_scan(pose, cloud_of(pts), LidarSpec(max_points=10_000))
    assert len(scan) > 100
    expected = transform_points(invert(pose_to_htm(pose)), pts)
    world = transform_points(pose_to_htm(pose), scan.points[:, :3])
    # every returned point is one of the field points, mapped exactly
    matches = np.abs(expected[:, None, :] - scan.points[None, :, :3]).max(axis=2).min(axis=0)
    assert matches.max() < 1e-12
    assert np.abs(world[:, None, :] - pts[None]).max(axis=2).min(axis=1).max() < 1e-9


def test_empty_field_of_view_gives_an_empty_scan():
    scan = simulate_scan(Pose6D(0, 0, 1.8), cloud_of([[0.0, 0.0, 50.0]]), timestamp=Fraction(1, 4), frame_index=5)
    assert len(scan) == 0 and scan.points.shape == (0, 4)
    assert scan.timestamp == Fraction(1, 4) and scan.frame_index == 5


def test_range_noise_sigma_is_one_centimeter():
    rng = np.random.default_rng(2)
    n = 100_000
    az = rng.uniform(-math.pi, math.pi, n)
    el = np.radians(rng.uniform(-20, 10, n))
    r = 10.0
    pts = np.column_stack([r * np.cos(el) * np.cos(az), r * np.cos(el) * np.sin(az), 1.8 + r * np.sin(el)])
    scan = simulate_scan(Pose6D(0, 0, 1.8), cloud_of(pts), LidarSpec(max_points=n), np.random.default_rng(3))
    assert len(scan) == n
    err = np.linalg.norm(scan.points[:, :3], axis=1) - r
    assert abs(err.std() - 0.01) <= 0.05 * 0.01
    assert abs(err.mean()) < 3 * 0.01 / math.sqrt(n) * 2


def test_scan_is_seeded_and_capped(straight_map):
    cloud, _ = straight_map
    pose = Pose6D(20, 0, 1.8)
    a = simulate_scan(pose, cloud, LidarSpec(), np.random.default_rng(4))
    b = simulate_scan(pose, cloud, LidarSpec(), np.random.default_rng(4))
    c = simulate_scan(pose, cloud, LidarSpec(), np.random.default_rng(5))
    assert len(a) == LidarSpec().max_points
    assert a.points.tobytes() == b.points.tobytes()
    assert a.points.tobytes() != c.points.tobytes()
    d = simulate_scan(pose, cloud)
    assert d.points.tobytes() == simulate_scan(pose, cloud).points.tobytes()
    assert len(d) <= LidarSpec().max_points
