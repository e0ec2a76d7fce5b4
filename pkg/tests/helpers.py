"""Small scenario builders and brute-force oracles shared by the tests."""

from __future__ import annotations

import math

import numpy as np

from nightpair.config import Box, Layout, Pole, Road, ScenarioConfig, Tags, TrajectorySpec
from nightpair.geometry import increment_to_htm
from nightpair.localization import association_error, error_gradient_hessian


def tiny_config(scenario_id: str = "tiny", seed: int = 3, length: float = 16.0) -> ScenarioConfig:
    """A short straight road with a few landmarks; runs end to end in seconds."""
    poles = tuple(Pole(x, side * 4.0) for x, side in ((2.0, 1), (6.0, -1), (10.0, 1), (14.0, -1), (18.0, 1)))
    boxes = (
        Box((5.0, -7.0), (6.0, 4.0, 3.0)),
        Box((14.0, 8.0), (6.0, 4.0, 4.0), yaw=0.2),
        Box((9.0, 5.5), (4.5, 1.8, 1.45)),
    )
    return ScenarioConfig(
        scenario_id=scenario_id,
        seed=seed,
        tags=Tags("single_lane_road", "no_streetlight"),
        layout=Layout(roads=(Road(((0.0, 0.0), (length + 4.0, 0.0))),), poles=poles, boxes=boxes),
        trajectory=TrajectorySpec(((2.0, 0.0), (length, 0.0)), speed=3.0),
    )


def circle_waypoints(radius: float, sweep: float, step: float = 0.25):
    """Counter-clockwise arc about (0, radius) starting at the origin heading +x."""
    n = max(2, math.ceil(radius * sweep / step))
    a = -math.pi / 2 + np.linspace(0.0, sweep, n + 1)
    return tuple((radius * math.cos(t), radius + radius * math.sin(t)) for t in a)


def brute_nearest(times, t):
    """Index of the time closest to ``t``; the first one on ties."""
    best, best_d = 0, abs(times[0] - t)
    for i, s in enumerate(times):
        d = abs(s - t)
        if d < best_d:
            best, best_d = i, d
    return best


def brute_argmin(day_positions, night_positions):
    """Per day row: (index of nearest night row, distance), first index on ties."""
    out = []
    for p in day_positions:
        best, best_d = 0, math.inf
        for j, q in enumerate(night_positions):
            d = math.sqrt(sum((a - b) ** 2 for a, b in zip(p[:3], q[:3])))
            if d < best_d:
                best, best_d = j, d
        out.append((best, best_d))
    return out


def naive_stats(values):
    """mean / median / p95 / max computed with plain Python."""
    v = sorted(float(x) for x in values)
    n = len(v)
    if n == 0:
        return {}

    def pct(q):
        pos = (n - 1) * q / 100.0
        lo = math.floor(pos)
        hi = min(lo + 1, n - 1)
        return v[lo] + (v[hi] - v[lo]) * (pos - lo)

    return {"mean": math.fsum(v) / n, "median": pct(50), "p95": pct(95), "max": v[-1]}


def polyline_distance(points, polyline) -> np.ndarray:
    """Distance of each point to the nearest point of a polyline (segments clamped)."""
    pts = np.asarray(points, dtype=float)[:, :2]
    line = np.asarray(polyline, dtype=float)[:, :2]
    best = np.full(len(pts), np.inf)
    for a, b in zip(line[:-1], line[1:]):
        d = b - a
        t = np.clip(((pts - a) @ d) / max(float(d @ d), 1e-300), 0.0, 1.0)
        best = np.minimum(best, np.linalg.norm(pts - (a + t[:, None] * d), axis=1))
    if len(line) == 1:
        best = np.linalg.norm(pts - line[0], axis=1)
    return best


def arc_weighted_fraction(positions, mask) -> float:
    """Fraction of path length (by the segment preceding each sample) where ``mask`` holds."""
    pos = np.asarray(positions, dtype=float)[:, :2]
    seg = np.linalg.norm(np.diff(pos, axis=0), axis=1)
    total = seg.sum()
    return float(seg[np.asarray(mask)[1:]].sum() / total) if total > 0 else 1.0


def central_difference_gradient(h, xyz, grid, eps: float) -> np.ndarray:
    g = np.empty(6)
    for i in range(6):
        d = np.zeros(6)
        d[i] = eps
        plus = association_error(increment_to_htm(d) @ h, xyz, grid)
        minus = association_error(increment_to_htm(-d) @ h, xyz, grid)
        g[i] = (plus - minus) / (2 * eps)
    return g


def assignments_stable(h, xyz, grid, eps: float) -> bool:
    base = grid.lookup(xyz @ h[:3, :3].T + h[:3, 3])
    for i in range(6):
        for s in (eps, -eps):
            d = np.zeros(6)
            d[i] = s
            hh = increment_to_htm(d) @ h
            if not np.array_equal(grid.lookup(xyz @ hh[:3, :3].T + hh[:3, 3]), base):
                return False
    return True


def gradient_relative_error(h, xyz, grid) -> float:
    """Analytic vs central-difference gradient, shrinking the step until no point changes cell."""
    _, grad, _, _ = error_gradient_hessian(h, xyz, grid)
    eps = 1e-5
    while not assignments_stable(h, xyz, grid, eps):
        eps /= 4
        if eps < 1e-10:
            raise AssertionError("no finite-difference step keeps the cell assignment fixed")
    fd = central_difference_gradient(h, xyz, grid, eps)
    return float(np.linalg.norm(grad - fd) / max(np.linalg.norm(grad), 1e-12))
