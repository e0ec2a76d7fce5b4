"""Synthetic test-field point cloud and the NDT Gaussian grid built on it."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from . import rng as rng_streams
from .config import Box, Layout, ScenarioConfig

MIN_CELL_POINTS = 5
COV_FLOOR_ABS = 1e-4
COV_FLOOR_REL = 0.01

# packed cell keys: 21 bits per axis, offset so negative indices fit
_KEY_BITS = 21
_KEY_OFF = 1 << (_KEY_BITS - 1)
_MAX_TABLE_CELLS = 4_000_000


class EmptyLayoutError(ValueError):
    pass


class NoValidCellsError(ValueError):
    pass


@dataclass(frozen=True)
class PointCloud:
    """``(N, 4)`` array of ``[X, Y, Z, I]`` rows."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ValueError(f"expected (N, 4) points, got shape {pts.shape}")
        if len(pts) < 1:
            raise ValueError("point cloud needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite values")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]

    @cached_property
    def columns32(self) -> np.ndarray:
        """Contiguous float32 ``(3, N)`` coordinates for fast bulk filtering."""
        cols = np.ascontiguousarray(self.points[:, :3].T, dtype=np.float32)
        cols.setflags(write=False)
        return cols


def save_xyzi(cloud: PointCloud, path) -> None:
    np.savetxt(path, cloud.points, fmt="%.6f", delimiter=" ")


def load_xyzi(path) -> PointCloud:
    return PointCloud(np.loadtxt(Path(path), ndmin=2))


# -- field synthesis ---------------------------------------------------------


def layout_bounds(layout: Layout) -> tuple[np.ndarray, np.ndarray]:
    """XY bounding box of every layout primitive, without margin."""
    xy = []
    for road in layout.roads:
        half = road.width / 2.0
        for x, y in road.points:
            xy += [(x - half, y - half), (x + half, y + half)]
    for pole in layout.poles:
        xy += [(pole.x - pole.radius, pole.y - pole.radius), (pole.x + pole.radius, pole.y + pole.radius)]
    for box in layout.boxes:
        xy += [tuple(c) for c in _box_footprint(box)]
    xy = np.asarray(xy, dtype=float)
    return xy.min(axis=0), xy.max(axis=0)


def _box_footprint(box: Box) -> np.ndarray:
    l, w, _ = box.size
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    corners = np.array([[l, w], [l, -w], [-l, -w], [-l, w]]) / 2.0
    rot = np.array([[c, -s], [s, c]])
    return corners @ rot.T + np.asarray(box.center)


def _sample_rect(gen, origin, u, v, density) -> np.ndarray:
    """Uniform points on the parallelogram ``origin + a*u + b*v``, a, b in [0, 1]."""
    area = float(np.linalg.norm(np.cross(u, v)))
    n = max(1, math.ceil(area * density))
    ab = gen.random((n, 2))
    return origin + ab[:, :1] * u + ab[:, 1:] * v


def _box_points(gen, box: Box, density: float) -> np.ndarray:
    l, w, h = box.size
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    ex = np.array([c, s, 0.0]) * l
    ey = np.array([-s, c, 0.0]) * w
    ez = np.array([0.0, 0.0, h])
    o = np.array([box.center[0], box.center[1], box.z]) - ex / 2 - ey / 2
    faces = [
        (o, ex, ey),
        (o + ez, ex, ey),
        (o, ex, ez),
        (o + ey, ex, ez),
        (o, ey, ez),
        (o + ex, ey, ez),
    ]
    return np.vstack([_sample_rect(gen, *f, density) for f in faces])


def _pole_points(gen, pole, density: float) -> np.ndarray:
    n = max(1, math.ceil(2 * math.pi * pole.radius * pole.height * density))
    theta = gen.random(n) * 2 * math.pi
    z = gen.random(n) * pole.height
    return np.column_stack([pole.x + pole.radius * np.cos(theta), pole.y + pole.radius * np.sin(theta), z])


def _curb_points(gen, road, density: float) -> np.ndarray:
    out = []
    pts = np.asarray(road.points, dtype=float)
    for a, b in zip(pts[:-1], pts[1:]):
        d = b - a
        length = float(np.hypot(*d))
        if length == 0:
            continue
        normal = np.array([-d[1], d[0]]) / length
        for side in (1.0, -1.0):
            base = a + side * normal * road.width / 2.0
            out.append(
                _sample_rect(
                    gen,
                    np.array([base[0], base[1], 0.0]),
                    np.array([d[0], d[1], 0.0]),
                    np.array([0.0, 0.0, road.curb_height]),
                    density,
                )
            )
    return np.vstack(out) if out else np.empty((0, 3))


def _on_road(xy: np.ndarray, layout: Layout) -> np.ndarray:
    mask = np.zeros(len(xy), dtype=bool)
    for road in layout.roads:
        pts = np.asarray(road.points, dtype=float)
        for a, b in zip(pts[:-1], pts[1:]):
            d = b - a
            t = np.clip(((xy - a) @ d) / max(d @ d, 1e-12), 0.0, 1.0)
            dist = np.linalg.norm(xy - (a + t[:, None] * d), axis=1)
            mask |= dist <= road.width / 2.0
    return mask


def synthesize_field(cfg: ScenarioConfig) -> PointCloud:
    """Surface-sample the scenario layout into a map cloud.

    The ground plane z = 0 covers the layout's bounding box plus
    ``layout.ground_margin``. Road surfaces get a darker intensity than the
    verge; curbs, poles and boxes are sampled at ``layout.surface_density``.
    Every point is then jittered by ``layout.surface_noise`` (map error).
    """
    layout = cfg.layout
    if layout.is_empty:
        raise EmptyLayoutError("layout has no roads, poles or boxes")
    gen = rng_streams.stream(cfg.seed, "field")

    lo, hi = layout_bounds(layout)
    lo = lo - layout.ground_margin
    hi = hi + layout.ground_margin
    span = hi - lo
    n_ground = math.ceil(span[0] * span[1] * layout.ground_density)
    ground_xy = lo + gen.random((n_ground, 2)) * span
    ground = np.column_stack([ground_xy, np.zeros(n_ground)])
    ground_i = np.where(_on_road(ground_xy, layout), 0.15, 0.35)

    parts = [(ground, ground_i)]
    for road in layout.roads:
        pts = _curb_points(gen, road, layout.surface_density)
        parts.append((pts, np.full(len(pts), 0.5)))
    for pole in layout.poles:
        pts = _pole_points(gen, pole, layout.surface_density)
        parts.append((pts, np.full(len(pts), 0.8)))
    for box in layout.boxes:
        pts = _box_points(gen, box, layout.surface_density)
        parts.append((pts, np.full(len(pts), 0.6)))

    if layout.surface_noise > 0:
        for pts, _ in parts:
            pts += gen.normal(0.0, layout.surface_noise, pts.shape)
    xyz = np.vstack([p for p, _ in parts])
    inten = np.concatenate([i for _, i in parts])
    return PointCloud(np.column_stack([xyz, inten]))


# -- NDT grid ----------------------------------------------------------------


@dataclass(frozen=True)
class NdtCell:
    mean: np.ndarray
    cov: np.ndarray
    point_count: int


@dataclass(frozen=True)
class NdtGrid:
    """Voxel grid of per-cell Gaussians.

    Cells are addressed by ``floor((q - origin) / cell_size)`` where ``q`` is
    the point expressed in the grid frame (``frame`` maps grid coordinates to
    world coordinates, identity for a freshly built grid). Means and
    covariances are stored in world coordinates. Arrays are sorted by packed
    key so lookups are a single ``searchsorted``.
    """

    cell_size: float
    origin: np.ndarray
    indices: np.ndarray  # (K, 3) int64
    keys: np.ndarray  # (K,) int64, sorted
    means: np.ndarray  # (K, 3)
    covs: np.ndarray  # (K, 3, 3)
    inv_covs: np.ndarray  # (K, 3, 3)
    counts: np.ndarray  # (K,)
    bbox: tuple[np.ndarray, np.ndarray]
    frame: np.ndarray | None = None
    # dense index -> row table over the occupied index range (None if too big)
    table: np.ndarray | None = field(default=None, repr=False)
    table_lo: np.ndarray | None = field(default=None, repr=False)
    # upper-triangular factor U with U.T @ U = inv_cov, so d2 = |U r|^2
    sqrt_info: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.keys)

    def cell_index(self, xyz: np.ndarray) -> np.ndarray:
        xyz = np.asarray(xyz, dtype=float)
        if self.frame is not None:
            r, t = self.frame[:3, :3], self.frame[:3, 3]
            xyz = (xyz - t) @ r
        return np.floor((xyz - self.origin) / self.cell_size).astype(np.int64)

    def transformed(self, h: np.ndarray) -> NdtGrid:
        """The same grid rigidly moved by ``h`` (cells move with it)."""
        r, t = h[:3, :3], h[:3, 3]
        frame = h if self.frame is None else h @ self.frame
        return NdtGrid(
            cell_size=self.cell_size,
            origin=self.origin,
            indices=self.indices,
            keys=self.keys,
            means=self.means @ r.T + t,
            covs=r @ self.covs @ r.T,
            inv_covs=r @ self.inv_covs @ r.T,
            counts=self.counts,
            bbox=self.bbox,
            frame=frame,
            table=self.table,
            table_lo=self.table_lo,
            sqrt_info=self.sqrt_info @ r.T,
        )

    def lookup(self, xyz: np.ndarray) -> np.ndarray:
        """Row of the occupied cell containing each point, or -1."""
        idx = self.cell_index(xyz)
        if self.table is not None:
            ijk = idx - self.table_lo
            inside = np.all((ijk >= 0) & (ijk < self.table.shape), axis=1)
            rows = np.full(len(idx), -1, dtype=np.int64)
            sel = ijk[inside]
            rows[inside] = self.table[sel[:, 0], sel[:, 1], sel[:, 2]]
            return rows
        keys = pack_keys(idx)
        pos = np.searchsorted(self.keys, keys)
        pos_c = np.minimum(pos, len(self.keys) - 1)
        hit = self.keys[pos_c] == keys
        return np.where(hit, pos_c, -1)

    def cell(self, index) -> NdtCell | None:
        k = pack_keys(np.asarray(index, dtype=np.int64).reshape(1, 3))[0]
        pos = int(np.searchsorted(self.keys, k))
        if pos < len(self.keys) and self.keys[pos] == k:
            return NdtCell(self.means[pos], self.covs[pos], int(self.counts[pos]))
        return None

    def cells(self) -> dict[tuple[int, int, int], NdtCell]:
        return {
            tuple(int(v) for v in idx): NdtCell(self.means[i], self.covs[i], int(self.counts[i]))
            for i, idx in enumerate(self.indices)
        }


def pack_keys(idx: np.ndarray) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    if np.any(np.abs(idx) >= _KEY_OFF):
        raise ValueError("cell index out of representable range")
    shifted = idx + _KEY_OFF
    return (shifted[:, 0] << (2 * _KEY_BITS)) | (shifted[:, 1] << _KEY_BITS) | shifted[:, 2]


def regularize_cov(cov: np.ndarray) -> np.ndarray:
    """Raise eigenvalues to ``max(1e-4, 0.01 * largest)``; works on stacks."""
    w, v = np.linalg.eigh(cov)
    floor = np.maximum(COV_FLOOR_ABS, COV_FLOOR_REL * w[..., -1:])
    w = np.maximum(w, floor)
    out = (v * w[..., None, :]) @ np.swapaxes(v, -1, -2)
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def build_ndt_grid(
    cloud: PointCloud,
    cell_size: float = 1.0,
    origin=(0.0, 0.0, 0.0),
    min_points: int = MIN_CELL_POINTS,
) -> NdtGrid:
    if not cell_size > 0:
        raise ValueError("cell_size must be positive")
    origin = np.asarray(origin, dtype=float)
    xyz = cloud.xyz
    idx = np.floor((xyz - origin) / cell_size).astype(np.int64)
    keys = pack_keys(idx)
    # canonical order (by key, then coordinates) makes the reduction
    # independent of input point order
    order = np.lexsort((xyz[:, 2], xyz[:, 1], xyz[:, 0], keys))
    keys, xyz, idx = keys[order], xyz[order], idx[order]

    uniq, start, counts = np.unique(keys, return_index=True, return_counts=True)
    keep = counts >= min_points
    if not np.any(keep):
        raise NoValidCellsError("no valid cells")

    sums = np.add.reduceat(xyz, start, axis=0)
    means = sums / counts[:, None]
    d = xyz - np.repeat(means, counts, axis=0)
    outer = (d[:, :, None] * d[:, None, :]).reshape(-1, 9)
    scatter = np.add.reduceat(outer, start, axis=0).reshape(-1, 3, 3)

    uniq, start, counts, means, scatter = (a[keep] for a in (uniq, start, counts, means, scatter))
    covs = regularize_cov(scatter / (counts - 1)[:, None, None])
    inv_covs = np.linalg.inv(covs)
    inv_covs = 0.5 * (inv_covs + np.swapaxes(inv_covs, -1, -2))
    # inv_cov = L L^T  ->  U = L^T
    sqrt_info = np.swapaxes(np.linalg.cholesky(inv_covs), -1, -2)
    cell_idx = idx[start]
    lo = cell_idx.min(axis=0)
    shape = cell_idx.max(axis=0) - lo + 1
    table = None
    if math.prod(int(n) for n in shape) <= _MAX_TABLE_CELLS:
        table = np.full(tuple(shape), -1, dtype=np.int32)
        rel = cell_idx - lo
        table[rel[:, 0], rel[:, 1], rel[:, 2]] = np.arange(len(uniq))
    return NdtGrid(
        cell_size=float(cell_size),
        origin=origin,
        indices=cell_idx,
        keys=uniq,
        means=means,
        covs=covs,
        inv_covs=inv_covs,
        counts=counts,
        bbox=(cloud.xyz.min(axis=0), cloud.xyz.max(axis=0)),
        table=table,
        table_lo=lo if table is not None else None,
        sqrt_info=sqrt_info,
    )
