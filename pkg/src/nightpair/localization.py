"""Scan-to-map NDT registration.

The cost of a transform ``h`` is the summed Mahalanobis distance of every
transformed scan point to the Gaussian of the grid cell it falls in. Points
landing in unoccupied cells cost a flat ``OUTLIER_PENALTY``. The minimizer is
Gauss-Newton over a left-multiplied 6-vector increment
``[tx, ty, tz, wx, wy, wz]`` with a backtracking (Armijo) line search.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .field import NdtGrid
from .geometry import (
    Pose6D,
    check_htm,
    htm_to_pose,
    increment_to_htm,
    orthonormalize,
    pose_to_htm,
    rotation_angle,
)

log = logging.getLogger(__name__)

OUTLIER_PENALTY = 9.0
MAX_ITERATIONS = 50
# step contraction of the backtracking line search
BACKTRACK = 0.5
STEP_TOLERANCE = 1e-6
# Welsch scales (squared-distance units) of the basin-finding passes
ROBUST_SCALES = (50.0, 10.0)
ROBUST_ITERATIONS = 15
# a plain pass from the initial guess is kept without the robust passes when
# it is trusted and moved the estimate less than this (m, rad)
WARM_START_SHIFT = (0.05, 0.01)
# below this fraction of points in occupied cells a result is not trusted
MIN_MATCHED_FRACTION = 0.5
# mean per-point cost above this marks a registration as a wrong basin
MAX_MEAN_COST = 4.0


class LocalizationError(RuntimeError):
    def __init__(self, message: str, result: RegistrationResult | None = None):
        super().__init__(message)
        self.result = result


@dataclass(frozen=True)
class RegistrationResult:
    transform: np.ndarray
    error: float
    iterations: int
    converged: bool
    matched_point_fraction: float
    n_points: int = 0
    history: tuple[float, ...] = field(default=(), repr=False)

    @property
    def mean_cost(self) -> float:
        return self.error / self.n_points if self.n_points else float("inf")

    @property
    def trusted(self) -> bool:
        """Converged and the fit looks like the right basin."""
        return self.converged and _trusted(self.error, self.n_points, self.matched_point_fraction)


def _trusted(error: float, n_points: int, matched_fraction: float) -> bool:
    return n_points > 0 and matched_fraction >= MIN_MATCHED_FRACTION and error / n_points <= MAX_MEAN_COST


def _matched_fraction(h: np.ndarray, xyz: np.ndarray, grid: NdtGrid) -> float:
    return float(np.count_nonzero(grid.lookup(_transform(h, xyz)) >= 0)) / len(xyz)


def scan_xyz(scan) -> np.ndarray:
    """Spatial part of a scan: accepts a LidarScan, PointCloud or array."""
    pts = getattr(scan, "points", scan)
    pts = getattr(pts, "points", pts)
    pts = np.asarray(pts, dtype=float)
    if pts.ndim != 2 or pts.shape[1] not in (3, 4):
        raise ValueError(f"expected (N, 3) or (N, 4) scan points, got {pts.shape}")
    return pts[:, :3]


def _transform(h: np.ndarray, xyz: np.ndarray) -> np.ndarray:
    return xyz @ h[:3, :3].T + h[:3, 3]


def _cost_terms(y: np.ndarray, grid: NdtGrid):
    """Occupied mask, whitened residuals ``U (y - mean)`` and factors ``U``."""
    rows = grid.lookup(y)
    hit = rows >= 0
    rows = rows[hit]
    r = y[hit] - grid.means[rows]
    u = grid.sqrt_info[rows]
    e = u[:, :, 0] * r[:, 0:1] + u[:, :, 1] * r[:, 1:2] + u[:, :, 2] * r[:, 2:3]
    d2 = np.einsum("na,na->n", e, e)
    return hit, e, u, d2


def _robust(d2: np.ndarray, scale: float | None):
    """Per-point cost and its derivative w.r.t. the squared distance."""
    if scale is None:
        return d2, np.ones_like(d2)
    e = np.exp(-d2 / scale)
    return scale * (1.0 - e), e


def _penalty(scale: float | None) -> float:
    if scale is None:
        return OUTLIER_PENALTY
    return scale * (1.0 - np.exp(-OUTLIER_PENALTY / scale))


def _cost(h: np.ndarray, xyz: np.ndarray, grid: NdtGrid, scale: float | None = None) -> float:
    hit, _, _, d2 = _cost_terms(_transform(h, xyz), grid)
    rho, _ = _robust(d2, scale)
    return float(np.sum(rho)) + _penalty(scale) * int(np.count_nonzero(~hit))


def association_error(h: np.ndarray, scan, grid: NdtGrid) -> float:
    if len(grid) == 0:
        raise ValueError("grid is empty")
    xyz = scan_xyz(scan)
    if len(xyz) == 0:
        return 0.0
    return _cost(np.asarray(h, dtype=float), xyz, grid)


def error_gradient_hessian(h: np.ndarray, scan, grid: NdtGrid, scale: float | None = None):
    """Cost, gradient and Gauss-Newton Hessian w.r.t. a left increment at zero.

    The increment perturbs ``h`` as ``increment_to_htm(xi) @ h``; the cell
    assignment is the one at ``xi = 0`` (the cost is piecewise smooth). With
    ``scale`` set, each squared distance ``d2`` is passed through the Welsch
    function ``scale * (1 - exp(-d2 / scale))`` and the Hessian is the
    reweighted (IRLS) one.
    """
    xyz = scan_xyz(scan)
    y = _transform(np.asarray(h, dtype=float), xyz)
    hit, e, u, d2 = _cost_terms(y, grid)
    rho, weight = _robust(d2, scale)
    err = float(np.sum(rho)) + _penalty(scale) * int(np.count_nonzero(~hit))
    yh = y[hit]
    # whitened Jacobian rows: u_k^T [I, -[y]x] = [u_k, y x u_k]
    m = np.empty((len(yh), 3, 6))
    m[:, :, :3] = u
    m[:, :, 3:] = np.cross(yh[:, None, :], u)
    sw = np.sqrt(weight)
    m *= sw[:, None, None]
    m = m.reshape(-1, 6)
    ew = (e * sw[:, None]).reshape(-1)
    grad = 2.0 * (m.T @ ew)
    hess = 2.0 * (m.T @ m)
    return err, grad, hess, int(np.count_nonzero(hit))


def _gauss_newton(h, xyz, grid, scale, max_iterations, tolerance, verbose=False):
    """Damped Gauss-Newton with Armijo backtracking on one cost.

    Returns ``(h, err, iterations, converged, history)``.
    """
    err, grad, hess, _ = error_gradient_hessian(h, xyz, grid, scale)
    history = [err]
    for it in range(1, max_iterations + 1):
        try:
            step = -np.linalg.solve(hess + 1e-9 * np.eye(6), grad)
        except np.linalg.LinAlgError:
            return h, err, it, False, history
        if np.linalg.norm(step) < tolerance:
            return h, err, it, True, history
        slope = float(grad @ step)
        if slope >= 0:
            step, slope = -grad, -float(grad @ grad)
        alpha = 1.0
        step_norm = float(np.linalg.norm(step))
        while True:
            cand = increment_to_htm(alpha * step) @ h
            cand_err = _cost(cand, xyz, grid, scale)
            if cand_err <= err + 1e-4 * alpha * slope:
                break
            alpha *= BACKTRACK
            if alpha * step_norm < tolerance:
                # no decrease for any update above tolerance: a kink of the
                # piecewise cost; the parameters stay put
                return h, err, it, True, history
        h = cand
        err, grad, hess, _ = error_gradient_hessian(h, xyz, grid, scale)
        history.append(err)
        update = float(np.linalg.norm(alpha * step))
        log.log(
            logging.INFO if verbose else logging.DEBUG,
            "ndt scale=%s iter %d: E=%.6f |step|=%.3g alpha=%.3g",
            scale,
            it,
            err,
            update,
            alpha,
        )
        if update < tolerance:
            return h, err, it, True, history
    return h, err, max_iterations, False, history


def register_scan(
    scan,
    grid: NdtGrid,
    initial_guess: np.ndarray,
    max_iterations: int = MAX_ITERATIONS,
    tolerance: float = STEP_TOLERANCE,
    verbose: bool = False,
) -> RegistrationResult:
    """Minimize the association error starting from ``initial_guess``.

    A plain Gauss-Newton pass runs first; if it converges to a trusted fit close
    to the guess, that is the answer. Otherwise a few reweighted passes at
    decreasing Welsch scales pull the estimate into the basin without letting
    points in wrong cells dominate, a final pass minimizes the exact
    association error, and the lower-cost of the two candidates is returned.
    Plain Gauss-Newton never increases the cost, so ``E(h*) <= E(initial_guess)``.
    """
    if len(grid) == 0:
        raise ValueError("grid is empty")
    xyz = scan_xyz(scan)
    h0 = check_htm(np.array(initial_guess, dtype=float))
    n = len(xyz)
    if n == 0:
        return RegistrationResult(h0, 0.0, 0, False, 0.0, 0, (0.0,))

    # warm start: a plain pass is enough when the guess is already close
    h, err, used, converged, history = _gauss_newton(h0, xyz, grid, None, max_iterations, tolerance, verbose)
    shift, turn = transform_error(h0, h)
    warm_ok = (
        converged
        and shift < WARM_START_SHIFT[0]
        and turn < WARM_START_SHIFT[1]
        and _trusted(err, n, _matched_fraction(h, xyz, grid))
    )
    if not warm_ok:
        plain = (h, err, used, converged, history)
        h = h0
        used = 0
        for scale in ROBUST_SCALES:
            h, _, it, _, _ = _gauss_newton(h, xyz, grid, scale, ROBUST_ITERATIONS, tolerance * 10, verbose)
            used += it - 1
        budget = max(1, max_iterations - used)
        h, err, it, converged, history = _gauss_newton(h, xyz, grid, None, budget, tolerance, verbose)
        used += it
        if err > plain[1]:
            h, err, used, converged, history = plain
    # orthonormality drift guard after many left-multiplied updates
    r = h[:3, :3]
    if np.linalg.norm(r.T @ r - np.eye(3)) > 1e-12:
        h = h.copy()
        h[:3, :3] = orthonormalize(r)
        err = _cost(h, xyz, grid)
    return RegistrationResult(
        transform=h,
        error=err,
        iterations=used,
        converged=converged,
        matched_point_fraction=_matched_fraction(h, xyz, grid),
        n_points=n,
        history=tuple(history),
    )


def localize_frame(scan, grid: NdtGrid, prev_pose: Pose6D) -> Pose6D:
    """Register ``scan`` seeded at ``prev_pose``; raise if not converged."""
    result = register_scan(scan, grid, pose_to_htm(prev_pose))
    if not result.trusted:
        raise LocalizationError(
            f"registration failed (converged={result.converged}, "
            f"matched={result.matched_point_fraction:.2f}, mean cost={result.mean_cost:.2f}, "
            f"iterations={result.iterations})",
            result,
        )
    return htm_to_pose(result.transform)


def transform_error(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """(translation m, rotation rad) difference between two transforms."""
    d = np.linalg.inv(a) @ b
    return float(np.linalg.norm(a[:3, 3] - b[:3, 3])), rotation_angle(d[:3, :3])
