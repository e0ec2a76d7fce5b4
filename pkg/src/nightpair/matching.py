"""Time-domain frame-to-pose mapping, day/night pose matching and refinement."""

from __future__ import annotations

import bisect
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .config import Tags
from .geometry import Pose6D, angular_distance

MANIFEST_FORMAT = "nightpair-manifest/1"
MANIFEST_FIELDS = (
    "pair_id",
    "road_scene",
    "lighting",
    "day_frame",
    "day_time",
    "night_frame",
    "night_time",
    "position_error",
    "angular_error",
    "status",
)

KEPT = "kept"
DYNAMIC_OBJECT_MISMATCH = "dynamic_object_mismatch"
DECIMETER_ERROR = "decimeter_error"
DUPLICATE_TARGET = "duplicate_target"
REASONS = (DYNAMIC_OBJECT_MISMATCH, DECIMETER_ERROR, DUPLICATE_TARGET)


# -- psi ----------------------------------------------------------------------


@dataclass(frozen=True)
class FramePoseIndex:
    """Nearest pose (in time) for every camera frame; ties go to the earlier pose."""

    camera_times: tuple
    pose_times: tuple
    mapping: tuple[int, ...]

    def __getitem__(self, frame: int) -> int:
        return self.mapping[frame]

    def __len__(self) -> int:
        return len(self.mapping)


def _check_sorted(times, name: str) -> None:
    if any(b < a for a, b in zip(times, times[1:])):
        raise ValueError(f"{name} must be sorted")


def build_psi(camera_times, pose_times) -> FramePoseIndex:
    camera_times, pose_times = tuple(camera_times), tuple(pose_times)
    if not camera_times or not pose_times:
        raise ValueError("camera and pose time lists must be nonempty")
    _check_sorted(camera_times, "camera times")
    _check_sorted(pose_times, "pose times")
    mapping = []
    for t in camera_times:
        j = bisect.bisect_left(pose_times, t)
        if j == len(pose_times):
            j -= 1
        elif j > 0 and t - pose_times[j - 1] <= pose_times[j] - t:
            # exact comparison on Fractions; equality keeps the earlier index
            j -= 1
        # repeated pose times: the first of equals
        mapping.append(bisect.bisect_left(pose_times, pose_times[j]))
    return FramePoseIndex(camera_times, pose_times, tuple(mapping))


# -- matching -----------------------------------------------------------------


@dataclass(frozen=True)
class FrameStream:
    """Camera frames of one run with the pose that psi assigns to each."""

    frame_indices: tuple[int, ...]
    camera_times: tuple
    poses: np.ndarray  # (K, 6) Pose6D rows

    def __post_init__(self):
        poses = np.asarray(self.poses, dtype=float).reshape(-1, 6)
        if not (len(self.frame_indices) == len(self.camera_times) == len(poses)):
            raise ValueError("frame stream fields must have equal length")
        object.__setattr__(self, "poses", poses)

    def __len__(self) -> int:
        return len(self.frame_indices)

    @classmethod
    def from_run(cls, camera_triggers, trajectory) -> FrameStream:
        """Frames ``[(index, time), ...]`` mapped onto a trajectory via psi."""
        triggers = list(camera_triggers)
        if not triggers:
            return cls((), (), np.empty((0, 6)))
        idx = tuple(int(k) for k, _ in triggers)
        times = tuple(t for _, t in triggers)
        psi = build_psi(times, trajectory.timestamps)
        return cls(idx, times, trajectory.poses[list(psi.mapping)])


@dataclass(frozen=True)
class MatchedPair:
    day_frame: int
    night_frame: int
    position_error: float
    angular_error: float
    day_pose: Pose6D
    night_pose: Pose6D
    day_time: Fraction | float = 0
    night_time: Fraction | float = 0
    tags: Tags | None = None

    @property
    def key(self) -> tuple[int, int]:
        return (self.day_frame, self.night_frame)


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple[MatchedPair, ...]
    unmatched: tuple[int, ...]

    @property
    def total_day_frames(self) -> int:
        return len(self.pairs) + len(self.unmatched)


def _distance_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a[:, None, :3] - b[None, :, :3]
    return np.sqrt(np.einsum("ijk,ijk->ij", d, d))


def match_pairs(day: FrameStream, night: FrameStream, delta: float, tags: Tags | None = None) -> MatchResult:
    """Match each day frame to the night frame with the closest pose.

    A pair is emitted iff that smallest position distance is ``<= delta``;
    ties go to the earliest night frame. Night frames may be reused.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    if len(night) == 0 or len(day) == 0:
        return MatchResult((), tuple(day.frame_indices))
    pairs, unmatched = [], []
    # bounded memory for long runs
    chunk = max(1, 2_000_000 // len(night))
    for lo in range(0, len(day), chunk):
        dist = _distance_matrix(day.poses[lo : lo + chunk], night.poses)
        best = np.argmin(dist, axis=1)
        for row, f in enumerate(best):
            q = lo + row
            err = float(dist[row, f])
            if err > delta:
                unmatched.append(day.frame_indices[q])
                continue
            dp, np_ = Pose6D.from_array(day.poses[q]), Pose6D.from_array(night.poses[f])
            pairs.append(
                MatchedPair(
                    day.frame_indices[q],
                    night.frame_indices[f],
                    err,
                    angular_distance(dp, np_),
                    dp,
                    np_,
                    day.camera_times[q],
                    night.camera_times[f],
                    tags,
                )
            )
    return MatchResult(tuple(pairs), tuple(unmatched))


# -- anomalies and refinement -------------------------------------------------


@dataclass(frozen=True)
class AnomalyLog:
    """Camera frames showing a transient object in one run only."""

    day_frames: frozenset[int] = frozenset()
    night_frames: frozenset[int] = frozenset()

    def __len__(self) -> int:
        return len(self.day_frames) + len(self.night_frames)


def inject_anomalies(day_frames, night_frames, day_rate: float, night_rate: float, rng) -> AnomalyLog:
    """Tag each frame independently with its run's anomaly probability."""
    day_frames, night_frames = list(day_frames), list(night_frames)
    day_hit = rng.random(len(day_frames)) < day_rate
    night_hit = rng.random(len(night_frames)) < night_rate
    return AnomalyLog(
        frozenset(f for f, h in zip(day_frames, day_hit) if h),
        frozenset(f for f, h in zip(night_frames, night_hit) if h),
    )


@dataclass(frozen=True)
class RefinementFlag:
    reason: str
    day_frame: int
    night_frame: int
    position_error: float

    def __post_init__(self):
        if self.reason not in REASONS:
            raise ValueError(f"unknown refinement reason {self.reason!r}")


def refine_pairs(
    pairs,
    anomalies: AnomalyLog = AnomalyLog(),
    diagnostic=(),
    unique: bool = False,
    decimeter: float = 0.10,
) -> tuple[tuple[MatchedPair, ...], tuple[RefinementFlag, ...]]:
    """Drop pairs a reviewer would reject; one flag per removal.

    - a pair whose day or night frame is anomaly-tagged is removed as
      ``dynamic_object_mismatch``;
    - every pair of the wide ``diagnostic`` match with error ``>= decimeter``
      is flagged ``decimeter_error`` and removed from the kept set if present
      (as is any other kept pair at or above ``decimeter``);
    - with ``unique`` set, each night frame keeps only its lowest-error pair
      (earliest day frame on ties); the others are ``duplicate_target``.
    """
    flags: list[RefinementFlag] = []
    decimeter_keys = set()
    for p in diagnostic:
        if p.position_error >= decimeter:
            decimeter_keys.add(p.key)
            flags.append(RefinementFlag(DECIMETER_ERROR, p.day_frame, p.night_frame, p.position_error))

    survivors = []
    for p in pairs:
        if p.day_frame in anomalies.day_frames or p.night_frame in anomalies.night_frames:
            flags.append(RefinementFlag(DYNAMIC_OBJECT_MISMATCH, p.day_frame, p.night_frame, p.position_error))
        elif p.key in decimeter_keys:
            continue  # already flagged above
        elif p.position_error >= decimeter:
            # only reachable when delta exceeds the diagnostic threshold
            flags.append(RefinementFlag(DECIMETER_ERROR, p.day_frame, p.night_frame, p.position_error))
        else:
            survivors.append(p)

    if unique:
        winner: dict[int, MatchedPair] = {}
        for p in survivors:
            w = winner.get(p.night_frame)
            if w is None or (p.position_error, p.day_frame) < (w.position_error, w.day_frame):
                winner[p.night_frame] = p
        kept = []
        for p in survivors:
            if winner[p.night_frame] is p:
                kept.append(p)
            else:
                flags.append(RefinementFlag(DUPLICATE_TARGET, p.day_frame, p.night_frame, p.position_error))
        survivors = kept

    flags.sort(key=lambda f: (f.day_frame, f.night_frame, REASONS.index(f.reason)))
    return tuple(survivors), tuple(flags)


# -- report -------------------------------------------------------------------


def error_stats(values) -> dict:
    """mean / median / p95 / max (linear-interpolated percentile); empty -> {}."""
    v = np.asarray(list(values), dtype=float)
    if len(v) == 0:
        return {}
    return {
        "mean": float(np.mean(v)),
        "median": float(np.median(v)),
        "p95": float(np.percentile(v, 95)),
        "max": float(np.max(v)),
    }


def _tag_key(tags) -> str:
    if tags is None:
        return "untagged"
    return f"{tags.road_scene}/{tags.lighting}"


@dataclass(frozen=True)
class AlignmentReport:
    n_pairs: int
    total_day_frames: int
    match_yield: float
    position_error: dict
    angular_error: dict
    angular_warnings: int
    by_tag: dict
    removed: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "n_pairs": self.n_pairs,
            "total_day_frames": self.total_day_frames,
            "match_yield": self.match_yield,
            "position_error_m": self.position_error,
            "angular_error_rad": self.angular_error,
            "angular_warnings": self.angular_warnings,
            "by_tag": self.by_tag,
            "removed": self.removed,
        }

    def to_text(self) -> str:
        lines = [
            f"pairs: {self.n_pairs} of {self.total_day_frames} day frames (yield {self.match_yield:.3f})",
        ]
        if self.position_error:
            pe, ae = self.position_error, self.angular_error
            lines.append(
                "position error [m]: mean {mean:.4f}  median {median:.4f}  p95 {p95:.4f}  max {max:.4f}".format(**pe)
            )
            lines.append(
                "angular error [deg]: mean {:.4f}  median {:.4f}  p95 {:.4f}  max {:.4f}".format(
                    *(math.degrees(ae[k]) for k in ("mean", "median", "p95", "max"))
                )
            )
        else:
            lines.append("position error: no pairs")
        lines.append(f"angular warnings: {self.angular_warnings}")
        for reason, n in self.removed.items():
            lines.append(f"flagged {reason}: {n}")
        for key, row in self.by_tag.items():
            mean = row["position_error_m"].get("mean")
            lines.append(f"  {key}: {row['n_pairs']} pairs" + (f", mean error {mean:.4f} m" if mean is not None else ""))
        return "\n".join(lines) + "\n"


def alignment_report(
    pairs,
    total_day_frames: int | None = None,
    angular_warn_deg: float = 1.0,
    flags=(),
) -> AlignmentReport:
    """Error statistics, yield and a per-tag breakdown over ``pairs``."""
    pairs = list(pairs)
    total = len(pairs) if total_day_frames is None else int(total_day_frames)
    groups: dict[str, list[MatchedPair]] = defaultdict(list)
    for p in pairs:
        groups[_tag_key(p.tags)].append(p)
    by_tag = {
        key: {
            "n_pairs": len(g),
            "position_error_m": error_stats(p.position_error for p in g),
            "angular_error_rad": error_stats(p.angular_error for p in g),
        }
        for key, g in sorted(groups.items())
    }
    removed = {r: 0 for r in REASONS}
    for f in flags:
        removed[f.reason] += 1
    warn = math.radians(angular_warn_deg)
    return AlignmentReport(
        n_pairs=len(pairs),
        total_day_frames=total,
        match_yield=len(pairs) / total if total else 0.0,
        position_error=error_stats(p.position_error for p in pairs),
        angular_error=error_stats(p.angular_error for p in pairs),
        angular_warnings=sum(p.angular_error > warn for p in pairs),
        by_tag=by_tag,
        removed=removed if flags else {},
    )


# -- manifest -----------------------------------------------------------------


def _time_str(t) -> str:
    return str(t) if isinstance(t, Fraction) else repr(float(t))


def manifest_records(pairs, flags=()) -> list[dict]:
    """One record per matched pair, in day-frame order, with its status."""
    status = {}
    for f in flags:
        status.setdefault((f.day_frame, f.night_frame), f.reason)
    out = []
    for i, p in enumerate(sorted(pairs, key=lambda p: p.key)):
        tags = p.tags
        out.append(
            {
                "pair_id": i,
                "road_scene": tags.road_scene if tags else None,
                "lighting": tags.lighting if tags else None,
                "day_frame": p.day_frame,
                "day_time": _time_str(p.day_time),
                "night_frame": p.night_frame,
                "night_time": _time_str(p.night_time),
                "position_error": round(p.position_error, 4),
                "angular_error": round(p.angular_error, 6),
                "status": status.get(p.key, KEPT),
            }
        )
    return out


def format_manifest(records, header: dict) -> str:
    head = {"schema": MANIFEST_FORMAT, "fields": list(MANIFEST_FIELDS), **header}
    lines = [json.dumps(head)]
    lines.extend(json.dumps({k: r[k] for k in MANIFEST_FIELDS}) for r in records)
    return "\n".join(lines) + "\n"


def read_manifest(path) -> tuple[dict, list[dict]]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty manifest")
    header = json.loads(lines[0])
    if header.get("schema") != MANIFEST_FORMAT:
        raise ValueError(f"{path}: not a {MANIFEST_FORMAT} file")
    return header, [json.loads(line) for line in lines[1:] if line.strip()]


def report_from_manifest(path, angular_warn_deg: float = 1.0) -> AlignmentReport:
    """Rebuild the report of the kept pairs recorded in a manifest."""
    header, records = read_manifest(path)
    pairs, flags = [], []
    for r in records:
        tags = Tags(r["road_scene"], r["lighting"]) if r["road_scene"] else None
        zero = Pose6D(0, 0, 0, 0, 0, 0)
        p = MatchedPair(r["day_frame"], r["night_frame"], r["position_error"], r["angular_error"], zero, zero, tags=tags)
        if r["status"] == KEPT:
            pairs.append(p)
        else:
            flags.append(RefinementFlag(r["status"], p.day_frame, p.night_frame, p.position_error))
    flags.extend(
        RefinementFlag(DECIMETER_ERROR, -1, -1, math.nan) for _ in range(header.get("decimeter_flags", 0))
    )
    return alignment_report(pairs, header.get("day_frames"), angular_warn_deg, flags)
