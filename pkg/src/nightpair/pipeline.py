"""End-to-end runner: field, grid, day and night runs, matching, refinement, outputs."""

from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import rng as rng_streams
from .config import ConfigError, ScenarioConfig, load_config
from .field import NoValidCellsError, build_ndt_grid, synthesize_field
from .matching import (
    AlignmentReport,
    AnomalyLog,
    FrameStream,
    MatchResult,
    alignment_report,
    error_stats,
    format_manifest,
    inject_anomalies,
    manifest_records,
    match_pairs,
    refine_pairs,
)
from .tracking import (
    Trajectory,
    TrackingError,
    TrackingRun,
    author_trajectory,
    format_trajectory,
    track_trajectory,
)
from .vehicle import DAY, NIGHT, RunCondition, SensorClock

log = logging.getLogger(__name__)

RUN_LOG_FORMAT = "nightpair-runlog/1"
RUN_LOG_FIELDS = ("frame", "timestamp", "true_pose", "estimated_pose", "speed", "command")


class SimulationAbort(RuntimeError):
    """A tracked run failed; ``stage`` names where (e.g. ``night/localization``)."""

    def __init__(self, message: str, stage: str):
        super().__init__(message)
        self.stage = stage


def bundled_scenarios() -> dict[str, Path]:
    """Scenario files shipped with the package, by file stem."""
    root = resources.files("nightpair") / "scenarios"
    return {Path(p.name).stem: Path(str(p)) for p in root.iterdir() if p.name.endswith(".yaml")}


def resolve_config(path_or_name) -> Path:
    """A config path, or the stem of a bundled scenario."""
    p = Path(path_or_name)
    if p.exists():
        return p
    bundled = bundled_scenarios()
    if str(path_or_name) in bundled:
        return bundled[str(path_or_name)]
    raise ConfigError(f"no such config file or bundled scenario: {path_or_name}")


def write_atomic(path, text: str) -> Path:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


# -- in-memory pipeline -------------------------------------------------------


@dataclass(frozen=True)
class ScenarioResult:
    config: ScenarioConfig
    desired: Trajectory
    day: TrackingRun
    night: TrackingRun
    day_frames: FrameStream
    night_frames: FrameStream
    matches: MatchResult
    diagnostic: MatchResult
    anomalies: AnomalyLog
    kept: tuple
    flags: tuple
    report: AlignmentReport


def _track(cfg: ScenarioConfig, mode: str, desired, field_cloud, grid, clock) -> TrackingRun:
    cond = RunCondition.for_mode(mode, cfg.noise, cfg.rates)
    try:
        return track_trajectory(
            desired,
            cond,
            field_cloud,
            grid,
            clock,
            cfg.seed,
            controller=cfg.controller,
            vehicle=cfg.vehicle,
            noise=cfg.noise,
            lidar=cfg.lidar,
        )
    except TrackingError as exc:
        raise SimulationAbort(f"{mode} tracking aborted at {exc.stage}: {exc}", f"{mode}/{exc.stage}") from exc


def simulate_scenario(cfg: ScenarioConfig) -> ScenarioResult:
    """Run the whole pipeline in memory."""
    field_cloud = synthesize_field(cfg)
    try:
        grid = build_ndt_grid(field_cloud, cfg.grid.cell_size, cfg.grid.origin)
    except NoValidCellsError as exc:
        raise SimulationAbort(f"map grid: {exc}", "grid") from exc
    log.info("%s: field %d points, grid %d cells", cfg.scenario_id, len(field_cloud), len(grid))
    desired = author_trajectory(cfg.trajectory)
    clock = SensorClock.from_rates(cfg.rates)
    day = _track(cfg, DAY, desired, field_cloud, grid, clock)
    night = _track(cfg, NIGHT, desired, field_cloud, grid, clock)
    log.info("%s: day %d ticks, night %d ticks", cfg.scenario_id, len(day.log), len(night.log))

    day_frames = FrameStream.from_run(day.camera_triggers, day.trajectory)
    night_frames = FrameStream.from_run(night.camera_triggers, night.trajectory)
    m = cfg.matching
    matches = match_pairs(day_frames, night_frames, m.delta, cfg.tags)
    diagnostic = match_pairs(day_frames, night_frames, m.diag_delta, cfg.tags)
    anomalies = inject_anomalies(
        day_frames.frame_indices,
        night_frames.frame_indices,
        cfg.anomalies.day_rate,
        cfg.anomalies.night_rate,
        rng_streams.stream(cfg.seed, "anomalies"),
    )
    kept, flags = refine_pairs(matches.pairs, anomalies, diagnostic.pairs, m.unique, m.decimeter)
    report = alignment_report(kept, len(day_frames), m.angular_warn_deg, flags)
    return ScenarioResult(
        cfg, desired, day, night, day_frames, night_frames, matches, diagnostic, anomalies, kept, flags, report
    )


# -- serialization ------------------------------------------------------------


def format_run_log(run: TrackingRun, cfg: ScenarioConfig) -> str:
    """One JSON record per LiDAR tick under a versioned header line."""
    head = {
        "schema": RUN_LOG_FORMAT,
        "fields": list(RUN_LOG_FIELDS),
        "scenario_id": cfg.scenario_id,
        "mode": run.mode,
        "seed": cfg.seed,
        "config_hash": cfg.config_hash(),
        "pose_order": ["x", "y", "z", "roll", "yaw", "pitch"],
    }
    lines = [json.dumps(head)]
    for r in run.log:
        cmd = None if r.command is None else {"acceleration": r.command.acceleration, "steering": r.command.steering}
        rec = {
            "frame": r.frame_index,
            "timestamp": str(r.timestamp),
            "true_pose": [float(v) for v in r.true_pose.as_array()],
            "estimated_pose": [float(v) for v in r.estimated_pose.as_array()],
            "speed": r.speed,
            "command": cmd,
        }
        lines.append(json.dumps(rec))
    return "\n".join(lines) + "\n"


def manifest_text(result: ScenarioResult) -> str:
    cfg = result.config
    header = {
        "scenario_id": cfg.scenario_id,
        "seed": cfg.seed,
        "config_hash": cfg.config_hash(),
        "delta": cfg.matching.delta,
        "day_frames": len(result.day_frames),
        "night_frames": len(result.night_frames),
        "decimeter_flags": sum(f.reason == "decimeter_error" for f in result.flags),
    }
    return format_manifest(manifest_records(result.matches.pairs, result.flags), header)


@dataclass(frozen=True)
class RunArtifacts:
    scenario_id: str
    day_log: Path
    night_log: Path
    manifest: Path
    report: Path
    report_json: Path
    seed: int
    config_hash: str
    result: ScenarioResult | None = None

    def paths(self) -> tuple[Path, ...]:
        return (self.day_log, self.night_log, self.manifest, self.report, self.report_json)


def write_artifacts(result: ScenarioResult, out_dir) -> RunArtifacts:
    cfg = result.config
    out = Path(out_dir) / cfg.scenario_id
    out.mkdir(parents=True, exist_ok=True)
    day_log = write_atomic(out / "day_run.jsonl", format_run_log(result.day, cfg))
    night_log = write_atomic(out / "night_run.jsonl", format_run_log(result.night, cfg))
    for name, traj in (("desired", result.desired), ("day", result.day.trajectory), ("night", result.night.trajectory)):
        write_atomic(out / f"{name}_trajectory.txt", format_trajectory(traj))
    manifest = write_atomic(out / "pairs.jsonl", manifest_text(result))
    summary = {"scenario_id": cfg.scenario_id, "seed": cfg.seed, "config_hash": cfg.config_hash()}
    summary.update(result.report.to_dict())
    report_json = write_atomic(out / "report.json", json.dumps(summary, indent=2) + "\n")
    report = write_atomic(out / "report.txt", f"scenario {cfg.scenario_id} (seed {cfg.seed})\n" + result.report.to_text())
    return RunArtifacts(cfg.scenario_id, day_log, night_log, manifest, report, report_json, cfg.seed, cfg.config_hash(), result)


def run_scenario(config, out_dir="out", seed=None, delta=None, unique=None) -> RunArtifacts:
    """Load, validate, simulate and write every output of one scenario.

    Raises ``ConfigError`` for bad input and ``SimulationAbort`` when a
    tracked run fails.
    """
    cfg = config if isinstance(config, ScenarioConfig) else load_config(resolve_config(config))
    cfg = cfg.with_overrides(seed=seed, delta=delta, unique=unique)
    result = simulate_scenario(cfg)
    return write_artifacts(result, out_dir)


# -- batch --------------------------------------------------------------------


@dataclass(frozen=True)
class BatchSummary:
    rows: tuple[dict, ...]
    failures: tuple[dict, ...]
    totals: dict

    @property
    def exit_code(self) -> int:
        return 3 if self.failures else 0

    def to_dict(self) -> dict:
        return {"rows": list(self.rows), "totals": self.totals, "failures": list(self.failures)}

    def to_text(self) -> str:
        head = f"{'road_scene':<18} {'lighting':<42} {'scenario':<20} {'pairs':>6} {'frames':>6} {'yield':>6} {'mean_m':>8} {'p95_m':>8}"
        lines = [head, "-" * len(head)]

        def fmt(r):
            pe = r["position_error_m"]
            mean = f"{pe['mean']:.4f}" if pe else "-"
            p95 = f"{pe['p95']:.4f}" if pe else "-"
            return (
                f"{r['road_scene']:<18} {r['lighting']:<42} {r['scenario_id']:<20} {r['n_pairs']:>6} "
                f"{r['total_day_frames']:>6} {r['match_yield']:>6.3f} {mean:>8} {p95:>8}"
            )

        lines.extend(fmt(r) for r in self.rows)
        lines.append("-" * len(head))
        lines.append(fmt(self.totals))
        for f in self.failures:
            lines.append(f"FAILED {f['config']}: {f['error']}")
        return "\n".join(lines) + "\n"


def batch_run(directory, out_dir="out", seed=None, delta=None, unique=None) -> BatchSummary:
    """Run every ``*.yaml`` in ``directory``; failures are recorded, not raised."""
    configs = sorted(Path(directory).glob("*.yaml"))
    if not configs:
        raise ConfigError(f"no *.yaml scenario files in {directory}")
    rows, failures, errors = [], [], []
    for path in configs:
        try:
            art = run_scenario(path, out_dir, seed=seed, delta=delta, unique=unique)
        except (ConfigError, SimulationAbort) as exc:
            log.warning("%s failed: %s", path, exc)
            failures.append({"config": str(path), "error": str(exc), "stage": getattr(exc, "stage", "config")})
            continue
        res = art.result
        rep = res.report
        rows.append(
            {
                "scenario_id": art.scenario_id,
                "road_scene": res.config.tags.road_scene,
                "lighting": res.config.tags.lighting,
                "n_pairs": rep.n_pairs,
                "total_day_frames": rep.total_day_frames,
                "match_yield": rep.match_yield,
                "position_error_m": rep.position_error,
                "manifest": str(art.manifest),
            }
        )
        errors.extend(p.position_error for p in res.kept)
    rows.sort(key=lambda r: (r["road_scene"], r["lighting"], r["scenario_id"]))
    n_pairs = sum(r["n_pairs"] for r in rows)
    frames = sum(r["total_day_frames"] for r in rows)
    totals = {
        "scenario_id": "TOTAL",
        "road_scene": "",
        "lighting": "",
        "n_pairs": n_pairs,
        "total_day_frames": frames,
        "match_yield": n_pairs / frames if frames else 0.0,
        "position_error_m": error_stats(np.asarray(errors)),
    }
    summary = BatchSummary(tuple(rows), tuple(failures), totals)
    write_atomic(Path(out_dir) / "batch_summary.txt", summary.to_text())
    write_atomic(Path(out_dir) / "batch_summary.json", json.dumps(summary.to_dict(), indent=2) + "\n")
    return summary
