"""End-to-end submap SLAM loop over a simulated run, plus run configuration."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import sim
from .factor_graph import (LidarFactor, Problem, RelativePoseFactor, SolverConfig,
                           information_from_sigmas, optimize)
from .geometry import Pose, relative
from .occupancy import SensorModelParams, export_slice, integrate_scan
from .submapping import (CompletionEvent, LiveFrameEvent, SubmapConfig, SubmapRegistry, deskew,
                         overlap_ratio, wire_factors)

METRICS_VERSION = 1


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, frame: int | None, cause: Exception):
        self.stage = stage
        self.frame = frame
        where = f" at frame {frame}" if frame is not None else ""
        super().__init__(f"[{stage}]{where}: {type(cause).__name__}: {cause}")


@dataclass
class TrajectoryConfig:
    kind: str = "rectangle"  # rectangle | line
    width: float = 18.0
    height: float = 12.0
    length: float = 20.0
    z: float = 1.5
    speed: float = 1.0
    yaw_amplitude: float = 0.0
    yaw_period: float = 20.0


@dataclass
class SceneConfig:
    kind: str = "loop_hall"  # loop_hall | box_room | corridor | file
    path: str = ""
    length: float = 26.0
    width: float = 20.0
    height: float = 4.0
    seed: int = 0


@dataclass
class PipelineConfig:
    window: int = 5
    frame_rate: float = 5.0
    downsample: int = 1
    odom_sigma_t: float = 0.01
    odom_sigma_theta: float = 0.002
    backend: str = ""
    final_batch: bool = True
    export_slices: bool = True
    slice_height: float = 0.0
    save_submaps: bool = True


@dataclass
class RunConfig:
    seed: int = 0
    output: str = ""
    scene: SceneConfig = field(default_factory=SceneConfig)
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    lidar: sim.LidarModel = field(default_factory=sim.LidarModel)
    drift: sim.DriftModel = field(default_factory=sim.DriftModel)
    sensor: SensorModelParams = field(default_factory=SensorModelParams)
    solver: SolverConfig = field(default_factory=SolverConfig)
    submap: SubmapConfig = field(default_factory=SubmapConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)

    def as_dict(self) -> dict:
        d = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                v = {k: x for k, x in dataclasses.asdict(v).items() if k != "params"}
            d[f.name] = v
        return d


_SECTIONS = {"scene": SceneConfig, "trajectory": TrajectoryConfig, "lidar": sim.LidarModel,
             "drift": sim.DriftModel, "sensor": SensorModelParams, "solver": SolverConfig,
             "submap": SubmapConfig, "pipeline": PipelineConfig}


def _coerce(text: str, default):
    if isinstance(default, bool):
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return tuple(float(x) for x in text.replace(",", " ").split())
    return text.strip()


def config_from_mapping(doc: dict[str, dict[str, str]], base: RunConfig | None = None) -> RunConfig:
    """Build a :class:`RunConfig` from ``{section: {key: text}}``; unknown keys are errors."""
    cfg = base or RunConfig()
    updates = {}
    for section, items in doc.items():
        if section in ("run", "DEFAULT"):
            for key, text in items.items():
                if key == "seed":
                    cfg = dataclasses.replace(cfg, seed=int(text))
                elif key == "output":
                    cfg = dataclasses.replace(cfg, output=str(text))
                else:
                    raise ConfigError(f"unknown key [run] {key}")
            continue
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        current = getattr(cfg, section)
        names = {f.name: f for f in dataclasses.fields(current)}
        kw = {}
        for key, text in items.items():
            if key not in names or key == "params":
                raise ConfigError(f"unknown key [{section}] {key}")
            try:
                kw[key] = _coerce(str(text), getattr(current, key))
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from exc
        try:
            updates[section] = dataclasses.replace(current, **kw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"[{section}]: {exc}") from exc
    cfg = dataclasses.replace(cfg, **updates)
    try:
        cfg = dataclasses.replace(cfg, submap=dataclasses.replace(cfg.submap, params=cfg.sensor))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig):
    ratio = cfg.submap.dimension / cfg.submap.resolution
    n = int(round(ratio))
    if abs(ratio - n) > 1e-6 * ratio or n < 8 or n & (n - 1):
        raise ConfigError("submap dimension / resolution must be a power of two >= 8")
    if cfg.pipeline.window < 1 or cfg.pipeline.frame_rate <= 0 or cfg.pipeline.downsample < 1:
        raise ConfigError("window, frame_rate and downsample must be positive")
    if cfg.scene.kind == "file" and not Path(cfg.scene.path).is_file():
        raise ConfigError(f"scene file {cfg.scene.path!r} does not exist")
    if cfg.scene.kind not in ("loop_hall", "box_room", "corridor", "file"):
        raise ConfigError(f"unknown scene kind {cfg.scene.kind!r}")
    if cfg.trajectory.kind not in ("rectangle", "line"):
        raise ConfigError(f"unknown trajectory kind {cfg.trajectory.kind!r}")
    if cfg.trajectory.speed <= 0:
        raise ConfigError("trajectory speed must be positive")


def load_config(path, overrides: dict[str, dict[str, str]] | None = None) -> RunConfig:
    """Read an INI-style key-value file (sections as in :class:`RunConfig`)."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    doc = {s: dict(cp.items(s)) for s in cp.sections()}
    for s, items in (overrides or {}).items():
        doc.setdefault(s, {}).update(items)
    return config_from_mapping(doc)


def write_config(cfg: RunConfig, path):
    cp = configparser.ConfigParser(interpolation=None)
    cp["run"] = {"seed": str(cfg.seed), "output": cfg.output}
    for section in _SECTIONS:
        v = getattr(cfg, section)
        items = {}
        for f in dataclasses.fields(v):
            if f.name == "params":
                continue
            x = getattr(v, f.name)
            items[f.name] = " ".join(repr(float(a)) for a in x) if isinstance(x, tuple) else str(x)
        cp[section] = items
    with open(path, "w") as fh:
        cp.write(fh)


def config_with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    return dataclasses.replace(
        cfg, seed=seed,
        lidar=dataclasses.replace(cfg.lidar, seed=seed),
        drift=dataclasses.replace(cfg.drift, seed=seed),
    )


# ---------------------------------------------------------------------------
# scenario construction
# ---------------------------------------------------------------------------


def build_scene(cfg: RunConfig) -> sim.Scene:
    s = cfg.scene
    if s.kind == "file":
        return sim.Scene.load(s.path)
    if s.kind == "box_room":
        return sim.box_room((s.length, s.width, s.height), (0.0, 0.0, 0.5 * s.height))
    if s.kind == "corridor":
        return sim.corridor(s.length, s.width, s.height)
    return sim.loop_hall(s.length, s.width, s.height, seed=s.seed)


def build_trajectory(cfg: RunConfig) -> sim.Trajectory:
    t = cfg.trajectory
    kw = dict(speed=t.speed, yaw_amplitude=t.yaw_amplitude, yaw_period=t.yaw_period)
    if t.kind == "line":
        return sim.polyline_trajectory([(0.0, 0.0, t.z), (t.length, 0.0, t.z)], **kw)
    return sim.rectangle_loop(t.width, t.height, t.z, **kw)


def simulate(cfg: RunConfig) -> sim.SimulatedRun:
    return sim.simulate_run(build_scene(cfg), build_trajectory(cfg), cfg.lidar, cfg.drift,
                            cfg.pipeline.frame_rate)


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    metrics: dict
    timings: dict
    causal: list
    final: list
    odometry: list
    frame_times: np.ndarray
    gt: list
    registry: SubmapRegistry
    problem: Problem


def _odometry_information(rel: Pose, pc: PipelineConfig) -> np.ndarray:
    d = max(float(np.linalg.norm(rel.translation)), 1e-3)
    return information_from_sigmas(pc.odom_sigma_t * math.sqrt(d), pc.odom_sigma_theta * math.sqrt(d))


def run_pipeline(cfg: RunConfig, run: sim.SimulatedRun | None = None, output=None,
                 event_stream=None) -> RunResult:
    """Process a simulated run frame by frame; writes outputs if ``output`` is set."""
    stage = "simulate"
    frame = None
    t_start = time.perf_counter()
    tm = {"deskew": 0.0, "live_optimize": 0.0, "integrate": 0.0, "overlap": 0.0,
          "completion_optimize": 0.0, "final_optimize": 0.0, "total": 0.0}
    try:
        if run is None:
            run = simulate(cfg)
        pc = cfg.pipeline
        backend = pc.backend or None
        registry = SubmapRegistry(dataclasses.replace(cfg.submap, params=cfg.sensor), backend=backend,
                                  event_stream=event_stream)
        problem = Problem()
        causal = []
        cost_traces = {"completion": [], "final": []}
        n_frames = len(run.frame_times)
        since_keyframe = 0
        dist_since_keyframe = 0.0

        stage = "init"
        frame = 0
        s0 = problem.add_state(run.frame_times[0], run.gt_poses[0], "submap_anchor", fixed=True)
        entry = registry.create(s0)
        causal.append(run.gt_poses[0])

        for k in range(n_frames):
            frame = k
            if k > 0:
                stage = "predict"
                odom = run.odometry[k - 1]
                prev = problem.pose(k - 1)
                sid = problem.add_state(run.frame_times[k], prev @ odom, "live")
                problem.add_factor(RelativePoseFactor(k - 1, sid, odom, _odometry_information(odom, pc)))
                dist_since_keyframe += float(np.linalg.norm(odom.translation))
                since_keyframe += 1
            stage = "deskew"
            t0 = time.perf_counter()
            ta, tb = run.scan_windows[k]
            pa = problem.pose(k - 1) if k > 0 else problem.pose(0)
            scan = deskew(run.scans[k], [ta, tb], [pa, problem.pose(k)], t_ref=tb)
            scan = scan.subsample(pc.downsample)
            tm["deskew"] += time.perf_counter() - t0

            if k > 0:
                stage = "live_factor"
                wire_factors(registry, problem, LiveFrameEvent(k, scan.points), seed=cfg.seed)
                stage = "live_optimize"
                t0 = time.perf_counter()
                free = [i for i in range(max(1, k - pc.window + 1), k + 1)]
                res = optimize(problem, cfg.solver, free_states=free)
                problem.set_poses({i: res.poses[i] for i in free})
                tm["live_optimize"] += time.perf_counter() - t0
                causal.append(problem.pose(k))
                if since_keyframe >= cfg.submap.keyframe_every or \
                        dist_since_keyframe >= cfg.submap.keyframe_distance:
                    problem.states[k].role = "keyframe"
                    since_keyframe = 0
                    dist_since_keyframe = 0.0

            if len(scan) == 0:
                continue
            stage = "overlap"
            t0 = time.perf_counter()
            entry = registry.active
            T_MS = relative(problem.pose(entry.anchor_state_id), problem.pose(k))
            if k > entry.anchor_state_id:
                ratio = overlap_ratio(entry.submap, T_MS, scan, cfg.submap.overlap_level)
                decision = registry.maybe_spawn(ratio, k)
            else:
                decision = None
            tm["overlap"] += time.perf_counter() - t0

            stage = "integrate"
            t0 = time.perf_counter()
            if decision is not None and decision.spawn:
                problem.states[k].role = "submap_anchor"
                since_keyframe = 0
                dist_since_keyframe = 0.0
                entry = decision.created
                T_MS = Pose.identity()
            integrate_scan(entry.submap, T_MS, scan)
            registry.add_to_buffer(T_MS.transform(scan.points))
            tm["integrate"] += time.perf_counter() - t0

            if decision is not None and decision.spawn:
                stage = "completion"
                t0 = time.perf_counter()
                wire_factors(registry, problem, CompletionEvent(decision.completed, decision.buffer),
                             seed=cfg.seed)
                res = optimize(problem, cfg.solver)
                problem.set_poses(res.poses)
                cost_traces["completion"].append(res.cost_trace)
                tm["completion_optimize"] += time.perf_counter() - t0

        stage = "finish"
        frame = None
        done, buf = registry.complete_active()
        wire_factors(registry, problem, CompletionEvent(done, buf), seed=cfg.seed)
        t0 = time.perf_counter()
        if pc.final_batch:
            res = optimize(problem, cfg.solver)
            problem.set_poses(res.poses)
            cost_traces["final"] = res.cost_trace
        tm["final_optimize"] = time.perf_counter() - t0
        final = [problem.pose(i) for i in range(n_frames)]
        odo = sim.integrate_odometry(run.gt_poses[0], run.odometry)

        stage = "metrics"
        metrics = build_metrics(cfg, run, registry, problem, causal, final, odo, cost_traces)
        tm["total"] = time.perf_counter() - t_start
        tm["per_frame"] = tm["total"] / n_frames
        result = RunResult(metrics, tm, causal, final, odo, run.frame_times, run.gt_poses, registry, problem)
        if output is not None:
            stage = "write"
            write_outputs(cfg, result, output)
        return result
    except (ConfigError, StageError):
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage tag
        raise StageError(stage, frame, exc) from exc


def scene_fingerprint(scene: sim.Scene) -> str:
    return hashlib.sha256(json.dumps(scene.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def build_metrics(cfg, run, registry, problem, causal, final, odo, cost_traces) -> dict:
    gt = run.gt_poses
    a_final = sim.ate(final, gt)
    a_causal = sim.ate(causal, gt)
    a_odo = sim.ate(odo, gt)
    n_vox = registry.entries[0].submap.n_vox
    kinds = {"relative_pose": 0, "frame_to_map": 0, "map_to_map": 0}
    for f in problem.factors:
        kinds["relative_pose" if isinstance(f, RelativePoseFactor) else f.kind] += 1
    m2m = [[f.state_a, f.state_b] for f in problem.factors
           if isinstance(f, LidarFactor) and f.kind == "map_to_map"]
    return {
        "version": METRICS_VERSION,
        "seed": cfg.seed,
        "scene": scene_fingerprint(run.scene),
        "frames": len(run.frame_times),
        "trajectory_length": float(sum(np.linalg.norm(relative(a, b).translation)
                                       for a, b in zip(gt[:-1], gt[1:]))),
        "resolution": cfg.submap.resolution,
        "dimension": cfg.submap.dimension,
        "voxels_per_edge": n_vox,
        "octree_depth": int(round(math.log2(n_vox))),
        "submaps": [{"id": e.id, "anchor": e.anchor_state_id, "blocks": e.submap.n_blocks,
                     "checksum": e.checksum} for e in registry.entries],
        "factors": kinds,
        "map_to_map_pairs": m2m,
        "ate_final": a_final.rmse,
        "ate_causal": a_causal.rmse,
        "ate_odometry": a_odo.rmse,
        "score_final": sim.hilti_score(a_final.errors),
        "score_causal": sim.hilti_score(a_causal.errors),
        "score_odometry": sim.hilti_score(a_odo.errors),
        "improvement_factor": a_odo.rmse / a_final.rmse if a_final.rmse > 0 else math.inf,
        "cost_traces": cost_traces,
    }


def write_outputs(cfg: RunConfig, result: RunResult, output):
    out = Path(output)
    out.mkdir(parents=True, exist_ok=True)
    t = result.frame_times
    sim.write_tum(out / "trajectory_causal.tum", t, result.causal)
    sim.write_tum(out / "trajectory_final.tum", t, result.final)
    sim.write_tum(out / "trajectory_odometry.tum", t, result.odometry)
    sim.write_tum(out / "groundtruth.tum", t, result.gt)
    (out / "metrics.json").write_text(json.dumps(result.metrics, indent=1, sort_keys=True))
    (out / "timings.json").write_text(json.dumps(result.timings, indent=1, sort_keys=True))
    with open(out / "events.jsonl", "w") as fh:
        for ev in result.registry.events:
            fh.write(json.dumps(ev, sort_keys=True) + "\n")
    write_config(cfg, out / "config.ini")
    pc = cfg.pipeline
    if pc.save_submaps or pc.export_slices:
        (out / "submaps").mkdir(exist_ok=True)
    for e in result.registry.entries:
        if pc.save_submaps:
            e.submap.save(out / "submaps" / f"submap_{e.id:03d}.npz")
        if pc.export_slices:
            export_slice(e.submap, pc.slice_height, out / "submaps" / f"slice_{e.id:03d}")


# ---------------------------------------------------------------------------
# run comparison
# ---------------------------------------------------------------------------


class IncomparableRuns(ValueError):
    pass


@dataclass
class Comparison:
    rows: list  # (name, baseline, candidate, delta)
    regression: bool
    improvement_factor: float

    def table(self) -> str:
        lines = [f"{'metric':<22}{'baseline':>14}{'candidate':>14}{'delta':>14}"]
        for name, b, c, d in self.rows:
            lines.append(f"{name:<22}{b:>14.6g}{c:>14.6g}{d:>+14.6g}")
        lines.append(f"ATE improvement factor (baseline/candidate): {self.improvement_factor:.4g}")
        lines.append("REGRESSION" if self.regression else "no regression")
        return "\n".join(lines)


def compare_runs(baseline: dict, candidate: dict, base_timings: dict | None = None,
                 cand_timings: dict | None = None, ate_tolerance: float = 0.1) -> Comparison:
    """Side-by-side deltas; a regression is an ATE worse than baseline by more than ``ate_tolerance`` (relative)."""
    for key in ("seed", "scene"):
        if baseline.get(key) != candidate.get(key):
            raise IncomparableRuns(f"runs differ in {key}: {baseline.get(key)!r} vs {candidate.get(key)!r}")
    rows = []
    for key in ("ate_final", "ate_causal", "ate_odometry", "score_final", "score_causal"):
        if key in baseline and key in candidate:
            b, c = float(baseline[key]), float(candidate[key])
            rows.append((key, b, c, c - b))
    if base_timings and cand_timings:
        for key in ("per_frame", "total", "live_optimize", "integrate"):
            if key in base_timings and key in cand_timings:
                b, c = float(base_timings[key]), float(cand_timings[key])
                rows.append((f"time_{key}", b, c, c - b))
    b_ate, c_ate = float(baseline["ate_final"]), float(candidate["ate_final"])
    regression = c_ate > b_ate * (1.0 + ate_tolerance) + 1e-12
    factor = b_ate / c_ate if c_ate > 0 else (1.0 if b_ate == 0 else math.inf)
    return Comparison(rows, regression, factor)


def odometry_only_metrics(metrics: dict) -> dict:
    """View of a report as if the odometry-only trajectory were the estimate."""
    out = dict(metrics)
    out["ate_final"] = metrics["ate_odometry"]
    out["ate_causal"] = metrics["ate_odometry"]
    out["score_final"] = metrics["score_odometry"]
    out["score_causal"] = metrics["score_odometry"]
    return out


__all__ = ["ConfigError", "RunConfig", "RunResult", "StageError", "compare_runs", "load_config",
           "run_pipeline", "simulate"]
