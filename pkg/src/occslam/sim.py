"""Synthetic worlds: analytic scenes, LiDAR raycasting, trajectories, drifting
odometry, trajectory error metrics, and the text formats used on disk."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .geometry import (Pose, Rotation, exp_so3, interpolate_poses, quat_from_matrix,
                       relative)
from .submapping import LidarScan

# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------

_EPS = 1e-9


@dataclass(frozen=True)
class Box:
    """Box with half extents ``size/2`` at ``pose``; ``hollow`` boxes are rooms seen from inside."""

    size: tuple
    pose: Pose = field(default_factory=Pose)
    hollow: bool = False

    def intersect(self, o, d):
        inv = self.pose.inverse()
        ol = inv.transform(o)
        dl = d @ inv.rotation.matrix.T
        half = 0.5 * np.asarray(self.size, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-half - ol) / dl
            t2 = (half - ol) / dl
        lo_t = np.minimum(t1, t2)
        hi_t = np.maximum(t1, t2)
        par = dl == 0
        slab = np.abs(ol) <= half
        lo_t = np.where(par, np.where(slab, -np.inf, np.inf), lo_t)
        hi_t = np.where(par, np.where(slab, np.inf, -np.inf), hi_t)
        tn = lo_t.max(axis=1)
        tf = hi_t.min(axis=1)
        hit = tn <= tf
        return tn, tf, hit

    def contains(self, p) -> np.ndarray:
        q = self.pose.inverse().transform(np.atleast_2d(p))
        return np.all(np.abs(q) < 0.5 * np.asarray(self.size), axis=1)

    def distance_to_surface(self, p) -> np.ndarray:
        q = np.abs(self.pose.inverse().transform(np.atleast_2d(p))) - 0.5 * np.asarray(self.size)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return np.abs(outside + inside)


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    hollow: bool = False

    def intersect(self, o, d):
        oc = o - np.asarray(self.center, dtype=float)
        b = np.sum(oc * d, axis=1)
        c = np.sum(oc * oc, axis=1) - self.radius**2
        disc = b * b - c
        hit = disc >= 0
        s = np.sqrt(np.where(hit, disc, 0.0))
        return -b - s, -b + s, hit

    def contains(self, p) -> np.ndarray:
        return np.linalg.norm(np.atleast_2d(p) - np.asarray(self.center), axis=1) < self.radius

    def distance_to_surface(self, p) -> np.ndarray:
        return np.abs(np.linalg.norm(np.atleast_2d(p) - np.asarray(self.center), axis=1) - self.radius)


@dataclass(frozen=True)
class Plane:
    """Infinite plane through ``point`` with normal ``normal``."""

    point: tuple
    normal: tuple

    def intersect(self, o, d):
        n = np.asarray(self.normal, dtype=float)
        n = n / np.linalg.norm(n)
        den = d @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((np.asarray(self.point, dtype=float) - o) @ n) / den
        hit = np.abs(den) > 1e-12
        return t, t, hit

    def contains(self, p) -> np.ndarray:
        return np.zeros(len(np.atleast_2d(p)), dtype=bool)

    def distance_to_surface(self, p) -> np.ndarray:
        n = np.asarray(self.normal, dtype=float)
        n = n / np.linalg.norm(n)
        return np.abs((np.atleast_2d(p) - np.asarray(self.point)) @ n)


@dataclass(frozen=True)
class Scene:
    primitives: tuple
    name: str = "scene"

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.full(3, np.inf)
        hi = np.full(3, -np.inf)
        for p in self.primitives:
            if isinstance(p, Box):
                corners = np.array(np.meshgrid(*[[-0.5 * s, 0.5 * s] for s in p.size])).reshape(3, -1).T
                c = p.pose.transform(corners)
            elif isinstance(p, Sphere):
                c = np.array([np.asarray(p.center) - p.radius, np.asarray(p.center) + p.radius])
            else:
                continue
            lo = np.minimum(lo, c.min(axis=0))
            hi = np.maximum(hi, c.max(axis=0))
        return lo, hi

    def cast(self, origins, directions) -> tuple[np.ndarray, np.ndarray]:
        """Nearest hit distance per ray; ``(t, inside_solid)``; ``t = inf`` on a miss."""
        o = np.atleast_2d(np.asarray(origins, dtype=float))
        d = np.atleast_2d(np.asarray(directions, dtype=float))
        o = np.broadcast_to(o, d.shape)
        best = np.full(len(d), np.inf)
        inside = np.zeros(len(d), dtype=bool)
        for p in self.primitives:
            tn, tf, hit = p.intersect(o, d)
            if not isinstance(p, Plane) and not p.hollow:
                inside |= hit & (tn < _EPS) & (tf > _EPS)
            t = np.where(hit & (tn > _EPS), tn, np.where(hit & (tf > _EPS), tf, np.inf))
            best = np.minimum(best, t)
        best[inside] = 0.0
        return best, inside

    def distance_to_surface(self, points) -> np.ndarray:
        return np.min([p.distance_to_surface(points) for p in self.primitives], axis=0)

    # ------------------------------------------------------------------- I/O

    def to_dict(self) -> dict:
        prims = []
        for p in self.primitives:
            if isinstance(p, Box):
                prims.append({"type": "box", "size": list(map(float, p.size)),
                              "pose": p.pose.as_vector().tolist(), "hollow": p.hollow})
            elif isinstance(p, Sphere):
                prims.append({"type": "sphere", "center": list(map(float, p.center)),
                              "radius": float(p.radius), "hollow": p.hollow})
            else:
                prims.append({"type": "plane", "point": list(map(float, p.point)),
                              "normal": list(map(float, p.normal))})
        return {"format": "occslam-scene", "version": 1, "name": self.name, "primitives": prims}

    @classmethod
    def from_dict(cls, doc: dict) -> "Scene":
        prims = []
        for p in doc["primitives"]:
            kind = p["type"]
            if kind == "box":
                pose = Pose.from_vector(p["pose"]) if "pose" in p else Pose(translation=p.get("center", (0, 0, 0)))
                prims.append(Box(tuple(p["size"]), pose, bool(p.get("hollow", False))))
            elif kind == "sphere":
                prims.append(Sphere(tuple(p["center"]), float(p["radius"]), bool(p.get("hollow", False))))
            elif kind == "plane":
                prims.append(Plane(tuple(p["point"]), tuple(p["normal"])))
            else:
                raise ValueError(f"unknown primitive type {kind!r}")
        if not prims:
            raise ValueError("scene has no primitives")
        return cls(tuple(prims), doc.get("name", "scene"))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "Scene":
        return cls.from_dict(json.loads(Path(path).read_text()))


def box_room(size=(10.0, 10.0, 10.0), center=(0.0, 0.0, 0.0)) -> Scene:
    return Scene((Box(tuple(size), Pose(translation=center), hollow=True),), "box_room")


def loop_hall(length=26.0, width=20.0, height=4.0, pillar=0.6, seed=0) -> Scene:
    """Hall with a floor, ceiling, walls and a few pillars and crates for texture."""
    rng = np.random.default_rng(seed)
    prims = [Box((length, width, height), Pose(translation=(0, 0, 0.5 * height)), hollow=True)]
    for x in np.linspace(-0.3 * length, 0.3 * length, 4):
        for y in (-0.2 * width, 0.2 * width):
            prims.append(Box((pillar, pillar, height), Pose(translation=(x, y, 0.5 * height))))
    for _ in range(10):
        c = rng.uniform([-0.45 * length, -0.45 * width, 0.0], [0.45 * length, 0.45 * width, 0.0])
        s = rng.uniform(0.4, 1.2, size=3)
        yaw = rng.uniform(0, np.pi)
        c[2] = 0.5 * s[2]
        prims.append(Box(tuple(s), Pose(exp_so3((0, 0, yaw)), c)))
    return Scene(tuple(prims), "loop_hall")


def corridor(length=40.0, width=3.0, height=3.0) -> Scene:
    return Scene((Box((length, width, height), Pose(translation=(0.5 * length - 2.0, 0, 0.5 * height)),
                      hollow=True),), "corridor")


# ---------------------------------------------------------------------------
# LiDAR model and raycasting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LidarModel:
    """``spinning``: ``n_beams`` rows over ``vfov`` degrees, full turn per scan.
    ``dual_axis``: one beam on a fast azimuth and slow elevation sweep."""

    pattern: str = "spinning"
    n_beams: int = 16
    vfov: tuple = (-15.0, 15.0)
    rate: float = 100_000.0
    max_range: float = 30.0
    min_range: float = 0.3
    sigma_range: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.pattern not in ("spinning", "dual_axis"):
            raise ValueError(f"unknown LiDAR pattern {self.pattern!r}")
        if not self.rate > 0:
            raise ValueError("rate must be positive")
        if self.sigma_range < 0:
            raise ValueError("sigma_range must be non-negative")

    def directions(self, t0: float, t1: float) -> tuple[np.ndarray, np.ndarray]:
        """Unit beam directions in L and their firing timestamps."""
        n = max(int(round(self.rate * (t1 - t0))), 1)
        lo, hi = np.radians(self.vfov[0]), np.radians(self.vfov[1])
        if self.pattern == "spinning":
            n_fire = max(n // self.n_beams, 1)
            k = np.arange(n_fire)
            times = t0 + (k + 0.5) / n_fire * (t1 - t0)
            az = 2.0 * np.pi * (k + 0.5) / n_fire
            el = np.linspace(lo, hi, self.n_beams) if self.n_beams > 1 else np.array([0.5 * (lo + hi)])
            az, el = np.meshgrid(az, el, indexing="ij")
            times = np.repeat(times, len(el[0]))
            az = az.ravel()
            el = el.ravel()
        else:
            k = np.arange(n)
            times = t0 + (k + 0.5) / n * (t1 - t0)
            az = 2.0 * np.pi * 37.0 * (k + 0.5) / n
            el = lo + (hi - lo) * 0.5 * (1.0 - np.cos(np.pi * 3.0 * (k + 0.5) / n))
        d = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=1)
        return d, times


PoseTrack = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]


def raycast(scene: Scene, T_WL, model: LidarModel, t0: float, t1: float, scan_index: int = 0,
            T_SL: Pose | None = None) -> LidarScan:
    """Simulate one sweep. ``T_WL`` is a fixed pose or a track ``times -> (R, t)``."""
    if not t1 > t0:
        raise ValueError("scan window must satisfy t1 > t0")
    d_L, times = model.directions(t0, t1)
    if isinstance(T_WL, Pose):
        R = np.broadcast_to(T_WL.rotation.matrix, (len(times), 3, 3))
        o = np.broadcast_to(T_WL.translation, (len(times), 3))
    else:
        R, o = T_WL(times)
    d_W = np.einsum("nij,nj->ni", R, d_L)
    t, inside = scene.cast(o, d_W)
    if np.any(inside):
        warnings.warn(f"{int(inside.sum())} rays start inside a solid primitive; dropped", RuntimeWarning,
                      stacklevel=2)
    rng = np.random.default_rng([model.seed, scan_index])
    noise = rng.normal(0.0, model.sigma_range, size=len(t)) if model.sigma_range > 0 else np.zeros(len(t))
    keep = np.isfinite(t) & ~inside & (t <= model.max_range) & (t >= model.min_range)
    rng_m = t + noise
    keep &= rng_m > 0
    pts = d_L[keep] * rng_m[keep, None]
    return LidarScan(pts, times[keep], T_SL or Pose.identity())


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    """Densely sampled ground-truth track of ``T_WS``."""

    times: np.ndarray
    poses: list

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if len(self.times) != len(self.poses) or np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing and match the poses")

    @property
    def t0(self) -> float:
        return float(self.times[0])

    @property
    def t1(self) -> float:
        return float(self.times[-1])

    def track(self, times) -> tuple[np.ndarray, np.ndarray]:
        R, t, _ = interpolate_poses(self.times, self.poses, times)
        return R, t

    def at(self, t: float) -> Pose:
        R, tr = self.track(np.array([t]))
        return Pose(Rotation(quat_from_matrix(R[0])), tr[0])

    def sensor_track(self, T_SL: Pose) -> PoseTrack:
        def f(times):
            R, t = self.track(times)
            return R @ T_SL.rotation.matrix, t + R @ T_SL.translation

        return f

    def length(self) -> float:
        p = np.array([q.translation for q in self.poses])
        return float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum())


def polyline_trajectory(waypoints, speed: float = 1.0, dt: float = 0.01, yaw_amplitude: float = 0.0,
                        yaw_period: float = 10.0, t0: float = 0.0) -> Trajectory:
    """Constant-speed motion through ``waypoints`` with an optional yaw oscillation."""
    w = np.asarray(waypoints, dtype=float)
    seg = np.linalg.norm(np.diff(w, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total_t = cum[-1] / speed
    n = int(math.ceil(total_t / dt)) + 1
    times = t0 + np.linspace(0.0, total_t, n)
    s = (times - t0) * speed
    pos = np.stack([np.interp(s, cum, w[:, i]) for i in range(3)], axis=1)
    yaw = yaw_amplitude * np.sin(2.0 * np.pi * (times - t0) / yaw_period)
    poses = [Pose(exp_so3((0.0, 0.0, a)), p) for a, p in zip(yaw, pos)]
    return Trajectory(times, poses)


def rectangle_loop(width: float = 18.0, height: float = 12.0, z: float = 1.5, **kw) -> Trajectory:
    hx, hy = 0.5 * width, 0.5 * height
    wp = [(-hx, -hy, z), (hx, -hy, z), (hx, hy, z), (-hx, hy, z), (-hx, -hy, z)]
    return polyline_trajectory(wp, **kw)


# ---------------------------------------------------------------------------
# drifting odometry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DriftModel:
    """Random walk (per sqrt metre) plus constant bias (per metre) in the body frame."""

    sigma_t: float = 0.0
    sigma_theta: float = 0.0
    bias_t: tuple = (0.0, 0.0, 0.0)
    bias_yaw: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma_t < 0 or self.sigma_theta < 0:
            raise ValueError("noise levels must be non-negative")


def drift_odometry(gt_poses: Sequence[Pose], drift: DriftModel) -> list[Pose]:
    """Measured relative poses ``T_{k-1,k}`` corrupted by the drift model."""
    if len(gt_poses) < 2:
        raise ValueError("need at least two states")
    rng = np.random.default_rng(drift.seed)
    bias = np.asarray(drift.bias_t, dtype=float)
    out = []
    for a, b in zip(gt_poses[:-1], gt_poses[1:]):
        rel = relative(a, b)
        dist = float(np.linalg.norm(rel.translation))
        nt = rng.normal(0.0, 1.0, 3) * drift.sigma_t * math.sqrt(dist)
        nr = rng.normal(0.0, 1.0, 3) * drift.sigma_theta * math.sqrt(dist)
        dalpha = nr + np.array([0.0, 0.0, drift.bias_yaw * dist])
        rot = exp_so3(dalpha) @ rel.rotation if np.any(dalpha) else rel.rotation
        out.append(Pose(rot, rel.translation + bias * dist + nt))
    return out


def integrate_odometry(start: Pose, relatives: Sequence[Pose]) -> list[Pose]:
    poses = [start]
    for r in relatives:
        poses.append(poses[-1] @ r)
    return poses


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


class AlignmentError(ValueError):
    pass


@dataclass
class AteResult:
    rmse: float
    errors: np.ndarray
    alignment: Pose


def umeyama_se3(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Rigid transform ``T`` minimising ``sum |T src_i - dst_i|^2`` (no scale)."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s) / len(src)
    U, _, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return Pose(Rotation(quat_from_matrix(R)), mu_d - R @ mu_s)


def _positions(traj) -> np.ndarray:
    if isinstance(traj, np.ndarray):
        return np.asarray(traj, dtype=float).reshape(-1, 3)
    return np.array([p.translation if isinstance(p, Pose) else p for p in traj], dtype=float)


def ate(estimate, ground_truth) -> AteResult:
    """RMSE of positions after SE(3) alignment of ``estimate`` onto ``ground_truth``."""
    est = _positions(estimate)
    gt = _positions(ground_truth)
    if est.shape != gt.shape:
        raise AlignmentError("estimate and ground truth must have matching samples")
    if len(est) < 3:
        raise AlignmentError("alignment needs at least 3 correspondences")
    T = umeyama_se3(est, gt)
    err = np.linalg.norm(T.transform(est) - gt, axis=1)
    return AteResult(float(np.sqrt(np.mean(err**2))), err, T)


def point_score(errors) -> np.ndarray:
    """10 below 1 cm, 0 above 10 cm, linear in between."""
    e = np.asarray(errors, dtype=float)
    return np.clip(10.0 * (0.10 - e) / 0.09, 0.0, 10.0)


def hilti_score(errors) -> float:
    s = point_score(errors)
    if s.size == 0:
        return 0.0
    return float(s.sum() / (10.0 * s.size) * 100.0)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def write_tum(path, times, poses):
    with open(path, "w") as fh:
        for t, p in zip(times, poses):
            w, x, y, z = p.rotation.q
            tx, ty, tz = p.translation
            fh.write(" ".join(repr(float(v)) for v in (t, tx, ty, tz, x, y, z, w)) + "\n")


def read_tum(path) -> tuple[np.ndarray, list[Pose]]:
    times, poses = [], []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        v = [float(x) for x in line.split()]
        if len(v) != 8:
            raise ValueError(f"{path}: TUM lines need 8 fields, got {len(v)}")
        times.append(v[0])
        poses.append(Pose(Rotation(np.array([v[7], v[4], v[5], v[6]])), v[1:4]))
    return np.array(times), poses


def write_scan_csv(path, scan: LidarScan):
    data = np.column_stack([scan.timestamps, scan.points])
    with open(path, "w") as fh:
        fh.write("t,x,y,z\n")
        for row in data:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_scan_csv(path, T_SL: Pose) -> LidarScan:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.size == 0:
        return LidarScan(np.zeros((0, 3)), np.zeros(0), T_SL)
    return LidarScan(data[:, 1:4], data[:, 0], T_SL)


@dataclass
class SimulatedRun:
    frame_times: np.ndarray
    gt_poses: list
    odometry: list  # relative poses between consecutive frames
    scans: list
    T_SL: Pose
    scene: Scene
    scan_windows: list  # (t_start, t_end) of each scan; scan k ends at frame k


def simulate_run(scene: Scene, trajectory: Trajectory, lidar: LidarModel, drift: DriftModel,
                 frame_rate: float = 5.0, T_SL: Pose | None = None) -> SimulatedRun:
    T_SL = T_SL or Pose.identity()
    n = int(math.floor((trajectory.t1 - trajectory.t0) * frame_rate + 1e-9)) + 1
    times = trajectory.t0 + np.arange(n) / frame_rate
    gt = [trajectory.at(t) for t in times]
    odom = drift_odometry(gt, drift)
    track = trajectory.sensor_track(T_SL)
    # the first sweep is taken at rest before the motion starts
    windows = [(float(times[0]) - 1.0 / frame_rate, float(times[0]))]
    windows += [(float(times[k - 1]), float(times[k])) for k in range(1, n)]
    scans = [raycast(scene, track, lidar, a, b, k, T_SL) for k, (a, b) in enumerate(windows)]
    return SimulatedRun(times, gt, odom, scans, T_SL, scene, windows)


def save_run(run: SimulatedRun, out, extra: dict | None = None) -> Path:
    """Directory with gt/odometry TUM files, per-frame scan CSVs and ``manifest.json``."""
    out = Path(out)
    (out / "scans").mkdir(parents=True, exist_ok=True)
    write_tum(out / "groundtruth.tum", run.frame_times, run.gt_poses)
    odo = integrate_odometry(run.gt_poses[0], run.odometry)
    write_tum(out / "odometry.tum", run.frame_times, odo)
    names = []
    for k, scan in enumerate(run.scans):
        name = f"scans/scan_{k:05d}.csv"
        write_scan_csv(out / name, scan)
        names.append(name)
    run.scene.save(out / "scene.json")
    manifest = {"format": "occslam-run", "version": 1, "T_SL": run.T_SL.as_vector().tolist(),
                "frame_times": [float(t) for t in run.frame_times], "scans": names,
                "scan_windows": [list(w) for w in run.scan_windows],
                "groundtruth": "groundtruth.tum", "odometry": "odometry.tum", "scene": "scene.json"}
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return out


def load_run(path) -> SimulatedRun:
    path = Path(path)
    m = json.loads((path / "manifest.json").read_text())
    if m.get("format") != "occslam-run":
        raise ValueError(f"{path}: not a simulated run directory")
    T_SL = Pose.from_vector(m["T_SL"])
    _, gt = read_tum(path / m["groundtruth"])
    _, odo_abs = read_tum(path / m["odometry"])
    odom = [relative(a, b) for a, b in zip(odo_abs[:-1], odo_abs[1:])]
    scans = [read_scan_csv(path / s, T_SL) for s in m["scans"]]
    return SimulatedRun(np.array(m["frame_times"]), gt, odom, scans, T_SL, Scene.load(path / m["scene"]),
                        [tuple(w) for w in m["scan_windows"]])


def field_submap(submap, func: Callable[[np.ndarray], np.ndarray], band: Callable[[np.ndarray], np.ndarray],
                 weight: int | None = None):
    """Fill voxels where ``band(centers)`` holds with accumulated log-odds ``func(centers)``."""
    n = submap.n_vox
    w = submap.params.w_max if weight is None else weight
    for i in range(n):
        ijk = np.stack(np.meshgrid([i], np.arange(n), np.arange(n), indexing="ij"), axis=-1).reshape(-1, 3)
        c = submap.voxel_center(ijk)
        keep = band(c)
        if np.any(keep):
            submap.set_voxels(ijk[keep], func(c[keep]) / w, w)
    submap.propagate()
    return submap

