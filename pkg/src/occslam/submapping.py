"""Submap lifecycle: deskewing, overlap-based spawning, map-to-map candidate
search, residual point sampling and factor wiring."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import IO

import numpy as np

from .geometry import DeskewWindowError, Pose, interpolate_poses, relative
from .occupancy import OccupancySubmap, SensorModelParams


@dataclass
class LidarScan:
    """Points with per-point timestamps, sorted by time on construction.

    ``origins`` (same frame as ``points``) hold the sensor position at each
    point's time; ``None`` means the origin of the point frame.
    """

    points: np.ndarray
    timestamps: np.ndarray
    T_SL: Pose = field(default_factory=Pose)
    origins: np.ndarray | None = None
    dropped: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        if len(self.points) != len(self.timestamps):
            raise ValueError("one timestamp per point is required")
        if not (np.all(np.isfinite(self.points)) and np.all(np.isfinite(self.timestamps))):
            raise ValueError("scan contains non-finite values")
        order = np.argsort(self.timestamps, kind="stable")
        if np.any(order != np.arange(len(order))):
            self.points = self.points[order]
            self.timestamps = self.timestamps[order]
            if self.origins is not None:
                self.origins = np.asarray(self.origins, dtype=float).reshape(-1, 3)[order]
        if self.origins is not None:
            self.origins = np.asarray(self.origins, dtype=float).reshape(-1, 3)
            if len(self.origins) != len(self.points):
                raise ValueError("one origin per point is required")

    def __len__(self) -> int:
        return len(self.points)

    def ray_origins(self) -> np.ndarray:
        if self.origins is None:
            return np.zeros_like(self.points)
        return self.origins

    def subsample(self, step: int) -> "LidarScan":
        if step <= 1:
            return self
        sl = slice(None, None, step)
        return LidarScan(self.points[sl], self.timestamps[sl], self.T_SL,
                         None if self.origins is None else self.origins[sl], self.dropped)


def deskew(scan: LidarScan, times, poses, t_ref: float | None = None) -> LidarScan:
    """Express every point in ``S`` at ``t_ref`` (default: last pose time).

    ``times``/``poses`` sample ``T_WS``. Points outside the sampled window are
    dropped; more than half dropped raises :class:`DeskewWindowError`.
    """
    times = np.asarray(times, dtype=float)
    if len(scan) == 0:
        return LidarScan(np.zeros((0, 3)), np.zeros(0), Pose.identity(), np.zeros((0, 3)))
    t_ref = float(times[-1]) if t_ref is None else float(t_ref)
    R, t, inside = interpolate_poses(times, poses, scan.timestamps)
    n_drop = int(np.count_nonzero(~inside))
    if n_drop > 0.5 * len(scan):
        raise DeskewWindowError(f"{n_drop} of {len(scan)} points outside the pose window")
    R_ref, t_ref_tr, ok = interpolate_poses(times, poses, np.array([t_ref]))
    if not ok[0]:
        raise DeskewWindowError(f"reference time {t_ref} outside the pose window")
    R, t = R[inside], t[inside]
    C_SL = scan.T_SL.rotation.matrix
    p_S = scan.points[inside] @ C_SL.T + scan.T_SL.translation
    o_S = scan.ray_origins()[inside] @ C_SL.T + scan.T_SL.translation
    C_refW = R_ref[0].T
    p_W = np.einsum("nij,nj->ni", R, p_S) + t
    o_W = np.einsum("nij,nj->ni", R, o_S) + t
    pts = (p_W - t_ref_tr[0]) @ C_refW.T
    org = (o_W - t_ref_tr[0]) @ C_refW.T
    return LidarScan(pts, np.full(len(pts), t_ref), Pose.identity(), org, n_drop)


def overlap_ratio(active: OccupancySubmap, T_MS: Pose, scan: LidarScan, level: int = 0) -> float:
    """Fraction of scan endpoints falling into already observed space."""
    if len(scan) == 0:
        raise ValueError("overlap ratio of an empty scan is undefined")
    p = (T_MS @ scan.T_SL).transform(scan.points)
    return float(np.mean(active.observed_batch(p, level)))


def sample_factor_points(points, n: int, seed) -> np.ndarray:
    """Uniform subset without replacement of size ``min(n, len(points))``."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if n < 0:
        raise ValueError("sample size must be non-negative")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if n >= len(pts):
        return pts[rng.permutation(len(pts))]
    return pts[rng.choice(len(pts), size=n, replace=False)]


@dataclass
class SubmapConfig:
    resolution: float = 0.03
    dimension: float = 15.36
    lambda_overlap: float = 0.4
    theta_geo: float = 0.3
    overlap_level: int = 2
    n_frame_to_map: int = 100
    n_map_to_map: int = 1000
    keyframe_every: int = 10
    keyframe_distance: float = 1.0
    buffer_per_frame: int = 2000
    params: SensorModelParams = field(default_factory=SensorModelParams)

    def __post_init__(self):
        if not 0 < self.lambda_overlap < 1:
            raise ValueError("lambda_overlap must lie in (0, 1)")
        if not 0 <= self.theta_geo <= 1:
            raise ValueError("theta_geo must lie in [0, 1]")
        if self.n_frame_to_map < 0 or self.n_map_to_map < 0:
            raise ValueError("sampling budgets must be non-negative")


@dataclass
class SubmapEntry:
    id: int
    anchor_state_id: int
    submap: OccupancySubmap
    frozen: bool = False
    checksum: str | None = None


@dataclass
class SpawnDecision:
    spawn: bool
    ratio: float
    completed: SubmapEntry | None = None
    created: SubmapEntry | None = None
    buffer: np.ndarray | None = None


class SubmapRegistry:
    """Ordered submaps (one active, the rest frozen) plus the aggregation buffer."""

    def __init__(self, config: SubmapConfig | None = None, backend: str | None = None,
                 event_stream: IO[str] | None = None):
        self.config = config or SubmapConfig()
        self.backend = backend
        self.entries: list[SubmapEntry] = []
        self.events: list[dict] = []
        self._stream = event_stream
        self._buffer: list[np.ndarray] = []
        self._buffer_rng = np.random.default_rng(0)

    # ------------------------------------------------------------- bookkeeping

    def log(self, event: str, **fields):
        rec = {"event": event, **fields}
        self.events.append(rec)
        if self._stream is not None:
            self._stream.write(json.dumps(rec, sort_keys=True) + "\n")

    @property
    def active(self) -> SubmapEntry | None:
        return self.entries[-1] if self.entries and not self.entries[-1].frozen else None

    @property
    def completed(self) -> list[SubmapEntry]:
        return [e for e in self.entries if e.frozen]

    @property
    def last_completed(self) -> SubmapEntry | None:
        done = self.completed
        return done[-1] if done else None

    def entry(self, submap_id: int) -> SubmapEntry:
        return self.entries[submap_id]

    def create(self, anchor_state_id: int) -> SubmapEntry:
        if self.active is not None:
            raise RuntimeError("complete the active submap before creating another")
        if self.entries and anchor_state_id <= self.entries[-1].anchor_state_id:
            raise ValueError("anchor ids must be strictly increasing")
        c = self.config
        sub = OccupancySubmap(c.resolution, c.dimension, c.params, anchor_state_id, backend=self.backend)
        e = SubmapEntry(len(self.entries), anchor_state_id, sub)
        self.entries.append(e)
        self.log("submap_created", submap=e.id, anchor=anchor_state_id)
        return e

    def complete_active(self) -> tuple[SubmapEntry, np.ndarray]:
        """Freeze the active submap; returns it and the drained aggregation buffer."""
        e = self.active
        if e is None:
            raise RuntimeError("no active submap")
        e.submap.freeze()
        e.frozen = True
        e.checksum = e.submap.checksum()
        buf = self.drain_buffer()
        self.log("submap_completed", submap=e.id, anchor=e.anchor_state_id, blocks=e.submap.n_blocks,
                 buffer_points=len(buf))
        return e, buf

    def add_to_buffer(self, points_anchor):
        """Keep points (in the active anchor frame), at most ``buffer_per_frame`` per call."""
        p = np.asarray(points_anchor, dtype=float).reshape(-1, 3)
        cap = self.config.buffer_per_frame
        if len(p) > cap:
            p = p[np.sort(self._buffer_rng.choice(len(p), size=cap, replace=False))]
        self._buffer.append(p)

    def drain_buffer(self) -> np.ndarray:
        buf = np.concatenate(self._buffer) if self._buffer else np.zeros((0, 3))
        self._buffer = []
        return buf

    # ------------------------------------------------------------------ policy

    def maybe_spawn(self, ratio: float, next_keyframe_id: int) -> SpawnDecision:
        """Spawn when ``ratio < lambda_overlap`` (strict), anchored at ``next_keyframe_id``."""
        if self.active is None or not ratio < self.config.lambda_overlap:
            return SpawnDecision(False, ratio)
        done, buf = self.complete_active()
        new = self.create(next_keyframe_id)
        self.log("spawn", ratio=ratio, completed=done.id, created=new.id, anchor=next_keyframe_id)
        return SpawnDecision(True, ratio, done, new, buf)

    def overlap_scores(self, completed: SubmapEntry, poses: dict[int, Pose],
                       exclude=()) -> dict[int, float]:
        """Share of ``completed``'s occupied voxels that fall in observed space of each older submap."""
        centers = completed.submap.occupied_centers()
        scores = {}
        for e in self.entries:
            if e.id >= completed.id or e.id in exclude or not e.frozen:
                continue
            if len(centers) == 0:
                scores[e.id] = 0.0
                continue
            T = relative(poses[e.anchor_state_id], poses[completed.anchor_state_id])
            scores[e.id] = float(np.mean(e.submap.observed_batch(T.transform(centers),
                                                                 self.config.overlap_level)))
        return scores

    def find_most_overlapping(self, completed: SubmapEntry, poses: dict[int, Pose],
                              exclude=()) -> int | None:
        scores = self.overlap_scores(completed, poses, exclude)
        if not scores:
            return None
        best = max(scores.items(), key=lambda kv: (kv[1], kv[0]))  # ties: latest id
        return best[0] if best[1] >= self.config.theta_geo else None


@dataclass
class LiveFrameEvent:
    state_id: int
    points_S: np.ndarray


@dataclass
class CompletionEvent:
    entry: SubmapEntry
    buffer: np.ndarray


def wire_factors(registry: SubmapRegistry, problem, event, seed: int = 0) -> list:
    """Add the LiDAR factors triggered by ``event`` to ``problem``; returns them."""
    from .factor_graph import LidarFactor

    c = registry.config
    added = []
    if isinstance(event, LiveFrameEvent):
        ref = registry.last_completed
        if ref is None or c.n_frame_to_map == 0 or len(event.points_S) == 0:
            return added
        pts = sample_factor_points(event.points_S, c.n_frame_to_map,
                                   np.random.default_rng([seed, event.state_id, 1]))
        f = LidarFactor("frame_to_map", ref.anchor_state_id, event.state_id, ref.submap, pts, c.params.sigma_z)
        problem.add_factor(f)
        added.append(f)
        registry.log("factor", kind="frame_to_map", state_a=f.state_a, state_b=f.state_b, terms=len(pts))
        return added
    if isinstance(event, CompletionEvent):
        e = event.entry
        if e.id == 0 or len(event.buffer) == 0:
            return added
        prev = registry.entry(e.id - 1)
        targets = [prev]
        older = registry.find_most_overlapping(e, problem.poses(), exclude={prev.id})
        if older is not None:
            targets.append(registry.entry(older))
        for k, tgt in enumerate(targets):
            if not (tgt.frozen and e.frozen) or tgt.anchor_state_id == e.anchor_state_id:
                raise RuntimeError("map-to-map factors need two distinct frozen submaps")
            pts = sample_factor_points(event.buffer, c.n_map_to_map,
                                       np.random.default_rng([seed, e.anchor_state_id, 2, k]))
            f = LidarFactor("map_to_map", tgt.anchor_state_id, e.anchor_state_id, tgt.submap, pts, c.params.sigma_z)
            problem.add_factor(f)
            added.append(f)
            registry.log("factor", kind="map_to_map", state_a=f.state_a, state_b=f.state_b,
                         submap_a=tgt.id, submap_b=e.id, terms=len(pts))
        return added
    raise TypeError(f"unknown event {event!r}")
