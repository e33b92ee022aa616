"""Log-odds occupancy submaps on a fixed-depth sparse octree.

The finest level stores, per voxel, the mean log-odds ``L_bar`` and the
clamped observation weight ``w``; the accumulated log-odds ``L = L_bar * w``
is what queries return. Voxels live in 8x8x8 blocks allocated on demand.
Above the block level the tree is kept as dense per-level summary arrays,
below it as per-block summary arrays.

Node summaries are ``(max occupancy of observed descendants, observed
fraction)``. A node whose eight children are saturated (``w == w_max``) and
identical is pruned into a leaf; a pruned block releases its voxel storage
and is kept as a single uniform value.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from . import _pykernels, kernels
from .geometry import Pose

if TYPE_CHECKING:
    from .submapping import LidarScan

BLOCK = 8
BLOCK_VOXELS = BLOCK**3
UNALLOCATED = -1
COLLAPSED = -2
FORMAT_NAME = "occslam-submap"
FORMAT_VERSION = 1


class InvalidMeasurementError(ValueError):
    pass


class FrozenSubmapError(RuntimeError):
    pass


@dataclass(frozen=True)
class SensorModelParams:
    """Piecewise-linear inverse sensor model and fusion constants.

    ``sigma(z)`` and ``tau(z)`` grow linearly with range and are clamped to
    ``[*_min, *_max]``. ``footprint`` (radians) widens the integration cell
    of long rays to the beam spacing; 0 integrates every ray at the finest
    resolution.
    """

    l_min: float = -5.0
    sigma_scale: float = 0.05
    sigma_min: float = 0.03
    sigma_max: float = 1.0
    tau_scale: float = 0.05
    tau_min: float = 0.06
    tau_max: float = 0.6
    w_max: int = 20
    sigma_z: float = 0.02
    footprint: float = 0.0

    def __post_init__(self):
        if not self.l_min < 0:
            raise ValueError("l_min must be negative")
        if not (isinstance(self.w_max, (int, np.integer)) and 1 <= self.w_max <= 65534):
            raise ValueError("w_max must be an integer in [1, 65534]")
        for lo_, hi_ in ((self.sigma_min, self.sigma_max), (self.tau_min, self.tau_max)):
            if not 0 < lo_ <= hi_:
                raise ValueError("clamps must be positive with min <= max")
        if self.sigma_scale < 0 or self.tau_scale < 0 or self.sigma_z < 0 or self.footprint < 0:
            raise ValueError("scales must be non-negative")

    def sigma(self, z: float) -> float:
        return min(max(self.sigma_scale * z, self.sigma_min), self.sigma_max)

    def tau(self, z: float) -> float:
        return min(max(self.tau_scale * z, self.tau_min), self.tau_max)

    def kernel_array(self) -> np.ndarray:
        return np.array(
            [self.l_min, self.sigma_scale, self.sigma_min, self.sigma_max,
             self.tau_scale, self.tau_min, self.tau_max, self.footprint],
            dtype=np.float64,
        )


def inverse_sensor_model(d_r: float, z_r: float, params: SensorModelParams) -> float:
    """Log-odds update at signed distance ``d_r`` from a surface measured at ``z_r``.

    ``L_min`` up to ``-3 sigma``, linear through zero at the surface with slope
    ``|L_min| / (3 sigma)``, flat beyond ``tau / 2`` (integration stops there).
    """
    if not z_r > 0:
        raise InvalidMeasurementError(f"range must be positive, got {z_r}")
    sigma = params.sigma(z_r)
    if d_r <= -3.0 * sigma:
        return params.l_min
    slope = -params.l_min / (3.0 * sigma)
    return slope * min(d_r, 0.5 * params.tau(z_r))


@dataclass
class IntegrationStats:
    integrated: int = 0
    clipped: int = 0
    rejected: int = 0
    voxel_updates: int = 0

    def __iadd__(self, other: "IntegrationStats"):
        self.integrated += other.integrated
        self.clipped += other.clipped
        self.rejected += other.rejected
        self.voxel_updates += other.voxel_updates
        return self


def _summaries(kern, m: np.ndarray, w: np.ndarray, w_max: int) -> dict:
    """Node summaries of ``k`` blocks from ``(k, 512)`` voxel data (see ``block_summaries``)."""
    k = m.shape[0]
    out = {
        "max1": np.empty((k, 64)), "obs1": np.empty((k, 64)), "pr1": np.empty((k, 64), dtype=np.uint8),
        "max2": np.empty((k, 8)), "obs2": np.empty((k, 8)), "pr2": np.empty((k, 8), dtype=np.uint8),
        "blk_max": np.empty(k), "blk_obs": np.empty(k), "collapse": np.empty(k, dtype=np.uint8),
    }
    if k:
        kern.block_summaries(np.ascontiguousarray(m), np.ascontiguousarray(w), int(w_max),
                             out["max1"], out["obs1"], out["pr1"], out["max2"], out["obs2"], out["pr2"],
                             out["blk_max"], out["blk_obs"], out["collapse"])
    for key in ("pr1", "pr2", "collapse"):
        out[key] = out[key].view(bool)
    return out


class OccupancySubmap:
    """Cubic occupancy submap of edge ``dimension`` centred on its anchor frame."""

    def __init__(self, resolution: float = 0.03, dimension: float = 15.36,
                 params: SensorModelParams | None = None, anchor_state_id: int | None = None,
                 backend: str | None = None, capacity: int = 256):
        ratio = dimension / resolution
        n_vox = int(round(ratio))
        if abs(ratio - n_vox) > 1e-6 * ratio or n_vox < BLOCK or n_vox & (n_vox - 1):
            raise ValueError(
                f"dimension/resolution must be a power of two >= {BLOCK}, got {ratio:g}")
        self.resolution = float(resolution)
        self.dimension = float(dimension)
        self.params = params or SensorModelParams()
        self.anchor_state_id = anchor_state_id
        self.backend = backend or kernels.BACKEND
        self._k = kernels.get_backend(self.backend)
        self.n_vox = n_vox
        self.depth = int(round(math.log2(n_vox)))
        self.lo = -0.5 * self.dimension
        nb = n_vox // BLOCK
        self.nb = nb
        self.index = np.full((nb, nb, nb), UNALLOCATED, dtype=np.int32)
        self.umean = np.zeros((nb, nb, nb), dtype=np.float64)
        self.uw = np.zeros((nb, nb, nb), dtype=np.uint16)
        self.dirty = np.zeros((nb, nb, nb), dtype=np.uint8)
        self.means = np.zeros((capacity, BLOCK_VOXELS), dtype=np.float64)
        self.weights = np.zeros((capacity, BLOCK_VOXELS), dtype=np.uint16)
        self.n_used = 0
        self._sub = {
            "max1": np.zeros((capacity, 64)), "obs1": np.zeros((capacity, 64)),
            "pr1": np.zeros((capacity, 64), dtype=bool),
            "max2": np.zeros((capacity, 8)), "obs2": np.zeros((capacity, 8)),
            "pr2": np.zeros((capacity, 8), dtype=bool),
        }
        self.blk_max = np.full((nb, nb, nb), -np.inf)
        self.blk_obs = np.zeros((nb, nb, nb))
        self.pyramid: list[dict[str, np.ndarray]] = []
        self._rebuild_pyramid()
        self.frozen = False

    # ------------------------------------------------------------------ basics

    @property
    def kernel(self):
        return self._k

    @property
    def n_blocks(self) -> int:
        return int(np.count_nonzero(self.index >= 0))

    @property
    def n_collapsed(self) -> int:
        return int(np.count_nonzero(self.index == COLLAPSED))

    def memory_bytes(self) -> int:
        return int(self.means.nbytes + self.weights.nbytes
                   + sum(a.nbytes for a in self._sub.values()))

    def freeze(self):
        self.propagate()
        self._compact()
        self.frozen = True

    def contains(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        hi = self.lo + self.dimension
        return np.all((p >= self.lo) & (p < hi), axis=1)

    def voxel_index(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        return np.floor((p - self.lo) / self.resolution).astype(np.int64)

    def voxel_center(self, ijk) -> np.ndarray:
        return self.lo + (np.asarray(ijk, dtype=float) + 0.5) * self.resolution

    def lookup_ijk(self, ijk) -> tuple[np.ndarray, np.ndarray]:
        """``(mean, weight)`` at integer voxel coordinates ``(N, 3)``; out of range -> w=0."""
        ijk = np.atleast_2d(np.asarray(ijk, dtype=np.int64))
        inside = np.all((ijk >= 0) & (ijk < self.n_vox), axis=1)
        ijk = np.where(inside[:, None], ijk, 0)
        b = ijk >> 3
        slot = self.index[b[:, 0], b[:, 1], b[:, 2]]
        off = ((ijk[:, 0] & 7) << 6) | ((ijk[:, 1] & 7) << 3) | (ijk[:, 2] & 7)
        safe = np.maximum(slot, 0)
        col = slot == COLLAPSED
        m = np.where(slot >= 0, self.means[safe, off], np.where(col, self.umean[b[:, 0], b[:, 1], b[:, 2]], 0.0))
        w = np.where(slot >= 0, self.weights[safe, off], np.where(col, self.uw[b[:, 0], b[:, 1], b[:, 2]], 0))
        w = np.where(inside, w, 0).astype(np.int64)
        m = np.where(inside, m, 0.0)
        return m, w

    def voxel(self, i: int, j: int, k: int) -> tuple[float, int]:
        m, w = self.lookup_ijk([[i, j, k]])
        return float(m[0]), int(w[0])

    def voxel_at(self, p) -> tuple[float, int]:
        m, w = self.lookup_ijk(self.voxel_index(p))
        return float(m[0]), int(w[0])

    # ------------------------------------------------------------- integration

    def _ensure_capacity(self, needed: int):
        cap = self.means.shape[0]
        if needed <= cap:
            return
        new_cap = max(needed, 2 * cap)
        self.means = np.resize(self.means, (new_cap, BLOCK_VOXELS))
        self.weights = np.resize(self.weights, (new_cap, BLOCK_VOXELS))
        for key, a in self._sub.items():
            self._sub[key] = np.resize(a, (new_cap,) + a.shape[1:])

    def integrate_rays(self, origins, endpoints, params: SensorModelParams | None = None) -> IntegrationStats:
        """Fuse rays ``origins[i] -> endpoints[i]`` (map frame) into the voxels."""
        if self.frozen:
            raise FrozenSubmapError("submap is frozen")
        params = params or self.params
        o = np.ascontiguousarray(np.atleast_2d(origins), dtype=np.float64)
        e = np.ascontiguousarray(np.atleast_2d(endpoints), dtype=np.float64)
        if o.shape[0] == 1 and e.shape[0] > 1:
            o = np.ascontiguousarray(np.broadcast_to(o, e.shape))
        if o.shape != e.shape or o.shape[1:] != (3,):
            raise ValueError("origins and endpoints must both be (N, 3)")
        counts = np.zeros(4, dtype=np.int64)
        start = 0
        sp = params.kernel_array()
        while start < len(o):
            start, self.n_used = self._k.integrate_rays(
                self.index, self.means, self.weights, self.umean, self.uw, self.dirty,
                self.n_used, o, e, start, self.lo, self.resolution, self.n_vox, sp,
                int(params.w_max), counts)
            if start < len(o):
                self._ensure_capacity(2 * self.means.shape[0])
        self._ensure_capacity(self.n_used)
        return IntegrationStats(*(int(c) for c in counts))

    # ------------------------------------------------------------------ queries

    def query_batch(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Interpolated accumulated log-odds; ``known`` is False where unknown."""
        p = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
        out = np.zeros(len(p))
        ok = np.zeros(len(p), dtype=np.uint8)
        if len(p):
            self._k.trilinear(self.index, self.means, self.weights, self.umean, self.uw,
                              self.lo, self.resolution, self.n_vox, p, out, ok)
        return out, ok.astype(bool)

    def query(self, p) -> float | None:
        v, ok = self.query_batch(np.asarray(p, dtype=float).reshape(1, 3))
        return float(v[0]) if ok[0] else None

    def gradient_batch(self, points, step: float | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Central differences of :meth:`query_batch` with a one-voxel step."""
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        h = self.resolution if step is None else step
        n = len(p)
        offs = np.vstack([np.eye(3) * h, -np.eye(3) * h])
        samples = (p[None, :, :] + offs[:, None, :]).reshape(6 * n, 3)
        v, ok = self.query_batch(samples)
        v = v.reshape(6, n)
        ok = ok.reshape(6, n).all(axis=0)
        g = ((v[:3] - v[3:]) / (2.0 * h)).T
        g[~ok] = 0.0
        return g, ok

    def gradient(self, p) -> np.ndarray | None:
        g, ok = self.gradient_batch(np.asarray(p, dtype=float).reshape(1, 3))
        return g[0] if ok[0] else None

    def query_with_gradient(self, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(L, gradL, known)`` in a single kernel call."""
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n = len(p)
        h = self.resolution
        offs = np.vstack([np.zeros((1, 3)), np.eye(3) * h, -np.eye(3) * h])
        samples = (p[None, :, :] + offs[:, None, :]).reshape(7 * n, 3)
        v, ok = self.query_batch(samples)
        v = v.reshape(7, n)
        ok = ok.reshape(7, n).all(axis=0)
        g = ((v[1:4] - v[4:7]) / (2.0 * h)).T
        g[~ok] = 0.0
        L = np.where(ok, v[0], 0.0)
        return L, g, ok

    def observed_batch(self, points, level: int = 0) -> np.ndarray:
        """True where the enclosing node at ``level`` holds an observed voxel."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        inside = self.contains(p)
        ijk = np.where(inside[:, None], self.voxel_index(p), 0)
        if level == 0:
            _, w = self.lookup_ijk(ijk)
            return inside & (w > 0)
        self.propagate()
        if level <= 3:
            b = ijk >> 3
            slot = self.index[b[:, 0], b[:, 1], b[:, 2]]
            if level == 3:
                obs = np.where(slot == UNALLOCATED, 0.0, self.blk_obs[b[:, 0], b[:, 1], b[:, 2]])
            else:
                key = "obs1" if level == 1 else "obs2"
                n = 4 if level == 1 else 2
                loc = (ijk & 7) >> level
                node = (loc[:, 0] * n + loc[:, 1]) * n + loc[:, 2]
                safe = np.maximum(slot, 0)
                obs = np.where(slot >= 0, self._sub[key][safe, node],
                               np.where(slot == COLLAPSED, 1.0, 0.0))
            return inside & (obs > 0)
        lvl = self.pyramid[min(level, self.depth) - 4]
        c = ijk >> min(level, self.depth)
        return inside & (lvl["obs"][c[:, 0], c[:, 1], c[:, 2]] > 0)

    # ------------------------------------------------------- tree maintenance

    def propagate(self):
        """Refresh summaries of written blocks, prune, and rebuild upper levels."""
        d = np.nonzero(self.dirty)
        if len(d[0]) == 0:
            return
        slots = self.index[d]
        keep = slots >= 0
        d = tuple(a[keep] for a in d)
        slots = slots[keep]
        s = _summaries(self._k, self.means[slots], self.weights[slots], self.params.w_max)
        for key in self._sub:
            self._sub[key][slots] = s[key]
        self.blk_max[d] = s["blk_max"]
        self.blk_obs[d] = s["blk_obs"]
        col = s["collapse"]
        if np.any(col):
            cd = tuple(a[col] for a in d)
            cs = slots[col]
            self.umean[cd] = self.means[cs, 0]
            self.uw[cd] = self.weights[cs, 0]
            self.index[cd] = COLLAPSED
        self.dirty[:] = 0
        self._rebuild_pyramid()
        holes = self.n_used - self.n_blocks
        if holes > max(64, self.n_used // 4):
            self._compact()

    def _compact(self):
        live = self.index >= 0
        slots = self.index[live]
        n = len(slots)
        if n == self.n_used and self.means.shape[0] == n:
            return
        order = np.sort(slots)
        remap = np.full(max(self.n_used, 1), -1, dtype=np.int32)
        remap[order] = np.arange(n, dtype=np.int32)
        self.means = self.means[order].copy()
        self.weights = self.weights[order].copy()
        for key, a in self._sub.items():
            self._sub[key] = a[order].copy()
        self.index[live] = remap[slots]
        self.n_used = n
        if self.means.shape[0] == 0:
            self._ensure_capacity(16)

    def _level3(self):
        alloc = self.index != UNALLOCATED
        col = self.index == COLLAPSED
        mx = np.where(alloc, np.where(col, self.umean * self.uw, self.blk_max), -np.inf)
        mx = np.where(col & (self.uw == 0), -np.inf, mx)
        obs = np.where(alloc, np.where(col, (self.uw > 0).astype(float), self.blk_obs), 0.0)
        return {"max": mx, "obs": obs, "alloc": alloc, "pruned": col,
                "umean": np.where(col, self.umean, 0.0), "uw": np.where(col, self.uw, 0).astype(np.int64)}

    @staticmethod
    def _parent(child):
        n = child["max"].shape[0] // 2

        def red(a, op):
            return op(a.reshape(n, 2, n, 2, n, 2), axis=(1, 3, 5))

        same_m = red(child["umean"], np.max) == red(child["umean"], np.min)
        same_w = red(child["uw"], np.max) == red(child["uw"], np.min)
        pruned = red(child["pruned"], np.all) & same_m & same_w
        return {
            "max": red(child["max"], np.max), "obs": red(child["obs"], np.mean),
            "alloc": red(child["alloc"], np.any), "pruned": pruned,
            "umean": np.where(pruned, red(child["umean"], np.max), 0.0),
            "uw": np.where(pruned, red(child["uw"], np.max), 0),
        }

    def _rebuild_pyramid(self):
        levels = []
        cur = self._level3()
        for _ in range(self.depth - 3):
            cur = self._parent(cur)
            levels.append(cur)
        self.pyramid = levels

    def node_summary(self, level: int, coords) -> tuple[float, float] | None:
        """Stored ``(max occupancy, observed fraction)`` of a node, None if unallocated."""
        i, j, k = (int(c) for c in coords)
        if level >= 4:
            lvl = self.pyramid[level - 4]
            if not lvl["alloc"][i, j, k]:
                return None
            return float(lvl["max"][i, j, k]), float(lvl["obs"][i, j, k])
        b = (i << level) >> 3, (j << level) >> 3, (k << level) >> 3
        slot = int(self.index[b])
        if slot == UNALLOCATED:
            return None
        if slot == COLLAPSED:
            w = int(self.uw[b])
            return (float(self.umean[b] * w) if w else -math.inf), float(w > 0)
        if level == 3:
            return float(self.blk_max[b]), float(self.blk_obs[b])
        if level == 0:
            m, w = self.voxel(i, j, k)
            return (m * w if w else -math.inf), float(w > 0)
        n = 4 if level == 1 else 2
        mask = n - 1
        node = ((i & mask) * n + (j & mask)) * n + (k & mask)
        key = "1" if level == 1 else "2"
        return float(self._sub["max" + key][slot, node]), float(self._sub["obs" + key][slot, node])

    def node_is_pruned(self, level: int, coords) -> bool:
        i, j, k = (int(c) for c in coords)
        if level >= 4:
            return bool(self.pyramid[level - 4]["pruned"][i, j, k])
        if level == 0:
            return False
        b = (i << level) >> 3, (j << level) >> 3, (k << level) >> 3
        slot = int(self.index[b])
        if slot == COLLAPSED:
            return True
        if slot == UNALLOCATED or level == 3:
            return False
        n = 4 if level == 1 else 2
        mask = n - 1
        node = ((i & mask) * n + (j & mask)) * n + (k & mask)
        return bool(self._sub["pr1" if level == 1 else "pr2"][slot, node])

    def node_count(self) -> int:
        """Nodes of the logical tree: allocated nodes not below a pruned node."""
        self.propagate()
        total = 0
        hidden = None
        for lvl in reversed(self.pyramid):
            alloc = lvl["alloc"]
            if hidden is not None:
                alloc = alloc & ~hidden
            total += int(np.count_nonzero(alloc))
            h = lvl["pruned"] | (hidden if hidden is not None else False)
            hidden = np.repeat(np.repeat(np.repeat(h, 2, 0), 2, 1), 2, 2)
        l3 = self.index != UNALLOCATED
        if hidden is not None:
            l3 = l3 & ~hidden
        total += int(np.count_nonzero(l3))
        slots = self.index[l3 & (self.index >= 0)]
        if len(slots):
            # level-1 nodes whose level-2 parent is pruned are hidden
            par = self._sub["pr2"][slots].reshape(-1, 2, 2, 2)
            hid1 = np.repeat(np.repeat(np.repeat(par, 2, 1), 2, 2), 2, 3)
            pr1 = self._sub["pr1"][slots].reshape(-1, 4, 4, 4)
            total += 8 * len(slots)
            vis1 = ~hid1
            total += int(np.count_nonzero(vis1))
            total += 8 * int(np.count_nonzero(vis1 & ~pr1))
        return total

    def audit(self) -> list[str]:
        """Full consistency check of every stored summary against voxel data."""
        v = []
        if np.any(self.dirty):
            v.append(f"{int(np.count_nonzero(self.dirty))} blocks written but not propagated")
        live = np.nonzero(self.index >= 0)
        slots = self.index[live]
        if len(slots):
            if len(np.unique(slots)) != len(slots):
                v.append("block slot referenced twice")
            if slots.max() >= self.n_used:
                v.append("block slot beyond pool")
            # recomputed with the numpy reference, independent of the selected backend
            s = _summaries(_pykernels, self.means[slots], self.weights[slots], self.params.w_max)
            for key in self._sub:
                stored = self._sub[key][slots]
                bad = ~((stored == s[key]) | (np.isneginf(stored) & np.isneginf(s[key])))
                if np.any(bad):
                    v.append(f"{int(np.count_nonzero(bad.any(axis=1)))} blocks with stale {key}")
            for key, arr in (("blk_max", self.blk_max), ("blk_obs", self.blk_obs)):
                stored = arr[live]
                bad = ~((stored == s[key]) | (np.isneginf(stored) & np.isneginf(s[key])))
                if np.any(bad):
                    v.append(f"{int(np.count_nonzero(bad))} blocks with stale {key}")
            if np.any(s["collapse"]):
                v.append(f"{int(np.count_nonzero(s['collapse']))} prunable blocks not collapsed")
        col = self.index == COLLAPSED
        if np.any(self.uw[col] != self.params.w_max):
            v.append("collapsed block with unsaturated weight")
        cur = self._level3()
        for depth_i, stored in enumerate(self.pyramid):
            cur = self._parent(cur)
            for key in ("max", "obs", "alloc", "pruned"):
                a, b = stored[key], cur[key]
                same = (a == b) | (np.isneginf(a) & np.isneginf(b)) if key == "max" else a == b
                if not np.all(same):
                    v.append(f"level {depth_i + 4}: stale {key}")
        return v

    def audit_and_propagate(self) -> list[str]:
        self.propagate()
        return self.audit()

    # ----------------------------------------------------------------- export

    def voxel_list(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Observed voxels as ``(ijk (N,3) int32, mean (N,), weight (N,))``, block-ordered."""
        blocks = np.argwhere(self.index != UNALLOCATED)
        if len(blocks) == 0:
            return np.zeros((0, 3), np.int32), np.zeros(0), np.zeros(0, np.uint16)
        loc = np.indices((8, 8, 8)).reshape(3, -1).T
        slots = self.index[tuple(blocks.T)]
        safe = np.maximum(slots, 0)
        col = (slots == COLLAPSED)[:, None]
        m = np.where(col, self.umean[tuple(blocks.T)][:, None], self.means[safe])
        w = np.where(col, self.uw[tuple(blocks.T)][:, None], self.weights[safe])
        ijk = (blocks[:, None, :] * BLOCK + loc[None, :, :]).reshape(-1, 3)
        m = m.reshape(-1)
        w = w.reshape(-1)
        keep = w > 0
        return ijk[keep].astype(np.int32), m[keep].astype(np.float64), w[keep].astype(np.uint16)

    def set_voxels(self, ijk, mean, weight):
        """Overwrite voxels directly (deserialisation and tests)."""
        if self.frozen:
            raise FrozenSubmapError("submap is frozen")
        ijk = np.atleast_2d(np.asarray(ijk, dtype=np.int64))
        mean = np.broadcast_to(np.asarray(mean, dtype=np.float64), (len(ijk),))
        weight = np.broadcast_to(np.asarray(weight, dtype=np.int64), (len(ijk),))
        if len(ijk) == 0:
            return
        if np.any((ijk < 0) | (ijk >= self.n_vox)):
            raise IndexError("voxel index out of range")
        if np.any((weight < 0) | (weight > self.params.w_max)):
            raise ValueError("weight outside [0, w_max]")
        b = ijk >> 3
        ub, inv = np.unique(b, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        slots = self.index[tuple(ub.T)]
        need = int(np.count_nonzero(slots < 0))
        self._ensure_capacity(self.n_used + need)
        for n, (blk, slot) in enumerate(zip(ub, slots)):
            t = tuple(blk)
            if slot < 0:
                new = self.n_used
                self.n_used += 1
                if slot == COLLAPSED:
                    self.means[new] = self.umean[t]
                    self.weights[new] = self.uw[t]
                else:
                    self.means[new] = 0.0
                    self.weights[new] = 0
                self.index[t] = new
                slots[n] = new
        s = slots[inv]
        off = ((ijk[:, 0] & 7) << 6) | ((ijk[:, 1] & 7) << 3) | (ijk[:, 2] & 7)
        self.means[s, off] = mean
        self.weights[s, off] = weight
        self.dirty[tuple(ub.T)] = 1

    def occupied_centers(self) -> np.ndarray:
        ijk, m, w = self.voxel_list()
        occ = m * w > 0
        return self.voxel_center(ijk[occ])

    def checksum(self) -> str:
        ijk, m, w = self.voxel_list()
        h = hashlib.sha256()
        for a in (ijk, m, w):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def meta(self) -> dict:
        return {
            "format": FORMAT_NAME, "version": FORMAT_VERSION,
            "anchor_state_id": self.anchor_state_id, "resolution": self.resolution,
            "dimension": self.dimension, "params": asdict(self.params),
        }

    def save(self, path) -> Path:
        """Binary ``.npz``: JSON header plus the sparse voxel list (see README)."""
        path = Path(path)
        ijk, m, w = self.voxel_list()
        with open(path, "wb") as fh:
            np.savez(fh, header=np.array(json.dumps(self.meta())), ijk=ijk, mean=m, weight=w)
        return path

    @classmethod
    def load(cls, path, backend: str | None = None) -> "OccupancySubmap":
        with np.load(Path(path), allow_pickle=False) as z:
            meta = json.loads(str(z["header"]))
            if meta.get("format") != FORMAT_NAME:
                raise ValueError(f"{path}: not an {FORMAT_NAME} file")
            if meta.get("version") != FORMAT_VERSION:
                raise ValueError(f"{path}: unsupported version {meta.get('version')}")
            sub = cls(meta["resolution"], meta["dimension"], SensorModelParams(**meta["params"]),
                      meta["anchor_state_id"], backend=backend)
            sub.set_voxels(z["ijk"], z["mean"], z["weight"])
        sub.propagate()
        return sub


def integrate_ray(submap: OccupancySubmap, origin_M, endpoint_M,
                  params: SensorModelParams | None = None) -> IntegrationStats:
    """Single ray; zero-length rays are rejected with an error."""
    o = np.asarray(origin_M, dtype=float).reshape(3)
    e = np.asarray(endpoint_M, dtype=float).reshape(3)
    if not np.linalg.norm(e - o) > 1e-9:
        raise InvalidMeasurementError("zero-length ray")
    stats = submap.integrate_rays(o[None], e[None], params)
    submap.propagate()
    return stats


def integrate_scan(submap: OccupancySubmap, T_MS: Pose, scan: "LidarScan",
                   params: SensorModelParams | None = None) -> IntegrationStats:
    """Integrate every point of a (deskewed) scan as a ray from the sensor origin."""
    if len(scan) == 0:
        return IntegrationStats()
    T_ML = T_MS @ scan.T_SL
    stats = submap.integrate_rays(T_ML.transform(scan.ray_origins()), T_ML.transform(scan.points), params)
    submap.propagate()
    return stats


@dataclass
class Slice:
    classes: np.ndarray  # uint8, 0 occupied / 128 unknown / 255 free, north-up
    values: np.ndarray  # accumulated log-odds, nan where unknown
    x0: float
    y0: float
    resolution: float
    height: float


def export_slice(submap: OccupancySubmap, height_M: float, out=None) -> Slice:
    """Horizontal voxel layer through ``height_M``; optionally write ``out.pgm``/``out.csv``."""
    if not submap.lo <= height_M < submap.lo + submap.dimension:
        raise ValueError(f"height {height_M} outside the submap")
    n = submap.n_vox
    k = int(math.floor((height_M - submap.lo) / submap.resolution))
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    ijk = np.stack([ii.ravel(), jj.ravel(), np.full(n * n, k)], axis=1)
    m, w = submap.lookup_ijk(ijk)
    L = (m * w).reshape(n, n)  # [x, y]
    known = (w > 0).reshape(n, n)
    grid = np.where(known, L, np.nan).T[::-1]  # rows north-up
    classes = np.full(grid.shape, 128, dtype=np.uint8)
    kn = known.T[::-1]
    classes[kn & (grid > 0)] = 0
    classes[kn & ~(grid > 0)] = 255
    x0 = y0 = submap.lo + 0.5 * submap.resolution
    sl = Slice(classes, grid, x0, y0, submap.resolution, float(height_M))
    if out is not None:
        write_slice(sl, out)
    return sl


def write_slice(sl: Slice, out) -> tuple[Path, Path]:
    out = Path(out)
    pgm = out.with_suffix(".pgm")
    csv = out.with_suffix(".csv")
    rows, cols = sl.classes.shape
    with open(pgm, "w") as fh:
        fh.write(f"P2\n# occupied=0 unknown=128 free=255\n{cols} {rows}\n255\n")
        for row in sl.classes:
            fh.write(" ".join(str(int(v)) for v in row) + "\n")
    with open(csv, "w") as fh:
        fh.write("x0,y0,resolution,height\n")
        fh.write(",".join(repr(float(v)) for v in (sl.x0, sl.y0, sl.resolution, sl.height)) + "\n")
        for row in sl.values:
            fh.write(",".join("nan" if not np.isfinite(v) else repr(float(v)) for v in row) + "\n")
    return pgm, csv
