"""Pose states, relative-pose and LiDAR factors, and a Levenberg-Marquardt solver.

The objective is

    1/2 sum_p e_p^T W_p e_p  +  1/2 sum_l e_l^2

over relative-pose factors ``p`` and valid LiDAR terms ``l``. Every free
state contributes a 6-dof perturbation ``[dr, dalpha]`` applied with
:func:`geometry.apply_perturbation`.
"""

from __future__ import annotations

import copy
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import Pose, apply_perturbation, quat_multiply, skew
from .lidar_residual import default_g_min, evaluate_batch
from .occupancy import OccupancySubmap

ROLES = ("live", "keyframe", "submap_anchor")


class GaugeError(RuntimeError):
    def __init__(self, free_states):
        self.free_states = sorted(free_states)
        super().__init__(f"unconstrained gauge: states {self.free_states} are not tied to a fixed state")


@dataclass
class StateNode:
    id: int
    timestamp: float
    pose: Pose
    role: str = "live"
    fixed: bool = False

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")


@dataclass
class RelativePoseFactor:
    """Measured pose of ``S_c`` in ``S_r`` with a 6x6 information matrix."""

    state_r: int
    state_c: int
    measured: Pose
    information: np.ndarray = field(default_factory=lambda: np.eye(6))

    def __post_init__(self):
        W = np.asarray(self.information, dtype=float)
        if W.shape != (6, 6) or not np.allclose(W, W.T, atol=1e-12 * max(1.0, np.abs(W).max())):
            raise ValueError("information must be a symmetric 6x6 matrix")
        if np.linalg.eigvalsh(W).min() < -1e-9 * max(1.0, np.abs(W).max()):
            raise ValueError("information must be positive semi-definite")
        self.information = W

    @property
    def states(self) -> tuple[int, int]:
        return self.state_r, self.state_c


def information_from_sigmas(sigma_t: float, sigma_theta: float) -> np.ndarray:
    return np.diag([1.0 / sigma_t**2] * 3 + [1.0 / sigma_theta**2] * 3)


def relative_pose_error(f: RelativePoseFactor, T_WSr: Pose, T_WSc: Pose) -> np.ndarray:
    e, _, _ = relative_pose_error_and_jacobians(f.measured, T_WSr, T_WSc)
    return e


def relative_pose_error_and_jacobians(measured: Pose, T_WSr: Pose, T_WSc: Pose):
    """``e = [r_SrSc - r~; 2 vec(q_SrSc q~^-1)]`` and its 6x6 Jacobians ``(J_r, J_c)``."""
    C_SrW = T_WSr.rotation.matrix.T
    d = T_WSc.translation - T_WSr.translation
    e_r = C_SrW @ d - measured.translation
    q_rc = quat_multiply(T_WSr.rotation.inverse().q, T_WSc.rotation.q)
    q_e = quat_multiply(q_rc, measured.rotation.inverse().q)
    if q_e[0] < 0:
        q_e = -q_e
    w, v = q_e[0], q_e[1:]
    e = np.concatenate([e_r, 2.0 * v])
    A = (w * np.eye(3) - skew(v)) @ C_SrW
    J_r = np.zeros((6, 6))
    J_c = np.zeros((6, 6))
    J_r[:3, :3] = -C_SrW
    J_r[:3, 3:] = C_SrW @ skew(d)
    J_r[3:, 3:] = -A
    J_c[:3, :3] = C_SrW
    J_c[3:, 3:] = A
    return e, J_r, J_c


@dataclass
class LidarFactor:
    """All terms share the state pair; ``points`` are expressed in ``S_b``."""

    kind: str
    state_a: int
    state_b: int
    submap: OccupancySubmap
    points: np.ndarray
    sigma_z: float = 0.02
    g_min: float | None = None

    def __post_init__(self):
        if self.kind not in ("frame_to_map", "map_to_map"):
            raise ValueError(f"unknown LiDAR factor kind {self.kind!r}")
        if self.state_a == self.state_b:
            raise ValueError("a LiDAR factor must bind two distinct states")
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if self.g_min is None:
            self.g_min = default_g_min(self.submap)

    @property
    def states(self) -> tuple[int, int]:
        return self.state_a, self.state_b

    @property
    def terms(self):
        from .lidar_residual import LidarFactorTerm

        return [LidarFactorTerm(p, self.state_a, self.state_b, self.submap, self.sigma_z, self.g_min)
                for p in self.points]

    def evaluate(self, T_WSa: Pose, T_WSb: Pose, with_jacobians: bool = True):
        return evaluate_batch(self.submap, self.points, T_WSa, T_WSb, self.sigma_z, self.g_min,
                              with_jacobians)


@dataclass
class SolverConfig:
    max_iterations: int = 30
    initial_lambda: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.5
    cost_tol: float = 1e-10
    step_tol: float = 1e-9
    max_lambda: float = 1e12

    def __post_init__(self):
        for name in ("max_iterations", "initial_lambda", "lambda_up", "lambda_down",
                     "cost_tol", "step_tol", "max_lambda"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.lambda_up > 1 or not self.lambda_down < 1:
            raise ValueError("lambda_up must exceed 1 and lambda_down must be below 1")


@dataclass
class OptimizeResult:
    poses: dict[int, Pose]
    cost_trace: list[float]
    termination: str
    iterations: int
    n_params: int
    accepted: int = 0

    @property
    def initial_cost(self) -> float:
        return self.cost_trace[0]

    @property
    def final_cost(self) -> float:
        return self.cost_trace[-1]


class Problem:
    def __init__(self):
        self.states: dict[int, StateNode] = {}
        self.factors: list = []

    def add_state(self, timestamp: float, pose: Pose, role: str = "live", fixed: bool = False,
                  state_id: int | None = None) -> int:
        nxt = (max(self.states) + 1) if self.states else 0
        if state_id is None:
            state_id = nxt
        elif state_id < nxt:
            raise ValueError("state ids must be unique and increasing")
        self.states[state_id] = StateNode(state_id, float(timestamp), pose, role, fixed)
        return state_id

    def add_factor(self, factor):
        for s in factor.states:
            if s not in self.states:
                raise KeyError(f"factor references unknown state {s}")
        self.factors.append(factor)
        return factor

    def pose(self, state_id: int) -> Pose:
        return self.states[state_id].pose

    def poses(self) -> dict[int, Pose]:
        return {i: s.pose for i, s in self.states.items()}

    def set_poses(self, poses: dict[int, Pose]):
        for i, p in poses.items():
            self.states[i].pose = p

    @property
    def relative_factors(self):
        return [f for f in self.factors if isinstance(f, RelativePoseFactor)]

    @property
    def lidar_factors(self):
        return [f for f in self.factors if isinstance(f, LidarFactor)]

    def copy(self) -> "Problem":
        other = Problem()
        other.states = {i: copy.copy(s) for i, s in self.states.items()}
        other.factors = list(self.factors)
        return other

    # -------------------------------------------------------------- dump/load

    def dump(self, path, submap_names: dict[int, str] | None = None):
        """JSON dump; LiDAR factors reference their submap by name (``id(submap)`` by default)."""
        names = submap_names or {}
        doc = {"format": "occslam-problem", "version": 1, "states": [], "factors": []}
        for s in self.states.values():
            doc["states"].append({"id": s.id, "timestamp": s.timestamp, "pose": s.pose.as_vector().tolist(),
                                  "role": s.role, "fixed": s.fixed})
        for f in self.factors:
            if isinstance(f, RelativePoseFactor):
                doc["factors"].append({"type": "relative_pose", "state_r": f.state_r, "state_c": f.state_c,
                                       "measured": f.measured.as_vector().tolist(),
                                       "information": f.information.tolist()})
            else:
                doc["factors"].append({"type": f.kind, "state_a": f.state_a, "state_b": f.state_b,
                                       "submap": names.get(id(f.submap), str(id(f.submap))),
                                       "sigma_z": f.sigma_z, "g_min": f.g_min,
                                       "points": f.points.tolist()})
        Path(path).write_text(json.dumps(doc, indent=1))

    @classmethod
    def load(cls, path, submaps: dict[str, OccupancySubmap] | None = None) -> "Problem":
        doc = json.loads(Path(path).read_text())
        if doc.get("format") != "occslam-problem":
            raise ValueError(f"{path}: not a problem dump")
        pb = cls()
        for s in doc["states"]:
            pb.add_state(s["timestamp"], Pose.from_vector(s["pose"]), s["role"], s["fixed"], s["id"])
        for f in doc["factors"]:
            if f["type"] == "relative_pose":
                pb.add_factor(RelativePoseFactor(f["state_r"], f["state_c"], Pose.from_vector(f["measured"]),
                                                 np.array(f["information"])))
            else:
                if submaps is None or f["submap"] not in submaps:
                    raise KeyError(f"submap {f['submap']!r} not provided")
                pb.add_factor(LidarFactor(f["type"], f["state_a"], f["state_b"], submaps[f["submap"]],
                                          np.array(f["points"]), f["sigma_z"], f["g_min"]))
        return pb


def _active_factors(problem: Problem, free: set[int]):
    return [f for f in problem.factors if any(s in free for s in f.states)]


def total_cost(problem: Problem, poses: dict[int, Pose] | None = None, factors=None) -> float:
    poses = poses or problem.poses()
    factors = problem.factors if factors is None else factors
    c = 0.0
    for f in factors:
        if isinstance(f, RelativePoseFactor):
            e = relative_pose_error(f, poses[f.state_r], poses[f.state_c])
            c += 0.5 * float(e @ f.information @ e)
        else:
            ev = f.evaluate(poses[f.state_a], poses[f.state_b], with_jacobians=False)
            c += 0.5 * float(ev.residuals @ ev.residuals)
    return c


def _check_gauge(problem: Problem, free: set[int], factors):
    parent = {s: s for s in problem.states}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for f in factors:
        a, b = f.states
        parent[find(a)] = find(b)
    anchored = {find(s) for s in problem.states if s not in free}
    loose = [s for s in free if find(s) not in anchored]
    if loose:
        raise GaugeError(loose)


def _linearize(problem: Problem, poses, col: dict[int, int], n: int, factors):
    rows, cols, vals = [], [], []
    b = np.zeros(n)
    cost = 0.0

    def add_block(i, j, block):
        r = np.repeat(np.arange(i, i + 6), 6)
        c = np.tile(np.arange(j, j + 6), 6)
        rows.append(r)
        cols.append(c)
        vals.append(block.ravel())

    for f in factors:
        if isinstance(f, RelativePoseFactor):
            e, Ja, Jb = relative_pose_error_and_jacobians(f.measured, poses[f.state_r], poses[f.state_c])
            W = f.information
            cost += 0.5 * float(e @ W @ e)
            We = W @ e
            blocks = [(f.state_r, Ja), (f.state_c, Jb)]
            jac = {s: J for s, J in blocks if s in col}
            for s, J in jac.items():
                b[col[s]:col[s] + 6] += J.T @ We
            for s1, J1 in jac.items():
                WJ1 = W @ J1
                for s2, J2 in jac.items():
                    add_block(col[s2], col[s1], J2.T @ WJ1)
        else:
            ev = f.evaluate(poses[f.state_a], poses[f.state_b])
            cost += 0.5 * float(ev.residuals @ ev.residuals)
            jac = {s: J for s, J in ((f.state_a, ev.J_a), (f.state_b, ev.J_b)) if s in col}
            for s, J in jac.items():
                b[col[s]:col[s] + 6] += J.T @ ev.residuals
            for s1, J1 in jac.items():
                for s2, J2 in jac.items():
                    add_block(col[s2], col[s1], J2.T @ J1)
    if rows:
        H = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    else:
        H = sp.csc_matrix((n, n))
    return H, b, cost


def optimize(problem: Problem, config: SolverConfig | None = None, free_states=None,
             callback: Callable | None = None) -> OptimizeResult:
    """Levenberg-Marquardt over the non-fixed states (or ``free_states`` if given).

    Does not modify ``problem``; apply ``result.poses`` with :meth:`Problem.set_poses`.
    """
    config = config or SolverConfig()
    if free_states is None:
        free = {i for i, s in problem.states.items() if not s.fixed}
    else:
        free = {i for i in free_states if not problem.states[i].fixed}
    order = sorted(free)
    col = {s: 6 * k for k, s in enumerate(order)}
    n = 6 * len(order)
    factors = _active_factors(problem, free)
    poses = dict(problem.poses())
    if n == 0:
        c = total_cost(problem, poses, factors)
        return OptimizeResult(poses, [c], "no_free_states", 0, 0)
    _check_gauge(problem, free, factors)

    lam = config.initial_lambda
    H, b, cost = _linearize(problem, poses, col, n, factors)
    trace = [cost]
    iterations = 0
    accepted = 0
    termination = "max_iterations"
    if cost == 0.0:
        return OptimizeResult(poses, trace, "zero_cost", 0, n)
    while iterations < config.max_iterations:
        iterations += 1
        D = np.maximum(H.diagonal(), 1e-6)
        A = (H + sp.diags(lam * D)).tocsc()
        try:
            delta = spla.spsolve(A, -b)
        except RuntimeError as exc:  # singular factorisation
            raise GaugeError(order) from exc
        if not np.all(np.isfinite(delta)):
            raise GaugeError(order)
        step = float(np.linalg.norm(delta))
        if step < config.step_tol:
            termination = "step_tol"
            break
        cand = dict(poses)
        for s in order:
            k = col[s]
            cand[s] = apply_perturbation(poses[s], delta[k:k + 6])
        new_cost = total_cost(problem, cand, factors)
        if new_cost < cost:
            rel = (cost - new_cost) / max(cost, 1e-300)
            poses = cand
            trace.append(new_cost)
            accepted += 1
            cost = new_cost
            lam = max(lam * config.lambda_down, 1e-12)
            if callback is not None:
                callback(iterations, cost, poses)
            if rel < config.cost_tol or cost == 0.0:
                termination = "cost_tol"
                break
            H, b, cost = _linearize(problem, poses, col, n, factors)
        else:
            lam *= config.lambda_up
            if lam > config.max_lambda:
                termination = "damping_exhausted"
                break
    return OptimizeResult(poses, trace, termination, iterations, n, accepted)


def marginalize_or_fix(problem: Problem, states) -> Problem:
    """Copy of ``problem`` with ``states`` held constant (no Schur complement)."""
    out = problem.copy()
    for s in states:
        if s not in out.states:
            raise KeyError(f"unknown state {s}")
        out.states[s].fixed = True
    if all(s.fixed for s in out.states.values()):
        warnings.warn("all states fixed; nothing left to optimise", RuntimeWarning, stacklevel=2)
    return out


__all__ = [
    "GaugeError", "LidarFactor", "OptimizeResult", "Problem", "RelativePoseFactor",
    "SolverConfig", "StateNode", "information_from_sigmas", "marginalize_or_fix", "optimize",
    "relative_pose_error", "relative_pose_error_and_jacobians", "total_cost",
]
