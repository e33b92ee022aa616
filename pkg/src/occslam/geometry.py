"""SO(3)/SE(3) algebra used throughout the package.

Conventions
-----------
* Quaternions are stored as ``(w, x, y, z)`` and canonicalised to ``w >= 0``.
* ``Pose`` ``T_AB`` maps points from frame B to frame A: ``p_A = C_AB p_B + r_AB``.
* Pose perturbations are ``[dr, dalpha]``: the translation is perturbed
  additively and the rotation is left-multiplied in the world frame,
  ``r = r_bar + dr`` and ``C = Exp(dalpha) C_bar``. Every Jacobian in the
  package is expressed with respect to this perturbation.

Besides the value types there are array helpers (``quat_*``) operating on
``(..., 4)`` arrays; they are used by deskewing and by the simulator where
thousands of poses are handled at once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

_SMALL_ANGLE = 1e-8


class DeskewWindowError(ValueError):
    """Raised when a pose is requested outside its interpolation window."""


def skew(v) -> np.ndarray:
    """Skew-symmetric matrix ``[v]x`` so that ``skew(a) @ b == cross(a, b)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _canonical(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = math.sqrt(float(q @ q))
    if n == 0.0 or not math.isfinite(n):
        raise ValueError(f"invalid quaternion {q!r}")
    q = q / n
    if q[0] < 0.0 or (q[0] == 0.0 and _first_nonzero_negative(q[1:])):
        q = -q
    return q


def _first_nonzero_negative(v: np.ndarray) -> bool:
    for c in v:
        if c != 0.0:
            return c < 0.0
    return False


# ---------------------------------------------------------------------------
# array helpers
# ---------------------------------------------------------------------------


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product of broadcastable ``(..., 4)`` arrays."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=float), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices ``(..., 3, 3)`` from unit quaternions ``(..., 4)``."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    m = np.stack(
        [
            1 - 2 * (yy + zz), 2 * (xy - wz), 2 * (xz + wy),
            2 * (xy + wz), 1 - 2 * (xx + zz), 2 * (yz - wx),
            2 * (xz - wy), 2 * (yz + wx), 1 - 2 * (xx + yy),
        ],
        axis=-1,
    )
    return m.reshape(q.shape[:-1] + (3, 3))


def quat_from_matrix(m: np.ndarray) -> np.ndarray:
    """Unit quaternion from a single rotation matrix (Shepperd's method)."""
    m = np.asarray(m, dtype=float)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0.0:
        s = 2.0 * math.sqrt(1.0 + tr)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    return _canonical(np.array(q))


def quat_exp(alpha: np.ndarray) -> np.ndarray:
    """Vectorised ``Exp`` map from rotation vectors ``(..., 3)`` to quaternions."""
    alpha = np.asarray(alpha, dtype=float)
    theta = np.linalg.norm(alpha, axis=-1)
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    half = 0.5 * theta
    k = np.where(small, 0.5 - theta * theta / 48.0, np.sin(half) / safe)
    w = np.where(small, 1.0 - theta * theta / 8.0, np.cos(half))
    q = np.concatenate([w[..., None], k[..., None] * alpha], axis=-1)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_log(q: np.ndarray) -> np.ndarray:
    """Vectorised ``Log`` map; rotation angle in ``[0, pi]``."""
    q = np.asarray(q, dtype=float)
    q = np.where(q[..., :1] < 0.0, -q, q)
    w = q[..., 0]
    v = q[..., 1:]
    s = np.linalg.norm(v, axis=-1)
    theta = 2.0 * np.arctan2(s, w)
    small = s < 1e-12
    # theta/s -> 2/w as s -> 0 (w -> 1 for unit quaternions)
    k = np.where(small, 2.0 / np.where(w == 0.0, 1.0, w), theta / np.where(small, 1.0, s))
    return k[..., None] * v


def quat_slerp(q0: np.ndarray, q1: np.ndarray, f) -> np.ndarray:
    """Shortest-arc spherical interpolation, ``f`` broadcast over ``(...,)``."""
    q0 = np.asarray(q0, dtype=float)
    q1 = np.asarray(q1, dtype=float)
    f = np.asarray(f, dtype=float)
    d = np.sum(q0 * q1, axis=-1)
    q1 = np.where((d < 0.0)[..., None], -q1, q1)
    d = np.abs(d)
    # q0^-1 q1 as a rotation vector, scaled and re-applied
    rel = quat_multiply(q0 * np.array([1.0, -1.0, -1.0, -1.0]), q1)
    out = quat_multiply(q0, quat_exp(f[..., None] * quat_log(rel)))
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# value types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Rotation:
    """Unit quaternion ``(w, x, y, z)``, canonicalised to ``w >= 0``."""

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        q = _canonical(self.q)
        q.setflags(write=False)
        object.__setattr__(self, "q", q)

    @classmethod
    def identity(cls) -> "Rotation":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "Rotation":
        return cls(quat_from_matrix(m))

    @classmethod
    def from_rotvec(cls, alpha) -> "Rotation":
        return exp_so3(alpha)

    @property
    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def __matmul__(self, other: "Rotation") -> "Rotation":
        return Rotation(quat_multiply(self.q, other.q))

    def inverse(self) -> "Rotation":
        return Rotation(self.q * np.array([1.0, -1.0, -1.0, -1.0]))

    def rotate(self, p) -> np.ndarray:
        return np.asarray(p, dtype=float) @ self.matrix.T

    def __repr__(self) -> str:
        return "Rotation(w={:.6g}, x={:.6g}, y={:.6g}, z={:.6g})".format(*self.q)


@dataclass(frozen=True, eq=False)
class PosePerturbation:
    dr: np.ndarray
    dalpha: np.ndarray

    @classmethod
    def from_vector(cls, v) -> "PosePerturbation":
        v = np.asarray(v, dtype=float)
        return cls(v[:3], v[3:6])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.dr, float), np.asarray(self.dalpha, float)])


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``T_AB``; ``transform_point`` computes ``C_AB p + r_AB``."""

    rotation: Rotation = field(default_factory=Rotation)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        t = np.array(self.translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("pose translation must be finite")
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)
        if not isinstance(self.rotation, Rotation):
            object.__setattr__(self, "rotation", Rotation(self.rotation))

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=float)
        return cls(Rotation.from_matrix(m[:3, :3]), m[:3, 3])

    @classmethod
    def from_vector(cls, v) -> "Pose":
        """From ``[x, y, z, qw, qx, qy, qz]``."""
        v = np.asarray(v, dtype=float)
        return cls(Rotation(v[3:7]), v[:3])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.translation, self.rotation.q])

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.matrix
        m[:3, 3] = self.translation
        return m

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def inverse(self) -> "Pose":
        return inverse(self)

    def transform(self, points) -> np.ndarray:
        """Apply to an ``(N, 3)`` array (or a single 3-vector)."""
        return np.asarray(points, dtype=float) @ self.rotation.matrix.T + self.translation

    def __repr__(self) -> str:
        return f"Pose(t={np.array2string(self.translation, precision=6)}, {self.rotation!r})"


PerturbationLike = Union[PosePerturbation, np.ndarray, list, tuple]


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def exp_so3(alpha) -> Rotation:
    """Rotation by ``|alpha|`` about ``alpha / |alpha|``."""
    return Rotation(quat_exp(np.asarray(alpha, dtype=float).reshape(3)))


def log_so3(rotation: Rotation) -> np.ndarray:
    return quat_log(rotation.q)


def compose(T_ab: Pose, T_bc: Pose) -> Pose:
    return Pose(
        Rotation(quat_multiply(T_ab.rotation.q, T_bc.rotation.q)),
        T_ab.rotation.matrix @ T_bc.translation + T_ab.translation,
    )


def inverse(T: Pose) -> Pose:
    c_inv = T.rotation.inverse()
    return Pose(c_inv, -(c_inv.matrix @ T.translation))


def transform_point(T: Pose, p) -> np.ndarray:
    return T.rotation.matrix @ np.asarray(p, dtype=float) + T.translation


def relative(T_wa: Pose, T_wb: Pose) -> Pose:
    """``T_ab = T_wa^-1 T_wb``."""
    return compose(inverse(T_wa), T_wb)


def apply_perturbation(T: Pose, delta: PerturbationLike) -> Pose:
    """World-frame left perturbation: ``r + dr``, ``Exp(dalpha) C``."""
    if isinstance(delta, PosePerturbation):
        dr, da = np.asarray(delta.dr, float), np.asarray(delta.dalpha, float)
    else:
        v = np.asarray(delta, dtype=float).reshape(6)
        dr, da = v[:3], v[3:]
    if not np.any(da):
        rot = T.rotation
    else:
        rot = Rotation(quat_multiply(quat_exp(da), T.rotation.q))
    return Pose(rot, T.translation + dr)


def interpolate_pose(T0: Pose, t0: float, T1: Pose, t1: float, t: float) -> Pose:
    """Per-component interpolation: slerp on rotation, lerp on translation."""
    if not t0 < t1:
        raise DeskewWindowError(f"empty interpolation window [{t0}, {t1}]")
    if t < t0 or t > t1:
        raise DeskewWindowError(f"t={t} outside [{t0}, {t1}]")
    if t == t0:
        return T0
    if t == t1:
        return T1
    f = (t - t0) / (t1 - t0)
    q = quat_slerp(T0.rotation.q, T1.rotation.q, f)
    return Pose(Rotation(q), (1.0 - f) * T0.translation + f * T1.translation)


def interpolate_poses(times, poses, query) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised interpolation of a pose track at many query times.

    Returns ``(rotations (N, 3, 3), translations (N, 3), inside (N,))``.
    Queries outside ``[times[0], times[-1]]`` are flagged ``inside=False``
    and receive the nearest end pose.
    """
    times = np.asarray(times, dtype=float)
    query = np.asarray(query, dtype=float)
    qs = np.array([p.rotation.q for p in poses])
    ts = np.array([p.translation for p in poses])
    inside = (query >= times[0]) & (query <= times[-1])
    if len(times) == 1:
        n = len(query)
        return (
            np.broadcast_to(quat_to_matrix(qs[0]), (n, 3, 3)).copy(),
            np.broadcast_to(ts[0], (n, 3)).copy(),
            query == times[0],
        )
    k = np.clip(np.searchsorted(times, query, side="right") - 1, 0, len(times) - 2)
    span = times[k + 1] - times[k]
    f = np.clip((query - times[k]) / span, 0.0, 1.0)
    q = quat_slerp(qs[k], qs[k + 1], f)
    trans = (1.0 - f)[:, None] * ts[k] + f[:, None] * ts[k + 1]
    return quat_to_matrix(q), trans, inside


def rotation_angle(R: Rotation) -> float:
    return float(np.linalg.norm(log_so3(R)))


def pose_errors(T_est: Pose, T_ref: Pose) -> tuple[float, float]:
    """Translation (m) and rotation (rad) distance between two poses."""
    d = relative(T_ref, T_est)
    return float(np.linalg.norm(T_est.translation - T_ref.translation)), rotation_angle(d.rotation)
