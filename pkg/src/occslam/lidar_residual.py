"""Correspondence-free occupancy residual and its analytic Jacobians.

A point ``p_Sb`` measured in frame ``S_b`` is mapped into the submap frame
``S_a`` and compared against the occupancy field there:

    e = L / sqrt(L_min^2 / 9 + sigma_z^2 |grad L|^2)

which equals the metric distance ``d = L / |grad L|`` divided by the total
uncertainty ``sqrt(sigma_map^2 + sigma_z^2)`` with
``sigma_map = |L_min| / (3 |grad L|)``. Perturbations follow
``r = r_bar + dr``, ``C = Exp(dalpha) C_bar``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Pose, relative
from .occupancy import OccupancySubmap


class ZeroGradientError(ValueError):
    pass


def default_g_min(submap: OccupancySubmap) -> float:
    """10% of a saturated one-voxel transition."""
    return 0.1 * abs(submap.params.l_min) / submap.resolution


def map_distance_and_sigma(L: float, grad_L, l_min: float) -> tuple[float, float]:
    """Metric distance to the surface and the map uncertainty."""
    g = float(np.linalg.norm(grad_L))
    if not g > 0:
        raise ZeroGradientError("distance undefined for a zero occupancy gradient")
    return L / g, abs(l_min) / (3.0 * g)


def residual_from_field(L, grad_L, l_min: float, sigma_z: float):
    """Residual from the occupancy value and gradient (broadcasts over rows)."""
    g2 = np.sum(np.square(grad_L), axis=-1)
    return L / np.sqrt(l_min * l_min / 9.0 + sigma_z * sigma_z * g2)


@dataclass(frozen=True)
class LidarFactorTerm:
    p_Sb: np.ndarray
    state_a: int
    state_b: int
    submap: OccupancySubmap
    sigma_z: float = 0.02
    g_min: float | None = None

    def __post_init__(self):
        if self.state_a == self.state_b:
            raise ValueError("a LiDAR term must bind two distinct states")
        object.__setattr__(self, "p_Sb", np.asarray(self.p_Sb, dtype=float).reshape(3))


@dataclass
class BatchEvaluation:
    residuals: np.ndarray  # (N,), zero where invalid
    J_a: np.ndarray  # (N, 6)
    J_b: np.ndarray  # (N, 6)
    valid: np.ndarray  # (N,) bool
    p_Sa: np.ndarray  # (N, 3)


def evaluate_batch(submap: OccupancySubmap, points_Sb, T_WSa: Pose, T_WSb: Pose,
                   sigma_z: float, g_min: float | None = None,
                   with_jacobians: bool = True) -> BatchEvaluation:
    """Residuals (and Jacobians w.r.t. both pose perturbations) for many points."""
    p = np.atleast_2d(np.asarray(points_Sb, dtype=float))
    n = len(p)
    if g_min is None:
        g_min = default_g_min(submap)
    l_min = submap.params.l_min
    p_Sa = relative(T_WSa, T_WSb).transform(p)
    L, g, ok = submap.query_with_gradient(p_Sa)
    gn = np.linalg.norm(g, axis=1)
    valid = ok & (gn >= g_min)
    den = np.sqrt(l_min * l_min / 9.0 + sigma_z * sigma_z * gn * gn)
    e = np.where(valid, L / den, 0.0)
    J_a = np.zeros((n, 6))
    J_b = np.zeros((n, 6))
    if with_jacobians and n:
        de_dp = np.where(valid[:, None], g / den[:, None], 0.0)
        gW = de_dp @ T_WSa.rotation.matrix.T  # rows of de/dp * C_SaW
        u = p @ T_WSb.rotation.matrix.T  # C_WSb p
        v = u + (T_WSb.translation - T_WSa.translation)
        J_a[:, :3] = -gW
        J_a[:, 3:] = np.cross(gW, v)
        J_b[:, :3] = gW
        J_b[:, 3:] = -np.cross(gW, u)
    return BatchEvaluation(e, J_a, J_b, valid, p_Sa)


def evaluate(term: LidarFactorTerm, T_WSa: Pose, T_WSb: Pose) -> tuple[float, bool]:
    ev = evaluate_batch(term.submap, term.p_Sb[None], T_WSa, T_WSb, term.sigma_z, term.g_min,
                        with_jacobians=False)
    return float(ev.residuals[0]), bool(ev.valid[0])


def jacobians(term: LidarFactorTerm, T_WSa: Pose, T_WSb: Pose) -> tuple[np.ndarray, np.ndarray, bool]:
    ev = evaluate_batch(term.submap, term.p_Sb[None], T_WSa, T_WSb, term.sigma_z, term.g_min)
    return ev.J_a[0], ev.J_b[0], bool(ev.valid[0])
