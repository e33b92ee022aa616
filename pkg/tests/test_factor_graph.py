import math

import numpy as np
import pytest

from occslam import sim
from occslam.geometry import Pose, apply_perturbation, exp_so3, log_so3
from occslam.factor_graph import (GaugeError, LidarFactor, Problem, RelativePoseFactor, SolverConfig,
                                  information_from_sigmas, marginalize_or_fix, optimize, relative_pose_error,
                                  relative_pose_error_and_jacobians, total_cost)
from occslam.submapping import sample_factor_points

import oracles
from conftest import random_pose


def rotation_error_deg(A, B):
    return math.degrees(np.linalg.norm(log_so3(A.rotation @ B.rotation.inverse())))


def perturb(T, rng, t=0.10, deg=5.0):
    dt = rng.normal(size=3)
    da = rng.normal(size=3)
    d = np.concatenate([dt * t / np.linalg.norm(dt), da * math.radians(deg) / np.linalg.norm(da)])
    return apply_perturbation(T, d)


def chain(n, rng, step=1.0):
    """Ground-truth poses along a gently turning path."""
    poses = [Pose()]
    for _ in range(n - 1):
        inc = Pose(exp_so3([0.0, 0.0, 0.15]) if rng is None else exp_so3(rng.normal(0, 0.05, 3)),
                   [step, 0.0, 0.0])
        poses.append(poses[-1] @ inc)
    return poses


def odometry_problem(gt, rng, sigma_t=0.05, sigma_r=0.02, fix_first=True):
    pb = Problem()
    for k, T in enumerate(gt):
        pb.add_state(float(k), T, fixed=fix_first and k == 0)
    W = information_from_sigmas(sigma_t, sigma_r)
    for k in range(len(gt) - 1):
        rel = gt[k].inverse() @ gt[k + 1]
        noisy = apply_perturbation(rel, np.concatenate([rng.normal(0, sigma_t, 3), rng.normal(0, sigma_r, 3)]))
        pb.add_factor(RelativePoseFactor(k, k + 1, noisy, W))
    return pb


class TestRelativePoseError:
    def test_consistent_measurement_is_zero(self, rng):
        Ta, Tb = random_pose(rng), random_pose(rng)
        f = RelativePoseFactor(0, 1, Ta.inverse() @ Tb)
        np.testing.assert_allclose(relative_pose_error(f, Ta, Tb), 0.0, atol=1e-12)

    def test_translation_offset(self):
        f = RelativePoseFactor(0, 1, Pose(translation=[1.0, 0.0, 0.0]))
        e = relative_pose_error(f, Pose(), Pose(translation=[1.01, 0.0, 0.0]))
        np.testing.assert_allclose(e, [0.01, 0, 0, 0, 0, 0], atol=1e-12)

    def test_small_rotation_error_is_angle(self):
        f = RelativePoseFactor(0, 1, Pose())
        e = relative_pose_error(f, Pose(), Pose(exp_so3([0.0, 0.0, 1e-3])))
        np.testing.assert_allclose(e[3:], [0.0, 0.0, 1e-3], rtol=1e-6)

    def test_jacobians_finite_differences(self, rng):
        for _ in range(50):
            Tr, Tc = random_pose(rng, 2.0), random_pose(rng, 2.0)
            meas = apply_perturbation(Tr.inverse() @ Tc, rng.normal(0, 0.1, 6))
            _, Jr, Jc = relative_pose_error_and_jacobians(meas, Tr, Tc)
            Nr = oracles.numeric_jacobian(lambda X: relative_pose_error_and_jacobians(meas, X, Tc)[0], Tr,
                                          apply_perturbation)
            Nc = oracles.numeric_jacobian(lambda X: relative_pose_error_and_jacobians(meas, Tr, X)[0], Tc,
                                          apply_perturbation)
            np.testing.assert_allclose(Jr, Nr, atol=1e-5)
            np.testing.assert_allclose(Jc, Nc, atol=1e-5)

    def test_rejects_asymmetric_information(self):
        W = np.eye(6)
        W[0, 1] = 1.0
        with pytest.raises(ValueError):
            RelativePoseFactor(0, 1, Pose(), W)

    def test_rejects_indefinite_information(self):
        with pytest.raises(ValueError):
            RelativePoseFactor(0, 1, Pose(), -np.eye(6))


class TestTotalCost:
    def test_no_factors(self, rng):
        pb = Problem()
        pb.add_state(0.0, random_pose(rng))
        assert total_cost(pb) == 0.0

    def test_single_factor_half_weighted_norm(self):
        pb = Problem()
        pb.add_state(0.0, Pose(), fixed=True)
        pb.add_state(1.0, Pose(translation=[1.02, 0.0, 0.0]))
        W = information_from_sigmas(0.1, 0.1)
        pb.add_factor(RelativePoseFactor(0, 1, Pose(translation=[1.0, 0.0, 0.0]), W))
        assert total_cost(pb) == pytest.approx(0.5 * 0.02**2 / 0.01, rel=1e-9)

    def test_ground_truth_is_minimum(self, rng):
        gt = chain(6, rng)
        pb = Problem()
        for k, T in enumerate(gt):
            pb.add_state(float(k), T, fixed=k == 0)
        for k in range(5):
            pb.add_factor(RelativePoseFactor(k, k + 1, gt[k].inverse() @ gt[k + 1]))
        c0 = total_cost(pb)
        assert c0 < 1e-20
        for _ in range(100):
            poses = {k: apply_perturbation(T, rng.normal(0, 0.05, 6)) for k, T in pb.poses().items()}
            assert total_cost(pb, poses) >= c0

    def test_unknown_state_rejected(self):
        pb = Problem()
        pb.add_state(0.0, Pose())
        with pytest.raises(KeyError):
            pb.add_factor(RelativePoseFactor(0, 3, Pose()))


class TestLevenbergMarquardt:
    def test_zero_error_terminates_immediately(self, rng):
        gt = chain(4, rng)
        pb = Problem()
        for k, T in enumerate(gt):
            pb.add_state(float(k), T, fixed=k == 0)
        for k in range(3):
            pb.add_factor(RelativePoseFactor(k, k + 1, gt[k].inverse() @ gt[k + 1]))
        res = optimize(pb)
        assert res.iterations <= 1
        for k in range(4):
            np.testing.assert_allclose(res.poses[k].matrix, gt[k].matrix, atol=1e-12)

    def test_consistent_chain_converges(self, rng):
        gt = chain(8, rng)
        pb = Problem()
        for k, T in enumerate(gt):
            pb.add_state(float(k), T if k == 0 else perturb(T, rng, 0.3, 10.0), fixed=k == 0)
        for k in range(7):
            pb.add_factor(RelativePoseFactor(k, k + 1, gt[k].inverse() @ gt[k + 1]))
        res = optimize(pb)
        assert res.final_cost < 1e-12
        for k in range(8):
            np.testing.assert_allclose(res.poses[k].translation, gt[k].translation, atol=1e-6)

    def test_accepted_costs_non_increasing(self, rng):
        gt = chain(10, rng)
        pb = odometry_problem(gt, rng)
        for k in range(5):
            pb.add_factor(RelativePoseFactor(k, k + 5, gt[k].inverse() @ gt[k + 5], information_from_sigmas(0.1, 0.05)))
        pb.set_poses({k: perturb(T, rng, 0.2, 5.0) for k, T in pb.poses().items() if k})
        res = optimize(pb)
        assert np.all(np.diff(res.cost_trace) <= 0)
        assert res.final_cost < res.initial_cost

    def test_problem_not_modified(self, rng):
        gt = chain(3, rng)
        pb = odometry_problem(gt, rng)
        before = {k: T.as_vector() for k, T in pb.poses().items()}
        optimize(pb)
        for k, v in before.items():
            np.testing.assert_array_equal(pb.pose(k).as_vector(), v)

    def test_unfixed_gauge_raises(self, rng):
        pb = odometry_problem(chain(4, rng), rng, fix_first=False)
        with pytest.raises(GaugeError) as info:
            optimize(pb)
        assert info.value.free_states == [0, 1, 2, 3]

    def test_disconnected_island_raises(self, rng):
        pb = odometry_problem(chain(3, rng), rng)
        pb.add_state(5.0, Pose())
        pb.add_state(6.0, Pose())
        pb.add_factor(RelativePoseFactor(3, 4, Pose()))
        with pytest.raises(GaugeError) as info:
            optimize(pb)
        assert info.value.free_states == [3, 4]

    def test_gauge_invariance(self, rng):
        gt = chain(6, rng)
        pb = odometry_problem(gt, rng)
        res1 = optimize(pb)
        G = random_pose(rng, 3.0)
        pb2 = Problem()
        for k, s in pb.states.items():
            pb2.add_state(s.timestamp, G @ s.pose, fixed=s.fixed)
        for f in pb.factors:
            pb2.add_factor(f)
        res2 = optimize(pb2)
        assert res2.final_cost == pytest.approx(res1.final_cost, rel=1e-6, abs=1e-12)
        for k in range(6):
            np.testing.assert_allclose((G @ res1.poses[k]).matrix, res2.poses[k].matrix, atol=1e-6)

    def test_solver_config_validation(self):
        with pytest.raises(ValueError):
            SolverConfig(lambda_up=0.5)
        with pytest.raises(ValueError):
            SolverConfig(max_iterations=0)


class TestLidarAlignment:
    def test_frame_to_map_recovery(self, box10_map):
        scene, sub = box10_map
        lidar = sim.LidarModel(n_beams=32, vfov=(-60.0, 60.0), rate=100_000, seed=3)
        T_true = Pose(exp_so3([0.0, 0.1, 0.4]), [0.3, -0.2, 0.1])
        pts = sample_factor_points(sim.raycast(scene, T_true, lidar, 0.0, 0.1).points, 100, 0)
        rng = np.random.default_rng(0)
        for _ in range(3):
            pb = Problem()
            a = pb.add_state(0.0, Pose(), "submap_anchor", fixed=True)
            b = pb.add_state(0.1, perturb(T_true, rng))
            pb.add_factor(LidarFactor("frame_to_map", a, b, sub, pts))
            res = optimize(pb)
            assert res.iterations <= 30
            assert np.linalg.norm(res.poses[b].translation - T_true.translation) < 0.01
            assert rotation_error_deg(res.poses[b], T_true) < 0.5

    def test_two_submap_alignment(self, box10_map):
        scene, sub = box10_map
        lidar = sim.LidarModel(n_beams=64, vfov=(-70.0, 70.0), rate=300_000, seed=4)
        T_b = Pose(exp_so3([0.0, 0.0, -0.3]), [-0.5, 0.6, 0.2])
        pts = sample_factor_points(sim.raycast(scene, T_b, lidar, 0.0, 0.1).points, 1000, 1)
        rng = np.random.default_rng(1)
        pb = Problem()
        pb.add_state(0.0, Pose(), "submap_anchor", fixed=True)
        pb.add_state(1.0, perturb(T_b, rng, 0.2, 2.0), "submap_anchor")
        pb.add_factor(LidarFactor("map_to_map", 0, 1, sub, pts))
        res = optimize(pb)
        assert np.linalg.norm(res.poses[1].translation - T_b.translation) < 0.02

    def test_invalid_terms_cost_nothing(self, box10_map):
        _, sub = box10_map
        far = np.full((10, 3), 50.0)
        pb = Problem()
        pb.add_state(0.0, Pose(), fixed=True)
        pb.add_state(1.0, Pose())
        pb.add_factor(LidarFactor("frame_to_map", 0, 1, sub, far))
        assert total_cost(pb) == 0.0

    def test_factor_validation(self, box10_map):
        _, sub = box10_map
        with pytest.raises(ValueError):
            LidarFactor("scan_to_scan", 0, 1, sub, np.zeros((1, 3)))
        with pytest.raises(ValueError):
            LidarFactor("frame_to_map", 1, 1, sub, np.zeros((1, 3)))


class TestFixing:
    def test_fixed_states_bit_identical(self, rng):
        gt = chain(6, rng)
        pb = odometry_problem(gt, rng)
        pb.set_poses({k: perturb(T, rng, 0.1, 2.0) for k, T in pb.poses().items() if k})
        fixed = marginalize_or_fix(pb, [1, 2])
        res = optimize(fixed)
        for k in (0, 1, 2):
            np.testing.assert_array_equal(res.poses[k].as_vector(), pb.pose(k).as_vector())
        assert res.n_params == 6 * 3
        assert not pb.states[1].fixed

    def test_fix_everything_warns(self, rng):
        pb = odometry_problem(chain(3, rng), rng)
        with pytest.warns(RuntimeWarning):
            all_fixed = marginalize_or_fix(pb, [1, 2])
        res = optimize(all_fixed)
        assert res.termination == "no_free_states"

    def test_unknown_state(self, rng):
        with pytest.raises(KeyError):
            marginalize_or_fix(odometry_problem(chain(3, rng), rng), [7])

    def test_sliding_window_close_to_batch(self):
        rng = np.random.default_rng(4)
        gt = chain(20, None)
        pb = odometry_problem(gt, rng)
        # noisy absolute fixes tie every state back to the fixed origin
        W = information_from_sigmas(0.1, 0.05)
        for k in range(1, 20):
            meas = apply_perturbation(gt[k], np.concatenate([rng.normal(0, 0.1, 3), rng.normal(0, 0.05, 3)]))
            pb.add_factor(RelativePoseFactor(0, k, meas, W))
        batch = optimize(pb, SolverConfig(max_iterations=50)).poses
        window = pb.copy()
        for k in range(1, 20):
            free = range(max(1, k - 4), k + 1)
            res = optimize(window, SolverConfig(max_iterations=50), free_states=free)
            window.set_poses({s: res.poses[s] for s in free})
        ate_batch = sim.ate([batch[k] for k in range(20)], gt).rmse
        ate_window = sim.ate([window.pose(k) for k in range(20)], gt).rmse
        assert ate_window <= 2.0 * ate_batch


class TestDump:
    def test_round_trip(self, tmp_path, rng, box10_map):
        _, sub = box10_map
        pb = odometry_problem(chain(4, rng), rng)
        pb.add_factor(LidarFactor("frame_to_map", 0, 3, sub, rng.normal(size=(5, 3)), 0.03))
        path = tmp_path / "problem.json"
        pb.dump(path, {id(sub): "room"})
        back = Problem.load(path, {"room": sub})
        assert list(back.states) == list(pb.states)
        for k in pb.states:
            np.testing.assert_array_equal(back.pose(k).as_vector(), pb.pose(k).as_vector())
            assert back.states[k].fixed == pb.states[k].fixed
        assert total_cost(back) == total_cost(pb)
        assert back.factors[-1].sigma_z == 0.03

    def test_missing_submap(self, tmp_path, rng, box10_map):
        _, sub = box10_map
        pb = odometry_problem(chain(2, rng), rng)
        pb.add_factor(LidarFactor("frame_to_map", 0, 1, sub, np.zeros((1, 3))))
        pb.dump(tmp_path / "p.json")
        with pytest.raises(KeyError):
            Problem.load(tmp_path / "p.json")

    def test_not_a_dump(self, tmp_path):
        (tmp_path / "x.json").write_text("{}")
        with pytest.raises(ValueError):
            Problem.load(tmp_path / "x.json")
