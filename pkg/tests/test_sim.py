import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from occslam import sim
from occslam.geometry import Pose, exp_so3, relative

import oracles
from conftest import random_pose

# 12-point helix with point 4 moved 0.1 m along x; value frozen from the brute-force oracle
HELIX_ATE = 0.0268947149284686


def helix():
    k = np.arange(12)
    return np.stack([2 * np.cos(0.5 * k), 1.5 * np.sin(0.5 * k), 0.1 * k], axis=1)


class TestScenes:
    def test_box_center_ranges(self):
        lidar = sim.LidarModel(n_beams=64, vfov=(-89.0, 89.0), rate=100_000, max_range=20.0)
        scan = sim.raycast(sim.box_room(), Pose(), lidar, 0.0, 0.1)
        r = np.linalg.norm(scan.points, axis=1)
        assert len(r) > 9000
        assert r.min() >= 5.0 - 1e-9
        assert r.max() <= 5.0 * math.sqrt(3) + 1e-9

    def test_box_ranges_match_slab_oracle(self, rng):
        scene = sim.box_room()
        o = rng.uniform(-2, 2, (200, 3))
        d = rng.normal(size=(200, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        t, inside = scene.cast(o, d)
        assert not inside.any()
        expect = [oracles.box_ray_length(oi, di, (5.0, 5.0, 5.0)) for oi, di in zip(o, d)]
        np.testing.assert_allclose(t, expect, rtol=1e-12)

    def test_empty_scene(self):
        lidar = sim.LidarModel(n_beams=4, vfov=(10.0, 20.0), rate=10_000)
        assert len(sim.raycast(sim.Scene(()), Pose(), lidar, 0.0, 0.1)) == 0

    def test_plane_out_of_view(self):
        scene = sim.Scene((sim.Plane((0.0, 0.0, -100.0), (0.0, 0.0, 1.0)),), "floor")
        lidar = sim.LidarModel(n_beams=4, vfov=(10.0, 20.0), rate=10_000)
        assert len(sim.raycast(scene, Pose(), lidar, 0.0, 0.1)) == 0

    def test_hits_on_surface(self, rng):
        scene = sim.loop_hall()
        lidar = sim.LidarModel(n_beams=16, vfov=(-30.0, 30.0), rate=50_000, max_range=40.0)
        T = Pose(exp_so3([0.0, 0.0, 0.3]), [1.0, -6.0, 1.5])
        scan = sim.raycast(scene, T, lidar, 0.0, 0.1)
        assert np.abs(scene.distance_to_surface(T.transform(scan.points))).max() < 1e-9

    def test_noisy_hits_near_surface(self):
        lidar = sim.LidarModel(n_beams=16, vfov=(-30.0, 30.0), rate=50_000, sigma_range=0.01, seed=4)
        scene = sim.box_room()
        scan = sim.raycast(scene, Pose(), lidar, 0.0, 0.1)
        assert np.abs(scene.distance_to_surface(scan.points)).max() < 6 * 0.01

    def test_range_noise_std(self):
        scene = sim.box_room()
        lidar = sim.LidarModel(n_beams=1, vfov=(10.0, 10.0), rate=10.0, sigma_range=0.02, seed=8)
        ranges = np.array([np.linalg.norm(sim.raycast(scene, Pose(), lidar, 0.0, 0.1, scan_index=k).points[0])
                           for k in range(10_000)])
        assert np.std(ranges) == pytest.approx(0.02, rel=0.1)
        assert np.mean(ranges) == pytest.approx(5.0 / math.cos(math.radians(10.0)), abs=1e-3)

    def test_deterministic(self):
        lidar = sim.LidarModel(n_beams=8, rate=20_000, sigma_range=0.02, seed=5)
        a = sim.raycast(sim.box_room(), Pose(), lidar, 0.0, 0.1, scan_index=3)
        b = sim.raycast(sim.box_room(), Pose(), lidar, 0.0, 0.1, scan_index=3)
        np.testing.assert_array_equal(a.points, b.points)
        np.testing.assert_array_equal(a.timestamps, b.timestamps)

    def test_timestamps_within_window(self):
        lidar = sim.LidarModel(pattern="dual_axis", rate=20_000)
        scan = sim.raycast(sim.box_room(), Pose(), lidar, 1.0, 1.1)
        assert scan.timestamps.min() >= 1.0 and scan.timestamps.max() <= 1.1

    def test_inside_primitive_warns(self):
        scene = sim.Scene((sim.Box((2.0, 2.0, 2.0), Pose()),), "solid")
        with pytest.warns(RuntimeWarning):
            scan = sim.raycast(scene, Pose(), sim.LidarModel(rate=1000), 0.0, 0.1)
        assert len(scan) == 0

    def test_bad_window(self):
        with pytest.raises(ValueError):
            sim.raycast(sim.box_room(), Pose(), sim.LidarModel(), 0.1, 0.1)

    def test_model_validation(self):
        with pytest.raises(ValueError):
            sim.LidarModel(rate=0.0)
        with pytest.raises(ValueError):
            sim.LidarModel(sigma_range=-1.0)
        with pytest.raises(ValueError):
            sim.LidarModel(pattern="flash")

    def test_scene_round_trip(self, tmp_path):
        scene = sim.loop_hall()
        scene.save(tmp_path / "s.json")
        back = sim.Scene.load(tmp_path / "s.json")
        assert back.to_dict() == scene.to_dict()


class TestDrift:
    def straight(self, length=100.0, step=1.0):
        n = int(length / step) + 1
        return [Pose(translation=[k * step, 0.0, 0.0]) for k in range(n)]

    def test_zero_noise_is_ground_truth(self, rng):
        gt = [random_pose(rng, 3.0) for _ in range(10)]
        for m, a, b in zip(sim.drift_odometry(gt, sim.DriftModel()), gt[:-1], gt[1:]):
            np.testing.assert_allclose(m.matrix, relative(a, b).matrix, atol=1e-12)

    def test_bias_accumulates_linearly(self):
        gt = self.straight()
        odo = sim.integrate_odometry(gt[0], sim.drift_odometry(gt, sim.DriftModel(bias_t=(0.01, 0.0, 0.0))))
        np.testing.assert_allclose(np.linalg.norm(odo[-1].translation - gt[-1].translation), 1.0, rtol=1e-9)

    def test_random_walk_scales_with_sqrt_distance(self):
        sigma = 0.02
        for length in (25.0, 100.0):
            gt = self.straight(length)
            err = []
            for seed in range(100):
                odo = sim.integrate_odometry(gt[0], sim.drift_odometry(gt, sim.DriftModel(sigma_t=sigma, seed=seed)))
                err.append(odo[-1].translation - gt[-1].translation)
            rms = math.sqrt(np.mean(np.sum(np.square(err), axis=1)))
            assert rms == pytest.approx(sigma * math.sqrt(3 * length), rel=0.2)

    def test_deterministic(self):
        gt = self.straight(10.0)
        dm = sim.DriftModel(sigma_t=0.01, sigma_theta=0.001, seed=3)
        a = sim.drift_odometry(gt, dm)
        b = sim.drift_odometry(gt, dm)
        assert all(np.array_equal(x.as_vector(), y.as_vector()) for x, y in zip(a, b))

    def test_needs_two_states(self):
        with pytest.raises(ValueError):
            sim.drift_odometry([Pose()], sim.DriftModel())

    def test_negative_noise_rejected(self):
        with pytest.raises(ValueError):
            sim.DriftModel(sigma_t=-0.1)


class TestAte:
    def test_identity(self):
        assert sim.ate(helix(), helix()).rmse == pytest.approx(0.0, abs=1e-12)

    @given(arrays(np.float64, 3, elements=st.floats(-np.pi, np.pi)),
           arrays(np.float64, 3, elements=st.floats(-50.0, 50.0)))
    def test_rigid_invariance(self, rot, trans):
        gt = helix()
        est = gt.copy()
        est[3] += [0.05, -0.02, 0.0]
        G = Pose(exp_so3(rot), trans)
        assert abs(sim.ate(G.transform(est), gt).rmse - sim.ate(est, gt).rmse) < 1e-9

    def test_single_point_perturbation(self):
        gt = helix()
        est = gt.copy()
        est[4, 0] += 0.1
        r = sim.ate(est, gt).rmse
        np.testing.assert_allclose(r, HELIX_ATE, rtol=1e-9)
        np.testing.assert_allclose(r, oracles.kabsch_rmse(est, gt), rtol=1e-9)
        assert oracles.grid_search_rmse(est, gt) == pytest.approx(r, abs=1e-6)
        assert r == pytest.approx(0.1 / math.sqrt(12), rel=0.1)

    def test_accepts_poses(self, rng):
        poses = [random_pose(rng, 3.0) for _ in range(5)]
        assert sim.ate(poses, poses).rmse < 1e-12

    def test_too_few_points(self):
        with pytest.raises(sim.AlignmentError):
            sim.ate(helix()[:2], helix()[:2])

    def test_length_mismatch(self):
        with pytest.raises(sim.AlignmentError):
            sim.ate(helix()[:5], helix()[:6])


class TestScore:
    def test_perfect(self):
        assert sim.hilti_score(np.zeros(10)) == 100.0

    def test_all_large(self):
        assert sim.hilti_score(np.full(10, 0.2)) == 0.0

    def test_half_and_half(self):
        assert sim.hilti_score([0.0] * 5 + [0.5] * 5) == pytest.approx(50.0)

    def test_linear_between_thresholds(self):
        np.testing.assert_allclose(sim.point_score([0.005, 0.01, 0.055, 0.10, 0.11]), [10, 10, 5, 0, 0])

    def test_empty(self):
        assert sim.hilti_score([]) == 0.0


class TestTrajectories:
    def test_rectangle_length(self):
        assert sim.rectangle_loop(18.0, 12.0).length() == pytest.approx(60.0, rel=1e-9)

    def test_constant_speed(self):
        traj = sim.polyline_trajectory([(0, 0, 0), (3, 4, 0)], speed=2.0, dt=0.1)
        assert traj.t1 == pytest.approx(2.5)
        np.testing.assert_allclose(traj.at(1.0).translation, [1.2, 1.6, 0.0], atol=1e-12)

    def test_times_must_increase(self):
        with pytest.raises(ValueError):
            sim.Trajectory(np.array([0.0, 0.0]), [Pose(), Pose()])


class TestFiles:
    def test_tum_round_trip(self, tmp_path, rng):
        poses = [random_pose(rng, 5.0) for _ in range(6)]
        times = np.linspace(0.0, 1.0, 6)
        sim.write_tum(tmp_path / "t.tum", times, poses)
        t2, p2 = sim.read_tum(tmp_path / "t.tum")
        np.testing.assert_array_equal(t2, times)
        for a, b in zip(poses, p2):
            np.testing.assert_array_equal(a.as_vector(), b.as_vector())
        assert "np." not in (tmp_path / "t.tum").read_text()

    def test_tum_bad_line(self, tmp_path):
        (tmp_path / "b.tum").write_text("0 1 2 3\n")
        with pytest.raises(ValueError):
            sim.read_tum(tmp_path / "b.tum")

    def test_scan_csv_round_trip(self, tmp_path):
        scan = sim.raycast(sim.box_room(), Pose(), sim.LidarModel(rate=5000, sigma_range=0.01), 0.0, 0.1)
        sim.write_scan_csv(tmp_path / "s.csv", scan)
        back = sim.read_scan_csv(tmp_path / "s.csv", Pose())
        np.testing.assert_array_equal(back.points, scan.points)
        np.testing.assert_array_equal(back.timestamps, scan.timestamps)

    def test_run_round_trip(self, tmp_path):
        traj = sim.polyline_trajectory([(0, 0, 1.5), (2, 0, 1.5)], speed=1.0)
        lidar = sim.LidarModel(n_beams=8, rate=10_000, sigma_range=0.01, seed=1)
        T_SL = Pose(exp_so3([0.0, 0.1, 0.0]), [0.1, 0.0, 0.2])
        run = sim.simulate_run(sim.box_room(), traj, lidar, sim.DriftModel(sigma_t=0.01, seed=2), 5.0, T_SL)
        assert len(run.scans) == len(run.frame_times) == 11
        sim.save_run(run, tmp_path / "run")
        back = sim.load_run(tmp_path / "run")
        np.testing.assert_array_equal(back.frame_times, run.frame_times)
        np.testing.assert_array_equal(back.T_SL.as_vector(), T_SL.as_vector())
        for a, b in zip(back.scans, run.scans):
            np.testing.assert_array_equal(a.points, b.points)
        for a, b in zip(back.gt_poses, run.gt_poses):
            np.testing.assert_allclose(a.matrix, b.matrix, atol=1e-12)
        for a, b in zip(back.odometry, run.odometry):
            np.testing.assert_allclose(a.matrix, b.matrix, atol=1e-9)

    def test_simulation_deterministic(self):
        traj = sim.polyline_trajectory([(0, 0, 1.5), (1, 0, 1.5)], speed=1.0)
        lidar = sim.LidarModel(n_beams=8, rate=10_000, sigma_range=0.01, seed=1)
        a = sim.simulate_run(sim.box_room(), traj, lidar, sim.DriftModel(sigma_t=0.01, seed=2))
        b = sim.simulate_run(sim.box_room(), traj, lidar, sim.DriftModel(sigma_t=0.01, seed=2))
        assert all(np.array_equal(x.points, y.points) for x, y in zip(a.scans, b.scans))
        assert all(np.array_equal(x.as_vector(), y.as_vector()) for x, y in zip(a.odometry, b.odometry))
