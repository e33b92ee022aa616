import io
import json

import numpy as np
import pytest

from occslam import sim
from occslam.factor_graph import Problem
from occslam.geometry import DeskewWindowError, Pose, exp_so3
from occslam.occupancy import FrozenSubmapError, OccupancySubmap
from occslam.submapping import (CompletionEvent, LidarScan, LiveFrameEvent, SubmapConfig, SubmapRegistry,
                                deskew, overlap_ratio, sample_factor_points, wire_factors)

CORRIDOR = sim.corridor()
SHORT = sim.LidarModel(n_beams=32, vfov=(-45.0, 45.0), rate=200_000, max_range=6.0, seed=2)


def integrate(submap, scene, T_MS, lidar=SHORT, index=0, keep=None):
    scan = sim.raycast(scene, T_MS, lidar, 0.0, 0.1, scan_index=index)
    pts = scan.points if keep is None else scan.points[keep(scan.points)]
    submap.integrate_rays(np.broadcast_to(T_MS.translation, pts.shape), T_MS.transform(pts))
    submap.propagate()
    return scan


def small_config(**kw):
    base = dict(resolution=0.12, dimension=15.36, n_frame_to_map=20, n_map_to_map=50)
    base.update(kw)
    return SubmapConfig(**base)


class TestDeskew:
    def test_stationary_is_identity(self, rng):
        pts = rng.normal(size=(50, 3))
        scan = LidarScan(pts, np.linspace(0.0, 0.1, 50))
        out = deskew(scan, [0.0, 0.1], [Pose(), Pose()])
        np.testing.assert_allclose(out.points, pts, atol=1e-15)
        np.testing.assert_array_equal(out.timestamps, 0.1)

    def test_constant_velocity_correction_spans_scan(self):
        t = np.linspace(0.0, 0.1, 101)
        pts = np.tile([5.0, 0.0, 0.0], (101, 1))
        scan = LidarScan(pts, t)
        out = deskew(scan, [0.0, 0.1], [Pose(), Pose(translation=[0.1, 0.0, 0.0])])
        corr = pts[:, 0] - out.points[:, 0]
        np.testing.assert_allclose(corr, 0.1 - t, atol=1e-12)
        assert corr[0] == pytest.approx(0.1)
        assert corr[-1] == pytest.approx(0.0, abs=1e-15)
        np.testing.assert_allclose(out.origins[:, 0], t - 0.1, atol=1e-12)

    def test_exact_for_translation(self, rng):
        v = np.array([1.2, -0.4, 0.3])
        times = np.linspace(0.0, 0.1, 11)
        poses = [Pose(translation=v * s) for s in times]
        ts = rng.uniform(0.0, 0.1, 500)
        world = rng.uniform(-5, 5, (500, 3))
        p_S = world - v * ts[:, None]
        out = deskew(LidarScan(p_S, ts), times, poses)
        np.testing.assert_allclose(out.points, world[np.argsort(ts, kind="stable")] - v * 0.1, atol=1e-9)

    def test_rotation_with_extrinsics(self):
        T_SL = Pose(exp_so3([0.0, 0.0, np.pi / 2]), [0.1, 0.0, 0.0])
        scan = LidarScan(np.array([[1.0, 0.0, 0.0]]), np.array([0.05]), T_SL)
        out = deskew(scan, [0.0, 0.1], [Pose(), Pose()])
        np.testing.assert_allclose(out.points, [[0.1, 1.0, 0.0]], atol=1e-15)

    def test_empty_scan(self):
        out = deskew(LidarScan(np.zeros((0, 3)), np.zeros(0)), [0.0, 0.1], [Pose(), Pose()])
        assert len(out) == 0

    def test_points_outside_window_dropped(self):
        scan = LidarScan(np.ones((4, 3)), np.array([0.0, 0.05, 0.09, 0.2]))
        out = deskew(scan, [0.0, 0.1], [Pose(), Pose()])
        assert len(out) == 3
        assert out.dropped == 1

    def test_majority_outside_window_raises(self):
        scan = LidarScan(np.ones((4, 3)), np.array([0.0, 0.2, 0.3, 0.4]))
        with pytest.raises(DeskewWindowError):
            deskew(scan, [0.0, 0.1], [Pose(), Pose()])

    def test_scan_sorted_by_time(self):
        scan = LidarScan(np.arange(9.0).reshape(3, 3), np.array([0.3, 0.1, 0.2]))
        np.testing.assert_array_equal(scan.timestamps, [0.1, 0.2, 0.3])
        np.testing.assert_array_equal(scan.points[0], [3.0, 4.0, 5.0])


class TestOverlap:
    def test_fresh_map_is_zero(self):
        scan = sim.raycast(CORRIDOR, Pose(translation=[0, 0, 1.5]), SHORT, 0.0, 0.1)
        assert overlap_ratio(OccupancySubmap(0.06, 15.36), Pose(translation=[0, 0, 1.5]), scan, 2) == 0.0

    def test_same_scan_after_integration(self):
        sub = OccupancySubmap(0.06, 15.36)
        T = Pose(translation=[0.0, 0.0, 1.5])
        scan = integrate(sub, CORRIDOR, T)
        assert overlap_ratio(sub, T, scan, 2) >= 0.99

    def test_half_field_of_view(self, box10_map):
        scene, _ = box10_map
        lidar = sim.LidarModel(n_beams=64, vfov=(-60.0, 60.0), rate=200_000, seed=1)
        sub = OccupancySubmap(0.06, 15.36)
        scan = integrate(sub, scene, Pose(), lidar, keep=lambda p: p[:, 0] > 0)
        frac_front = np.mean(scan.points[:, 0] > 0)
        assert overlap_ratio(sub, Pose(), scan, 2) == pytest.approx(frac_front, abs=0.1)
        assert overlap_ratio(sub, Pose(), scan, 2) == pytest.approx(0.5, abs=0.1)

    def test_empty_scan_raises(self):
        with pytest.raises(ValueError):
            overlap_ratio(OccupancySubmap(0.06, 7.68), Pose(), LidarScan(np.zeros((0, 3)), np.zeros(0)))


class TestSpawnPolicy:
    @pytest.mark.parametrize("ratio,spawn", [(0.9, False), (0.4, False), (0.39, True), (0.0, True)])
    def test_threshold_is_strict(self, ratio, spawn):
        reg = SubmapRegistry(small_config())
        reg.create(0)
        d = reg.maybe_spawn(ratio, 7)
        assert d.spawn is spawn
        if spawn:
            assert d.completed.id == 0 and d.completed.frozen
            assert d.created.anchor_state_id == 7
            assert reg.active is d.created

    def test_no_active_never_spawns(self):
        assert not SubmapRegistry(small_config()).maybe_spawn(0.0, 1).spawn

    def test_anchors_strictly_increasing(self):
        reg = SubmapRegistry(small_config())
        reg.create(3)
        reg.complete_active()
        with pytest.raises(ValueError):
            reg.create(3)

    def test_single_active(self):
        reg = SubmapRegistry(small_config())
        reg.create(0)
        with pytest.raises(RuntimeError):
            reg.create(1)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SubmapConfig(lambda_overlap=1.0)
        with pytest.raises(ValueError):
            SubmapConfig(n_map_to_map=-1)

    def test_frozen_checksum_constant(self):
        reg = SubmapRegistry(small_config())
        e = reg.create(0)
        integrate(e.submap, CORRIDOR, Pose(translation=[0, 0, 1.5]))
        done, _ = reg.complete_active()
        c0 = done.checksum
        nxt = reg.create(1)
        integrate(nxt.submap, CORRIDOR, Pose(translation=[0, 0, 1.5]))
        done.submap.query_with_gradient(np.zeros((3, 3)))
        assert done.submap.checksum() == c0
        with pytest.raises(FrozenSubmapError):
            integrate(done.submap, CORRIDOR, Pose(translation=[0, 0, 1.5]))

    def test_events_json_lines(self):
        stream = io.StringIO()
        reg = SubmapRegistry(small_config(), event_stream=stream)
        reg.create(0)
        reg.maybe_spawn(0.1, 4)
        lines = [json.loads(x) for x in stream.getvalue().splitlines()]
        assert [x["event"] for x in lines] == ["submap_created", "submap_completed", "submap_created", "spawn"]
        assert lines == reg.events

    def test_buffer_capped_per_frame(self, rng):
        reg = SubmapRegistry(small_config(buffer_per_frame=10))
        reg.create(0)
        reg.add_to_buffer(rng.normal(size=(25, 3)))
        reg.add_to_buffer(rng.normal(size=(4, 3)))
        _, buf = reg.complete_active()
        assert len(buf) == 14
        assert len(reg.drain_buffer()) == 0


def corridor_registry(xs, poses_x=None):
    """Frozen submaps built at corridor positions ``xs``; anchor ids 0, 10, 20, ..."""
    reg = SubmapRegistry(small_config())
    poses = {}
    for k, x in enumerate(xs):
        e = reg.create(10 * k)
        T = Pose(translation=[x, 0.0, 1.5])
        poses[10 * k] = T
        scan = sim.raycast(CORRIDOR, T, SHORT, 0.0, 0.1, scan_index=k)
        e.submap.integrate_rays(np.zeros((1, 3)), scan.points)
        e.submap.propagate()
        reg.complete_active()
    return reg, poses


class TestLoopSearch:
    def test_same_place_overlaps(self):
        reg, poses = corridor_registry([5.0, 5.0])
        assert reg.overlap_scores(reg.entry(1), poses)[0] > 0.9
        assert reg.find_most_overlapping(reg.entry(1), poses) == 0

    def test_disjoint_maps(self):
        reg, poses = corridor_registry([2.0, 25.0])
        assert reg.overlap_scores(reg.entry(1), poses)[0] == 0.0
        assert reg.find_most_overlapping(reg.entry(1), poses) is None

    def test_loop_picks_revisited_submap(self):
        reg, poses = corridor_registry([2.0, 14.0, 26.0, 14.5])
        assert reg.find_most_overlapping(reg.entry(3), poses, exclude={2}) == 1

    def test_tie_goes_to_latest(self):
        reg, poses = corridor_registry([10.0, 10.0, 10.0])
        s = reg.overlap_scores(reg.entry(2), poses)
        assert s[0] == s[1]
        assert reg.find_most_overlapping(reg.entry(2), poses) == 1

    def test_only_older_submaps_considered(self):
        reg, poses = corridor_registry([10.0, 10.0, 10.0])
        assert set(reg.overlap_scores(reg.entry(1), poses)) == {0}


class TestSampling:
    def test_zero(self, rng):
        assert sample_factor_points(rng.normal(size=(10, 3)), 0, 1).shape == (0, 3)

    def test_budget_above_size_returns_all(self, rng):
        pts = rng.normal(size=(10, 3))
        out = sample_factor_points(pts, 50, 1)
        assert len(out) == 10
        np.testing.assert_array_equal(np.sort(out, axis=0), np.sort(pts, axis=0))

    def test_subset_without_replacement(self, rng):
        pts = rng.normal(size=(100, 3))
        out = sample_factor_points(pts, 30, 1)
        assert len(np.unique(out, axis=0)) == 30
        assert all(any(np.array_equal(o, p) for p in pts) for o in out)

    def test_deterministic(self, rng):
        pts = rng.normal(size=(100, 3))
        np.testing.assert_array_equal(sample_factor_points(pts, 30, 9), sample_factor_points(pts, 30, 9))
        assert not np.array_equal(sample_factor_points(pts, 30, 9), sample_factor_points(pts, 30, 10))

    def test_negative_rejected(self, rng):
        with pytest.raises(ValueError):
            sample_factor_points(rng.normal(size=(3, 3)), -1, 0)


class TestWiring:
    def problem_for(self, poses):
        pb = Problem()
        for k in sorted(poses):
            pb.add_state(float(k), poses[k], "submap_anchor", fixed=k == 0, state_id=k)
        return pb

    def test_live_event_without_completed_submap(self, rng):
        reg = SubmapRegistry(small_config())
        reg.create(0)
        pb = Problem()
        pb.add_state(0.0, Pose())
        pb.add_state(0.1, Pose())
        assert wire_factors(reg, pb, LiveFrameEvent(1, rng.normal(size=(30, 3)))) == []
        assert pb.factors == []

    def test_live_event_binds_last_completed(self, rng):
        reg, poses = corridor_registry([2.0, 14.0])
        pb = self.problem_for(poses)
        pb.add_state(11.0, Pose(), state_id=11)
        added = wire_factors(reg, pb, LiveFrameEvent(11, rng.normal(size=(30, 3))))
        assert len(added) == 1
        f = added[0]
        assert (f.kind, f.state_a, f.state_b, len(f.points)) == ("frame_to_map", 10, 11, 20)
        assert f.submap is reg.entry(1).submap

    def test_first_completion_adds_nothing(self, rng):
        reg, poses = corridor_registry([2.0])
        pb = self.problem_for(poses)
        assert wire_factors(reg, pb, CompletionEvent(reg.entry(0), rng.normal(size=(80, 3)))) == []

    def test_second_completion_one_factor(self, rng):
        reg, poses = corridor_registry([2.0, 14.0])
        pb = self.problem_for(poses)
        added = wire_factors(reg, pb, CompletionEvent(reg.entry(1), rng.normal(size=(80, 3))))
        assert [(f.kind, f.state_a, f.state_b, len(f.points)) for f in added] == [("map_to_map", 0, 10, 50)]

    def test_loop_closure_two_factors(self, rng):
        reg, poses = corridor_registry([2.0, 14.0, 26.0, 2.5])
        pb = self.problem_for(poses)
        added = wire_factors(reg, pb, CompletionEvent(reg.entry(3), rng.normal(size=(80, 3))))
        assert [(f.state_a, f.state_b) for f in added] == [(20, 30), (0, 30)]
        assert all(f.kind == "map_to_map" for f in added)
        logged = [e for e in reg.events if e["event"] == "factor"]
        assert [(e["submap_a"], e["submap_b"]) for e in logged] == [(2, 3), (0, 3)]

    def test_wiring_deterministic(self, rng):
        reg, poses = corridor_registry([2.0, 14.0])
        buf = rng.normal(size=(80, 3))
        a = wire_factors(reg, self.problem_for(poses), CompletionEvent(reg.entry(1), buf), seed=3)
        b = wire_factors(reg, self.problem_for(poses), CompletionEvent(reg.entry(1), buf), seed=3)
        np.testing.assert_array_equal(a[0].points, b[0].points)

    def test_unknown_event(self):
        reg = SubmapRegistry(small_config())
        with pytest.raises(TypeError):
            wire_factors(reg, Problem(), object())
