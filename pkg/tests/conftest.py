import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from occslam import sim
from occslam.geometry import Pose, Rotation
from occslam.kernels import available_backends
from occslam.occupancy import OccupancySubmap

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

BACKENDS = available_backends()


def random_pose(rng, t_scale=1.0) -> Pose:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return Pose(Rotation(q), rng.uniform(-t_scale, t_scale, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def box_room_map():
    """A 6 cm submap of a 6x6x3 m room scanned from three interior positions."""
    scene = sim.box_room((6.0, 6.0, 3.0))
    lidar = sim.LidarModel(n_beams=121, vfov=(-60.0, 60.0), rate=600_000, max_range=20.0,
                           sigma_range=0.0, seed=0)
    sub = OccupancySubmap(0.06, 7.68)
    for k, c in enumerate([(0.0, 0.0, 0.0), (0.8, -0.6, 0.2), (-0.7, 0.5, -0.2)]):
        T = Pose(translation=c)
        scan = sim.raycast(scene, T, lidar, 0.0, 0.1, scan_index=k)
        sub.integrate_rays(np.broadcast_to(c, scan.points.shape), T.transform(scan.points))
    sub.propagate()
    return scene, sub


@pytest.fixture(scope="session")
def box10_map():
    """A 6 cm submap of the 10 m box room with ring spacing below one voxel at the walls."""
    scene = sim.box_room((10.0, 10.0, 10.0))
    lidar = sim.LidarModel(n_beams=240, vfov=(-80.0, 80.0), rate=2_000_000, max_range=30.0,
                           sigma_range=0.0, seed=0)
    sub = OccupancySubmap(0.06, 15.36)
    for k, c in enumerate([(0.0, 0.0, 0.0), (1.0, -0.8, 0.5), (-0.9, 0.7, -0.4)]):
        T = Pose(translation=c)
        scan = sim.raycast(scene, T, lidar, 0.0, 0.1, scan_index=k)
        sub.integrate_rays(np.broadcast_to(c, scan.points.shape), T.transform(scan.points))
    sub.propagate()
    return scene, sub
