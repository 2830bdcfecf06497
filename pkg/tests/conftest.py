import numpy as np
import pytest

from geobias.geometry import Camera, CameraPair, random_rotation


def random_camera(seed: int, max_angle: float = np.pi) -> Camera:
    rng = np.random.default_rng(seed)
    f = rng.uniform(20.0, 60.0)
    k = np.array([[f, 0.0, rng.uniform(10, 20)], [0.0, f * rng.uniform(0.9, 1.1), rng.uniform(8, 16)], [0, 0, 1.0]])
    return Camera(k=k, r=random_rotation(rng, max_angle), t=rng.normal(size=3))


def random_pair(seed: int) -> CameraPair:
    rng = np.random.default_rng(seed + 10_000)
    cam1 = random_camera(seed)
    cam2 = random_camera(seed + 1)
    # keep the baseline well away from zero
    if np.linalg.norm(cam2.r.T @ cam2.t - cam1.r.T @ cam1.t) < 1e-3:
        cam2 = Camera(k=cam2.k, r=cam2.r, t=cam2.t + rng.normal(size=3))
    return CameraPair(cam1, cam2)


@pytest.fixture
def camera_factory():
    return random_camera


@pytest.fixture
def pair_factory():
    return random_pair
