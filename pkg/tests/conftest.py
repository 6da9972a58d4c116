import numpy as np
import pytest

from unipre3d.camera import Camera, Extrinsics, Intrinsics


def rand_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rand_rigid(rng: np.random.Generator) -> np.ndarray:
    m = np.eye(4)
    m[:3, :3] = rand_rotation(rng)
    m[:3, 3] = rng.uniform(-2, 2, 3)
    return m


def rand_camera(rng: np.random.Generator, width: int | None = None,
                height: int | None = None) -> Camera:
    width = width or int(rng.integers(4, 33))
    height = height or int(rng.integers(4, 33))
    intr = Intrinsics(
        fx=float(rng.uniform(0.5, 2.0) * width),
        fy=float(rng.uniform(0.5, 2.0) * height),
        cx=float(rng.uniform(0.25, 0.75) * width),
        cy=float(rng.uniform(0.25, 0.75) * height),
        width=width, height=height)
    return Camera(intr, Extrinsics(rand_rigid(rng)))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
