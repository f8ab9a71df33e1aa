import numpy as np
import pytest

from sparse_view_recon.geometry import CameraIntrinsics, Pose
from sparse_view_recon.scene_oracle import ObjectSpec, SceneSpec, quad_mesh, uv_sphere
from sparse_view_recon.splat_render import SurfelCloud, frames_from_normals


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_intrinsics():
    # 8x8 image, pixel centres on integers, principal point in the middle
    return CameraIntrinsics(8.0, 8.0, 3.5, 3.5, 8, 8)


@pytest.fixture
def intrinsics_32():
    return CameraIntrinsics.from_fov(32, 32, 60.0)


@pytest.fixture
def identity_pose():
    return Pose.identity()


@pytest.fixture
def square_at_z2():
    # unit square in the plane z = 2, centred on the optical axis
    return quad_mesh([[-0.5, -0.5, 2.0], [0.5, -0.5, 2.0], [0.5, 0.5, 2.0], [-0.5, 0.5, 2.0]])


@pytest.fixture
def unit_sphere_mesh():
    return uv_sphere([0.0, 0.0, 0.0], 1.0)


@pytest.fixture
def empty_scene_spec():
    return SceneSpec(seed=3)


@pytest.fixture
def scene_spec():
    return SceneSpec(
        seed=5,
        objects=(
            ObjectSpec("box", (0.6, 0.5, 0.8), {"type": "checker", "scale": 0.2}),
            ObjectSpec("sphere", (0.4,), {"type": "flat"}),
        ),
    )


@pytest.fixture
def random_cloud(rng):
    """Five surfels a few units in front of the identity camera, roughly facing it."""
    n = 5
    positions = np.column_stack([rng.uniform(-0.3, 0.3, n), rng.uniform(-0.3, 0.3, n), rng.uniform(2.0, 3.0, n)])
    normals = np.column_stack([rng.normal(0, 0.3, n), rng.normal(0, 0.3, n), -np.ones(n)])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    tu, tv = frames_from_normals(normals)
    return SurfelCloud(positions, tu, tv, rng.uniform(0.08, 0.2, (n, 2)), rng.uniform(0.3, 0.8, n),
                       rng.uniform(0.1, 0.9, (n, 3)))
