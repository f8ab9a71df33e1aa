import numpy as np
import pytest

from sparse_view_recon import generators
from sparse_view_recon.exceptions import GenerationError
from sparse_view_recon.generators import (
    GENERATORS, LATENT_SIZE, GenerationContext, GuidedFlowGenerator, OracleGenerator, PassthroughGenerator,
    from_latent, to_latent,
)
from sparse_view_recon.geometry import CameraIntrinsics, TriangleMesh
from sparse_view_recon.scene_oracle import build_scene, default_view_poses, render_ground_truth
from sparse_view_recon.splat_render import SurfelCloud
from sparse_view_recon.traj_sampler import MeshVisibilityRenderer

CAMERA = CameraIntrinsics.from_fov(16, 16, 60.0)


@pytest.fixture
def scene(empty_scene_spec):
    return build_scene(empty_scene_spec)


@pytest.fixture
def poses(scene):
    return default_view_poses(scene, 2)


def context(scene, inputs=(), noise=0.0, steps=4, visibility="mesh"):
    if visibility == "mesh":
        visibility = MeshVisibilityRenderer(scene.mesh)
    return GenerationContext(scene, SurfelCloud.empty(), list(inputs), normal_noise=noise, denoise_steps=steps,
                             visibility=visibility)


class TestRegistry:

    def test_names(self):
        assert set(GENERATORS) == {"oracle", "guided_flow", "passthrough"}


class TestOracleGenerator:

    def test_frames_match_ground_truth(self, scene, poses):
        frames = OracleGenerator().generate(poses, CAMERA, context(scene), seed=0)
        assert len(frames) == 2
        for frame, pose in zip(frames, poses):
            gt = render_ground_truth(scene, CAMERA, pose)
            np.testing.assert_array_equal(frame.rgb, gt.rgb)
            np.testing.assert_array_equal(frame.depth, gt.depth)
            np.testing.assert_array_equal(frame.normal, gt.normal)

    def test_noisy_normals_stay_unit(self, scene, poses):
        frame = OracleGenerator().generate(poses[:1], CAMERA, context(scene, noise=0.1), seed=0)[0]
        gt = render_ground_truth(scene, CAMERA, poses[0])
        assert not np.allclose(frame.normal, gt.normal)
        np.testing.assert_allclose(np.linalg.norm(frame.normal, axis=-1), 1.0)

    def test_passthrough_generates_nothing(self, scene, poses):
        assert PassthroughGenerator().generate(poses, CAMERA, context(scene), seed=0) == []


class TestLatents:

    def test_constant_image(self):
        image = np.full((32, 24, 3), 0.4)
        latent = to_latent(image)
        assert latent.shape == (LATENT_SIZE, LATENT_SIZE, 3)
        np.testing.assert_allclose(latent, 0.4)
        np.testing.assert_allclose(from_latent(latent, (32, 24)), 0.4)

    def test_gray_image(self):
        assert to_latent(np.zeros((8, 8))).shape == (LATENT_SIZE, LATENT_SIZE)


class TestGuidedFlowGenerator:

    def test_needs_input_images(self, scene, poses):
        with pytest.raises(GenerationError):
            GuidedFlowGenerator().generate(poses, CAMERA, context(scene), seed=0)

    def test_frames(self, scene, poses):
        inputs = [render_ground_truth(scene, CAMERA, pose).rgb for pose in poses]
        frames = GuidedFlowGenerator().generate(poses[:1], CAMERA, context(scene, inputs), seed=1)
        assert len(frames) == 1
        frame = frames[0]
        assert frame.rgb.shape == (16, 16, 3)
        assert frame.rgb.min() >= 0.0 and frame.rgb.max() <= 1.0
        # geometry comes from the oracle
        np.testing.assert_array_equal(frame.depth, render_ground_truth(scene, CAMERA, poses[0]).depth)

    def test_seeded(self, scene, poses):
        inputs = [render_ground_truth(scene, CAMERA, pose).rgb for pose in poses]
        a = GuidedFlowGenerator().generate(poses[:1], CAMERA, context(scene, inputs), seed=3)[0]
        b = GuidedFlowGenerator().generate(poses[:1], CAMERA, context(scene, inputs), seed=3)[0]
        np.testing.assert_array_equal(a.rgb, b.rgb)

    def test_needs_visibility_renderer(self, scene, poses):
        inputs = [render_ground_truth(scene, CAMERA, pose).rgb for pose in poses]
        with pytest.raises(GenerationError, match="visibility"):
            GuidedFlowGenerator().generate(poses[:1], CAMERA, context(scene, inputs, visibility=None), seed=0)


class TestReferenceMask:

    @pytest.fixture
    def captured_masks(self, monkeypatch):
        masks = []
        real = generators.guided_denoise

        def capture(field, reference, schedule, config):
            masks.append(reference.mask.copy())
            return real(field, reference, schedule, config)

        monkeypatch.setattr(generators, "guided_denoise", capture)
        return masks

    def test_mask_follows_mesh_not_surfels(self, scene, poses, captured_masks):
        # no surfels at all, but every ray hits a wall of the closed room
        inputs = [render_ground_truth(scene, CAMERA, pose).rgb for pose in poses]
        GuidedFlowGenerator().generate(poses, CAMERA, context(scene, inputs), seed=0)
        assert len(captured_masks) == 2
        for mask in captured_masks:
            assert mask.shape == (LATENT_SIZE * LATENT_SIZE * 3,)
            assert mask.mean() == pytest.approx(1.0, abs=1e-2)

    def test_empty_mesh_guides_nothing(self, scene, poses, captured_masks):
        inputs = [render_ground_truth(scene, CAMERA, pose).rgb for pose in poses]
        visibility = MeshVisibilityRenderer(TriangleMesh.empty())
        GuidedFlowGenerator().generate(poses[:1], CAMERA, context(scene, inputs, visibility=visibility), seed=0)
        np.testing.assert_allclose(captured_masks[0], 0.0)
