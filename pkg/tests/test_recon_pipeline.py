import numpy as np
import pandas as pd
import pytest

from sparse_view_recon import generators
from sparse_view_recon.exceptions import ConfigValidationError, DomainError, ReconError, UnsupportedOptionError
from sparse_view_recon.geometry import CameraIntrinsics, Pose
from sparse_view_recon.losses import LossConfig, photometric_loss
from sparse_view_recon.recon_pipeline import (
    GENERATED, GROUND_TRUTH_INPUT, LOSS_TRACE_COLUMNS, PipelineConfig, ReconstructionRun, ViewRecord, ViewSet,
    compute_confidence, densify_from_views, expand_view_set, init_point_cloud, loss_gen, loss_input,
    run_reconstruction, view_loss,
)
from sparse_view_recon.scene_oracle import SceneSpec
from sparse_view_recon.splat_render import RenderOutput, SurfelCloud, frames_from_normals
from sparse_view_recon.traj_sampler import MeshVisibilityRenderer, PointCloudVisibilityRenderer, SamplerConfig

CAMERA = CameraIntrinsics.from_fov(16, 16, 60.0)
SHAPE = (16, 16)
FACING = np.array([0.0, 0.0, -1.0])


def shifted(x):
    return Pose(np.eye(3), [x, 0.0, 0.0])


def plane_view(x=0.0, depth=2.0, provenance=GROUND_TRUTH_INPUT, confidence=None, cycle=None, with_depth=True):
    """A camera looking down +z at the plane z = depth."""
    return ViewRecord(
        shifted(x), CAMERA, np.full((*SHAPE, 3), 0.5),
        np.full(SHAPE, depth) if with_depth else None,
        np.broadcast_to(FACING, (*SHAPE, 3)).copy(),
        provenance, cycle, confidence,
    )


def generated_view(x, confidence=None):
    return plane_view(x, provenance=GENERATED, cycle=1,
                      confidence=np.ones(SHAPE) if confidence is None else confidence)


def fake_render(rng):
    return RenderOutput(
        rgb=rng.uniform(0.0, 1.0, (*SHAPE, 3)),
        depth=2.0 + 0.05 * rng.normal(size=SHAPE),
        alpha=np.full(SHAPE, 0.9),
        normal=np.broadcast_to(FACING + [0.05, 0.0, 0.0], (*SHAPE, 3)).copy(),
        distortion=rng.uniform(0.0, 0.1, SHAPE),
        transmittance=np.full(SHAPE, 0.1),
    )


def tiny_config(**overrides):
    settings = dict(
        scene=SceneSpec(seed=3), n_views=2, resolution=16, desk_factor=1.0, base_iterations=12,
        base_first_cycle=4, base_cycle_period=4, cycle_count=2, grid_resolution=24, eval_samples=500,
        held_out_views=1, denoise_steps=4, point_stride=4,
        sampler=SamplerConfig(frames=6, keyframes=2, max_trajectories=1),
    )
    settings.update(overrides)
    return PipelineConfig(**settings)


class TestViewRecord:

    def test_input_view_gets_unit_confidence(self):
        view = plane_view()
        assert not view.is_generated
        np.testing.assert_array_equal(view.confidence, np.ones(SHAPE))

    def test_rgb_shape_must_match_camera(self):
        with pytest.raises(DomainError):
            ViewRecord(Pose.identity(), CAMERA, np.zeros((8, 8, 3)))

    def test_rgb_range(self):
        with pytest.raises(DomainError):
            ViewRecord(Pose.identity(), CAMERA, np.full((*SHAPE, 3), 1.5))

    def test_unknown_provenance(self):
        with pytest.raises(UnsupportedOptionError):
            ViewRecord(Pose.identity(), CAMERA, np.zeros((*SHAPE, 3)), provenance="hallucinated")

    def test_generated_view_needs_confidence_and_cycle(self):
        with pytest.raises(DomainError):
            plane_view(provenance=GENERATED, cycle=1)
        with pytest.raises(DomainError):
            plane_view(provenance=GENERATED, confidence=np.ones(SHAPE))

    def test_with_confidence_clips(self):
        view = generated_view(0.0).with_confidence(np.full(SHAPE, 1.7))
        assert view.confidence.max() == 1.0


class TestExpandViewSet:

    def test_union_of_inputs_and_generated(self):
        inputs = ViewSet.from_inputs([plane_view(x) for x in range(5)])
        grown = expand_view_set(inputs, [generated_view(10.0 + x) for x in range(4)], 1)
        assert len(grown) == 9
        assert len(grown.inputs) == 5 and len(grown.generated) == 4
        assert grown.satisfies_recursion()
        assert grown.summary()["history_sizes"] == [5, 9]

    def test_duplicate_pose_is_dropped(self):
        inputs = ViewSet.from_inputs([plane_view(x) for x in range(5)])
        grown = expand_view_set(inputs, [generated_view(2.0)], 1)
        assert len(grown) == 5
        assert grown.added == ((),)
        assert grown.satisfies_recursion()

    def test_duplicates_within_a_batch(self):
        inputs = ViewSet.from_inputs([plane_view(0.0)])
        grown = expand_view_set(inputs, [generated_view(3.0), generated_view(3.0)], 1)
        assert len(grown) == 2

    def test_history_is_kept_across_cycles(self):
        views = ViewSet.from_inputs([plane_view(0.0)])
        views = expand_view_set(views, [generated_view(1.0)], 0)
        views = expand_view_set(views, [], 1)
        views = expand_view_set(views, [generated_view(2.0), generated_view(3.0)], 2)
        assert [len(h) for h in views.history] == [1, 2, 2, 4]
        assert views.satisfies_recursion()

    def test_tampered_history_fails_recursion(self):
        views = expand_view_set(ViewSet.from_inputs([plane_view(0.0)]), [generated_view(1.0)], 0)
        broken = ViewSet(views.views, views.history, ((),))
        assert not broken.satisfies_recursion()


class TestPipelineConfig:

    def test_desk_scaled_schedule(self):
        config = PipelineConfig()
        assert config.total_iterations == 3000
        assert config.cycle_iterations == [1400, 2200]

    def test_last_cycle_must_precede_end(self):
        with pytest.raises(DomainError):
            PipelineConfig(cycle_count=3)

    def test_unknown_generator(self):
        with pytest.raises(UnsupportedOptionError):
            PipelineConfig(generator="diffusion")

    def test_dict_round_trip(self):
        config = tiny_config(loss=LossConfig(lambda1=0.2), seed=9)
        assert PipelineConfig.from_dict(config.to_dict()) == config

    def test_no_cycles(self):
        assert PipelineConfig(cycle_count=0).cycle_iterations == []


class TestInitPointCloud:

    def test_points_lie_on_the_plane(self):
        cloud = init_point_cloud([plane_view()], voxel_size=1e-4, stride=2)
        assert len(cloud) == 64
        np.testing.assert_allclose(cloud.points[:, 2], 2.0)
        np.testing.assert_allclose(cloud.colors, 0.5)

    def test_duplicate_views_merge(self):
        cloud = init_point_cloud([plane_view(), plane_view()], voxel_size=1e-4, stride=2)
        assert len(cloud) == 64

    def test_coarse_voxels_merge_everything(self):
        # every point has positive coordinates, so all share voxel (0, 0, 0)
        view = ViewRecord(Pose(np.eye(3), [10.0, 10.0, 0.0]), CAMERA, np.full((*SHAPE, 3), 0.5), np.full(SHAPE, 2.0))
        assert len(init_point_cloud([view], voxel_size=100.0)) == 1

    def test_infinite_depth_skipped(self):
        view = plane_view()
        view.depth[:8] = np.inf
        cloud = init_point_cloud([view], voxel_size=1e-4, stride=2)
        assert len(cloud) == 32
        assert np.all(np.isfinite(cloud.points))

    def test_no_views(self):
        assert len(init_point_cloud([], voxel_size=0.01)) == 0

    def test_view_without_depth(self):
        with pytest.raises(ConfigValidationError):
            init_point_cloud([plane_view(with_depth=False)], voxel_size=0.01)


class TestComputeConfidence:

    def test_consistent_depth_is_confident(self):
        u = compute_confidence(plane_view(0.0), [plane_view(0.2)])
        assert np.all(u[4:12, 4:12] >= 0.95)

    def test_corrupted_peer_lowers_confidence(self):
        u = compute_confidence(plane_view(0.0), [plane_view(0.2, depth=2.2)])
        # relative error 0.1 against tau 0.05
        np.testing.assert_allclose(u[4:12, 4:12], np.exp(-2.0), atol=1e-6)

    def test_unobserved_pixels_get_floor(self):
        u = compute_confidence(plane_view(0.0), [plane_view(0.2)], floor=0.3)
        # these columns land left of the shifted peer's image
        np.testing.assert_array_equal(u[:, :2], 0.3)

    def test_median_over_peers(self):
        u = compute_confidence(plane_view(0.0), [plane_view(0.1), plane_view(0.2), plane_view(0.15, depth=2.2)])
        assert np.all(u[4:12, 4:12] >= 0.95)

    def test_no_peers(self):
        with pytest.raises(DomainError):
            compute_confidence(plane_view(), [])

    def test_view_without_depth_is_floor(self):
        u = compute_confidence(plane_view(with_depth=False), [plane_view(0.2)], floor=0.4)
        np.testing.assert_array_equal(u, 0.4)


class TestLosses:

    def test_loss_input_terms(self, rng):
        render, view, cfg = fake_render(rng), plane_view(), LossConfig()
        result = loss_input(render, view, cfg)
        expected, _ = photometric_loss(render.rgb, view.rgb, cfg.ssim_weight)
        assert result.terms["photometric"] == pytest.approx(expected)
        total = (result.terms["photometric"] + cfg.lambda1 * result.terms["regularization"]
                 + cfg.lambda2 * result.terms["normal"])
        assert result.total == pytest.approx(total)
        assert result.grads.rgb.shape == render.rgb.shape

    def test_loss_input_rejects_generated(self, rng):
        with pytest.raises(DomainError):
            loss_input(fake_render(rng), generated_view(0.0), LossConfig())

    def test_zero_confidence_zeroes_loss_gen(self, rng):
        result = loss_gen(fake_render(rng), generated_view(0.0, np.zeros(SHAPE)), LossConfig())
        assert result.total == 0.0
        assert not np.any(result.grads.rgb)
        assert not np.any(result.grads.depth)
        assert not np.any(result.grads.normal)

    def test_loss_gen_is_linear_in_confidence(self, rng):
        render = fake_render(rng)
        u = rng.uniform(0.2, 1.0, SHAPE)
        full = loss_gen(render, generated_view(0.0, u), LossConfig())
        half = loss_gen(render, generated_view(0.0, 0.5 * u), LossConfig())
        assert full.total > 0
        assert half.total == pytest.approx(0.5 * full.total)
        np.testing.assert_allclose(half.grads.rgb, 0.5 * full.grads.rgb, atol=1e-15)

    def test_view_loss_dispatch(self, rng):
        render = fake_render(rng)
        gen = generated_view(0.0, rng.uniform(0.0, 1.0, SHAPE))
        assert view_loss(render, gen, LossConfig()).total == pytest.approx(loss_gen(render, gen, LossConfig()).total)
        inp = plane_view()
        assert view_loss(render, inp, LossConfig()).total == pytest.approx(loss_input(render, inp, LossConfig()).total)

    def test_missing_normal_prior_is_skipped(self, rng, caplog):
        view = ViewRecord(Pose.identity(), CAMERA, np.full((*SHAPE, 3), 0.5), np.full(SHAPE, 2.0))
        result = loss_input(fake_render(rng), view, LossConfig())
        assert result.terms["normal"] == 0.0
        assert "no normal prior" in caplog.text


class TestDensify:

    def test_empty_cloud_inserts_on_the_plane(self):
        inserted = densify_from_views([plane_view()], SurfelCloud.empty(), stride=2)
        assert len(inserted) == 64
        np.testing.assert_allclose(inserted.positions[:, 2], 2.0)
        np.testing.assert_allclose(inserted.opacities, 0.5)
        # footprint is one strided pixel at the hit depth
        np.testing.assert_allclose(inserted.scales, 2 * 2.0 / CAMERA.focal_x)

    def test_covered_view_inserts_nothing(self):
        tu, tv = frames_from_normals(FACING[None])
        wall = SurfelCloud([[0.0, 0.0, 1.9]], tu, tv, [[5.0, 5.0]], [0.99], [[0.5, 0.5, 0.5]])
        assert len(densify_from_views([plane_view()], wall, stride=2)) == 0

    def test_inserts_bounded_by_strided_pixels(self):
        view = plane_view()
        view.depth[:, :8] = np.inf
        inserted = densify_from_views([view], SurfelCloud.empty(), stride=2)
        assert 0 < len(inserted) <= 32

    def test_views_without_depth_are_skipped(self):
        assert len(densify_from_views([plane_view(with_depth=False)], SurfelCloud.empty())) == 0


class TestRunReconstruction:

    def test_passthrough_keeps_inputs(self):
        result = run_reconstruction(tiny_config(generator="passthrough"))
        assert len(result.view_set) == 2
        assert len(result.view_set.history) == 1
        assert list(result.loss_trace.columns) == LOSS_TRACE_COLUMNS
        assert len(result.loss_trace) == 12
        assert set(result.loss_trace["provenance"]) == {GROUND_TRUTH_INPUT}
        assert result.rejection_log.empty
        assert result.report.psnr is not None
        assert {"initialize", "training", "evaluation"} <= set(result.timings)

    def test_runs_are_deterministic(self):
        first = run_reconstruction(tiny_config(generator="passthrough"))
        second = run_reconstruction(tiny_config(generator="passthrough"))
        pd.testing.assert_frame_equal(first.loss_trace, second.loss_trace)
        np.testing.assert_array_equal(first.cloud.positions, second.cloud.positions)

    def test_oracle_cycles_grow_view_set(self):
        result = run_reconstruction(tiny_config(init_completion=False))
        views = result.view_set
        assert len(views.history) == 3
        assert views.satisfies_recursion()
        assert all(v.cycle in (1, 2) for v in views.generated)
        assert all(v.confidence.min() >= 0.0 and v.confidence.max() <= 1.0 for v in views.generated)
        assert len(result.loss_trace) == 12
        if not result.mesh.is_empty:
            assert result.report.cd >= 0

    def test_generators_see_the_geometry_proxy(self, monkeypatch):
        seen = []

        class RecordingGenerator(generators.OracleGenerator):
            def generate(self, poses, intrinsics, context, seed):
                seen.append(type(context.visibility))
                return super().generate(poses, intrinsics, context, seed)

        monkeypatch.setitem(generators.GENERATORS, "oracle", RecordingGenerator)
        run_reconstruction(tiny_config(init_completion=False))
        # training cycles trace the extracted mesh
        assert seen and set(seen) == {MeshVisibilityRenderer}

        seen.clear()
        run = ReconstructionRun(tiny_config())
        run.initialize()
        run.complete_initialization()
        assert set(seen) <= {PointCloudVisibilityRenderer}

    def test_point_cloud_frozen_once_training_starts(self):
        run = ReconstructionRun(tiny_config(generator="passthrough"))
        run.initialize()
        run.train()
        with pytest.raises(ReconError):
            run.initialize()

    def test_supplied_input_views(self):
        config = tiny_config(generator="passthrough", base_iterations=3, cycle_count=0)
        views = [plane_view(0.0), plane_view(0.3)]
        result = run_reconstruction(config, input_views=views)
        assert result.view_set.views == tuple(views)

    @pytest.mark.slow
    @pytest.mark.parametrize("init_completion, train_completion", [
        (False, False), (True, False), (False, True), (True, True),
    ])
    def test_completion_ablation(self, init_completion, train_completion):
        result = run_reconstruction(tiny_config(init_completion=init_completion,
                                                train_completion=train_completion, base_iterations=24,
                                                base_first_cycle=8, base_cycle_period=8))
        assert result.view_set.satisfies_recursion()
        if not (init_completion or train_completion):
            assert len(result.view_set) == 2
        assert np.isfinite(result.loss_trace["loss"]).all()
