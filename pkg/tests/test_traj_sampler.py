import logging
from types import SimpleNamespace

import numpy as np
import pytest

from sparse_view_recon.exceptions import DomainError, EvaluationError
from sparse_view_recon.geometry import CameraIntrinsics, Pose, look_at
from sparse_view_recon.scene_oracle import quad_mesh
from sparse_view_recon.traj_sampler import (
    REASON_EXCESSIVE, REASON_INSUFFICIENT, REASON_NEAR_PLANE, REJECTION_COLUMNS, MeshVisibilityRenderer,
    PointCloudVisibilityRenderer, SamplerConfig, TrajectoryCandidate, check_keyframe, evaluate_candidate,
    extend_trajectory, orbit_arc, propose_orbits, sample_trajectories, screening_keyframes, select_keyframes,
)

CAMERA = CameraIntrinsics.from_fov(16, 16, 60.0)
WALL_CENTER = np.array([3.0, 0.0, 0.0])


@pytest.fixture
def wall():
    return quad_mesh([[3.0, -2.0, -2.0], [3.0, 2.0, -2.0], [3.0, 2.0, 2.0], [3.0, -2.0, 2.0]])


@pytest.fixture
def wall_view():
    return SimpleNamespace(pose=look_at([0.0, 0.0, 0.0], WALL_CENTER, [0.0, 0.0, 1.0]), intrinsics=CAMERA)


class FixedRenderer:
    def __init__(self, depth, mask):
        self.depth, self.mask = depth, mask
        self.calls = 0

    def render_visibility(self, intrinsics, pose):
        self.calls += 1
        return self.depth, self.mask


class BrokenRenderer:
    def render_visibility(self, intrinsics, pose):
        raise RuntimeError("renderer offline")


def make_candidate(keyframes=(1, 2, 3)):
    return TrajectoryCandidate(0, 0, np.zeros(3), 1.0, 0.0, 0.0, [Pose.identity()] * 4, CAMERA,
                               keyframe_indices=list(keyframes))


def area_mask(fraction, shape=(10, 10)):
    mask = np.zeros(shape)
    mask.reshape(-1)[:int(round(fraction * mask.size))] = 1.0
    return mask


class TestSamplerConfig:

    @pytest.mark.parametrize("kwargs", [
        {"s_low": 0.5, "s_high": 0.4},
        {"s_high": 1.5},
        {"d0": 0.0},
        {"frames": 3, "keyframes": 4},
        {"keyframes": 0},
        {"extension": -0.1},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(DomainError):
            SamplerConfig(**kwargs)

    def test_near_plane(self):
        assert SamplerConfig(d0=0.7).near_plane(10.0) == 0.7
        assert SamplerConfig(d0_fraction=0.2).near_plane(10.0) == pytest.approx(2.0)
        with pytest.raises(DomainError):
            SamplerConfig().near_plane()

    def test_dict_round_trip(self):
        config = SamplerConfig(s_low=0.1, azimuth_spans_deg=(45.0,), d0=0.3)
        assert SamplerConfig.from_dict(config.to_dict()) == config


class TestProposeOrbits:

    def test_wall_at_distance_three(self, wall, wall_view):
        candidates = propose_orbits([wall_view], wall, SamplerConfig())
        # two spans, both directions, two elevations
        assert len(candidates) == 8
        for c in candidates:
            assert np.allclose(c.center, WALL_CENTER, atol=1e-6)
            assert c.radius == pytest.approx(3.0, abs=1e-6)

    def test_poses_on_sphere_and_looking_at_center(self, wall, wall_view):
        for c in propose_orbits([wall_view], wall, SamplerConfig()):
            assert c.poses[0].is_close(wall_view.pose, 1e-6)
            for pose in c.poses:
                offset = c.center - pose.center
                assert np.linalg.norm(offset) == pytest.approx(c.radius, abs=1e-6)
                assert np.dot(pose.forward, offset / np.linalg.norm(offset)) == pytest.approx(1.0, abs=1e-9)

    def test_zero_span_arc_is_constant(self, wall_view):
        poses = orbit_arc(wall_view.pose, WALL_CENTER, 0.0, 0.0, 6)
        assert all(p.is_close(wall_view.pose, 1e-12) for p in poses)

    def test_point_set_surface(self, wall_view):
        ys, zs = np.meshgrid(np.linspace(-1, 1, 41), np.linspace(-1, 1, 41))
        points = np.column_stack([np.full(ys.size, 3.0), ys.ravel(), zs.ravel()])
        candidates = propose_orbits([wall_view], points, SamplerConfig())
        assert len(candidates) == 8
        assert candidates[0].radius == pytest.approx(3.0, abs=1e-6)

    def test_missed_view_is_skipped(self, wall, wall_view, caplog):
        away = SimpleNamespace(pose=look_at([0.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 1.0]), intrinsics=CAMERA)
        with caplog.at_level(logging.WARNING, logger="sparse_view_recon.traj_sampler"):
            candidates = propose_orbits([away, wall_view], wall, SamplerConfig())
        assert len(candidates) == 8
        assert all(c.source_index == 1 for c in candidates)
        assert "misses the surface" in caplog.text

    def test_requires_views_and_surface(self, wall, wall_view):
        with pytest.raises(DomainError):
            propose_orbits([], wall, SamplerConfig())
        with pytest.raises(DomainError):
            propose_orbits([wall_view], np.zeros((0, 3)), SamplerConfig())

    def test_screening_keyframes(self):
        picks = screening_keyframes(16, 4)
        assert len(picks) == 4
        assert 0 not in picks
        assert picks[-1] == 15
        assert screening_keyframes(1, 1) == [0]


class TestCheckKeyframe:

    def test_accepted(self):
        verdict = check_keyframe(np.full((10, 10), 0.9), area_mask(0.30), SamplerConfig(), d0=0.2)
        assert verdict.accepted

    def test_excessive(self):
        verdict = check_keyframe(np.full((10, 10), 0.9), area_mask(0.60), SamplerConfig(), d0=0.2)
        assert not verdict.accepted
        assert verdict.reason == REASON_EXCESSIVE
        assert verdict.value == pytest.approx(0.6)

    def test_insufficient(self):
        verdict = check_keyframe(np.full((10, 10), 0.9), area_mask(0.02), SamplerConfig(), d0=0.2)
        assert verdict.reason == REASON_INSUFFICIENT

    def test_near_plane(self):
        depth = np.full((10, 10), 0.9)
        depth[3, 3] = 0.05
        verdict = check_keyframe(depth, area_mask(0.30), SamplerConfig(), d0=0.2)
        assert verdict.reason == REASON_NEAR_PLANE
        assert verdict.value == pytest.approx(0.05)

    def test_invisible_pixels_ignored_for_depth(self):
        depth = np.full((10, 10), np.inf)
        depth[:5] = 1.0
        assert check_keyframe(depth, area_mask(0.30), SamplerConfig(), d0=0.2).accepted


class TestEvaluateCandidate:

    def test_records_first_failing_keyframe(self):
        class Sequence:
            def __init__(self):
                self.frames = iter([(np.full((10, 10), 1.0), area_mask(0.3)),
                                    (np.full((10, 10), 1.0), area_mask(0.9)),
                                    (np.full((10, 10), 0.01), area_mask(0.3))])

            def render_visibility(self, intrinsics, pose):
                return next(self.frames)

        candidate = make_candidate()
        verdict = evaluate_candidate(candidate, Sequence(), SamplerConfig(), d0=0.2)
        assert not verdict.accepted
        assert verdict.keyframe == 2
        assert verdict.reason == REASON_EXCESSIVE
        assert len(candidate.depths) == len(candidate.masks) == 3

    def test_stored_maps_recheck(self):
        candidate = make_candidate()
        evaluate_candidate(candidate, FixedRenderer(np.full((10, 10), 1.0), area_mask(0.3)), SamplerConfig(), d0=0.2)
        assert candidate.accepted
        assert all(check_keyframe(d, m, SamplerConfig(), 0.2).accepted
                   for d, m in zip(candidate.depths, candidate.masks))

    def test_renderer_failure(self):
        with pytest.raises(EvaluationError):
            evaluate_candidate(make_candidate(), BrokenRenderer(), SamplerConfig(), d0=0.2)

    def test_monotone_in_thresholds(self, rng):
        loose = SamplerConfig(s_low=0.05, s_high=0.6)
        tight = SamplerConfig(s_low=0.15, s_high=0.45)
        for _ in range(100):
            depth = rng.uniform(0.05, 2.0, (10, 10))
            mask = area_mask(rng.uniform(0.0, 1.0))
            d0 = rng.uniform(0.05, 0.3)
            wide = evaluate_candidate(make_candidate(), FixedRenderer(depth, mask), loose, d0=d0)
            narrow = evaluate_candidate(make_candidate(), FixedRenderer(depth, mask), tight, d0=d0 + 0.1)
            if not wide.accepted:
                assert not narrow.accepted


class TestExtendTrajectory:

    def test_extends_by_quarter(self, wall_view):
        poses = orbit_arc(wall_view.pose, WALL_CENTER, np.radians(40.0), np.radians(10.0), 16)
        extended, discard = extend_trajectory(poses, 0.25)
        assert len(extended) == 20
        assert discard == 16
        for pose in extended:
            assert np.linalg.norm(pose.center - WALL_CENTER) == pytest.approx(3.0, abs=1e-6)

    def test_explicit_center(self, wall_view):
        poses = orbit_arc(wall_view.pose, WALL_CENTER, np.radians(30.0), 0.0, 8)
        extended, discard = extend_trajectory(poses, 0.25, center=WALL_CENTER)
        assert (len(extended), discard) == (10, 8)
        step = np.linalg.norm(poses[1].center - poses[0].center)
        assert np.linalg.norm(extended[-1].center - extended[-2].center) == pytest.approx(step, abs=1e-9)

    def test_zero_fraction(self, wall_view):
        poses = orbit_arc(wall_view.pose, WALL_CENTER, 0.3, 0.0, 5)
        extended, discard = extend_trajectory(poses, 0.0)
        assert len(extended) == 5 and discard == 5

    def test_needs_two_poses(self, wall_view):
        with pytest.raises(DomainError):
            extend_trajectory([wall_view.pose])


class TestSelectKeyframes:

    @pytest.fixture
    def arc(self, wall_view):
        return orbit_arc(wall_view.pose, WALL_CENTER, np.radians(90.0), 0.0, 16)

    def test_all_frames(self, arc, rng):
        frames = [rng.uniform(size=(8, 8)) for _ in range(5)]
        assert sorted(select_keyframes(frames, arc[:5], 5)) == [0, 1, 2, 3, 4]

    def test_sharpest_first(self, wall_view):
        frames = [np.zeros((8, 8)) for _ in range(6)]
        frames[4] = np.indices((8, 8)).sum(axis=0) % 2 * 1.0
        chosen = select_keyframes(frames, [wall_view.pose] * 6, 2)
        assert chosen[0] == 4

    def test_spread_along_arc(self, arc):
        frames = [np.ones((8, 8))] * 16
        chosen = sorted(select_keyframes(frames, arc, 4))
        assert np.all(np.diff(chosen) >= 3)

    def test_deterministic(self, arc, rng):
        frames = [rng.uniform(size=(8, 8)) for _ in range(16)]
        assert select_keyframes(frames, arc, 4) == select_keyframes(frames, arc, 4)

    def test_too_many(self, arc):
        with pytest.raises(DomainError):
            select_keyframes([np.ones((4, 4))] * 3, arc[:3], 4)


class TestSampleTrajectories:

    def test_accepted_satisfy_screening(self, wall, wall_view):
        config = SamplerConfig(max_trajectories=8, d0=0.5)
        result = sample_trajectories([wall_view], wall, MeshVisibilityRenderer(wall), config)
        assert len(result.candidates) == 8
        for c in result.accepted:
            for d, m in zip(c.depths, c.masks):
                assert config.s_low < m.mean() < config.s_high
                assert d[np.isfinite(d)].min() > 0.5
        assert list(result.rejection_log.columns) == REJECTION_COLUMNS
        assert len(result.rejection_log) == 8 - sum(c.accepted for c in result.candidates)

    def test_parallel_matches_serial(self, wall, wall_view):
        config = SamplerConfig(d0=0.5)
        serial = sample_trajectories([wall_view], wall, MeshVisibilityRenderer(wall), config)
        parallel = sample_trajectories([wall_view], wall, MeshVisibilityRenderer(wall), config, workers=4)
        assert [c.candidate_id for c in serial.accepted] == [c.candidate_id for c in parallel.accepted]
        assert serial.rejection_log.equals(parallel.rejection_log)

    def test_empty_surface_yields_nothing(self, wall_view):
        result = sample_trajectories([wall_view], np.zeros((0, 3)), FixedRenderer(None, None), SamplerConfig(d0=1.0))
        assert result.candidates == [] and result.accepted == []


class TestVisibilityRenderers:

    def test_mesh_renderer(self, wall, wall_view):
        depth, mask = MeshVisibilityRenderer(wall).render_visibility(CAMERA, wall_view.pose)
        assert np.allclose(depth, 3.0)
        assert mask.sum() == 0

    def test_point_renderer_marks_holes(self, wall_view):
        points = np.array([[3.0, 0.0, 0.0]])
        depth, mask = PointCloudVisibilityRenderer(points).render_visibility(CAMERA, wall_view.pose)
        assert np.isfinite(depth).sum() == 9
        assert depth[np.isfinite(depth)] == pytest.approx(3.0)
        assert mask.mean() == pytest.approx(1.0 - 9 / 256)
