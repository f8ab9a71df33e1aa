"""
Sparse-view reconstruction loop.

    init_point_cloud -> [init completion] -> surfel training with loss_input / loss_gen
      -> at every cycle iteration: mesh evaluation, trajectory screening, view generation,
         confidence maps, view-set expansion, densification
      -> final mesh extraction and metrics

Each expansion appends the generated views to the current set; every stage is kept.
"""

import logging
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import ndimage
from tqdm import tqdm

from sparse_view_recon.exceptions import (
    ConfigValidationError, DomainError, GenerationError, ReconError, UnsupportedOptionError,
)
from sparse_view_recon.generators import GENERATORS, GenerationContext
from sparse_view_recon.geometry import (
    CameraIntrinsics, Pose, TriangleMesh, backproject_depth, depth_normals, project_points,
)
from sparse_view_recon.guided_denoise import GuidanceSchedule
from sparse_view_recon.losses import (
    LossConfig, depth_normal_consistency, distortion_loss, laplacian_loss, normal_prior_loss, photometric_loss,
)
from sparse_view_recon.metrics_eval import MetricReport, evaluate_meshes, psnr, ssim
from sparse_view_recon.optim import SurfelOptimizer
from sparse_view_recon.serialization import save_mesh, save_surfels, write_json_atomic
from sparse_view_recon.scene_oracle import (
    Scene, SceneSpec, build_scene, default_view_poses, held_out_poses, perturb_normals, render_ground_truth,
)
from sparse_view_recon.splat_render import (
    RenderGradients, RenderOutput, SurfelCloud, frames_from_normals, rasterize, rasterize_backward,
    surfels_from_point_cloud,
)
from sparse_view_recon.surface_extract import PosedDepth, extract_mesh, fuse_depths
from sparse_view_recon.traj_sampler import (
    REJECTION_COLUMNS, MeshVisibilityRenderer, PointCloudVisibilityRenderer, SamplerConfig, extend_trajectory,
    sample_trajectories, select_keyframes,
)

logger = logging.getLogger(__name__)

GROUND_TRUTH_INPUT = "ground_truth_input"
GENERATED = "generated"
PROVENANCES = (GROUND_TRUTH_INPUT, GENERATED)

DENSIFY_ALPHA = 0.5
DENSIFY_OPACITY = 0.5
BOUNDS_PADDING = 0.03

LOSS_TRACE_COLUMNS = ["iteration", "view", "provenance", "loss", "photometric", "regularization", "normal"]


# ---------------------------------------------------------------------------
# Views
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ViewRecord:
    pose: Pose
    intrinsics: CameraIntrinsics
    rgb: np.ndarray
    depth: Optional[np.ndarray] = None
    normal: Optional[np.ndarray] = None
    provenance: str = GROUND_TRUTH_INPUT
    cycle: Optional[int] = None
    confidence: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise UnsupportedOptionError("provenance", self.provenance, PROVENANCES)
        rgb = np.asarray(self.rgb, dtype=np.float64)
        if rgb.shape != (*self.intrinsics.shape, 3):
            raise DomainError(f"rgb shape {rgb.shape} does not match intrinsics {self.intrinsics.shape}")
        if rgb.min(initial=0.0) < 0.0 or rgb.max(initial=0.0) > 1.0:
            raise DomainError("rgb values must lie in [0, 1]")
        object.__setattr__(self, "rgb", rgb)
        if self.provenance == GENERATED:
            if self.confidence is None:
                raise DomainError("Generated views must carry a confidence map")
            if self.cycle is None:
                raise DomainError("Generated views must record their cycle index")
        elif self.confidence is None:
            object.__setattr__(self, "confidence", np.ones(self.intrinsics.shape))

    @property
    def is_generated(self) -> bool:
        return self.provenance == GENERATED

    def with_confidence(self, confidence: np.ndarray) -> "ViewRecord":
        return replace(self, confidence=np.clip(confidence, 0.0, 1.0))


@dataclass(frozen=True, eq=False)
class ViewSet:
    views: Tuple[ViewRecord, ...]
    # history[t] is the set at stage t; added[t] the generated views merged into it to form stage t + 1
    history: Tuple[Tuple[ViewRecord, ...], ...] = ()
    added: Tuple[Tuple[ViewRecord, ...], ...] = ()

    @classmethod
    def from_inputs(cls, views: Sequence[ViewRecord]) -> "ViewSet":
        views = tuple(views)
        return cls(views, (views,), ())

    def __len__(self) -> int:
        return len(self.views)

    @property
    def inputs(self) -> List[ViewRecord]:
        return [v for v in self.views if not v.is_generated]

    @property
    def generated(self) -> List[ViewRecord]:
        return [v for v in self.views if v.is_generated]

    def satisfies_recursion(self) -> bool:
        """Every stored stage equals the previous stage plus the views generated for it."""
        if len(self.history) != len(self.added) + 1:
            return False
        for before, gen, after in zip(self.history[:-1], self.added, self.history[1:]):
            if {id(v) for v in after} != {id(v) for v in before} | {id(v) for v in gen}:
                return False
        return {id(v) for v in self.history[-1]} == {id(v) for v in self.views}

    def summary(self) -> dict:
        return {
            "size": len(self),
            "inputs": len(self.inputs),
            "generated": len(self.generated),
            "history_sizes": [len(h) for h in self.history],
            "views": [{"provenance": v.provenance, "cycle": v.cycle, "pose": v.pose.matrix().tolist()}
                      for v in self.views],
        }


def _duplicate_pose(a: Pose, b: Pose, tol: float = 1e-6) -> bool:
    return a.is_close(b, tol)


def expand_view_set(current: ViewSet, generated: Sequence[ViewRecord], cycle: int) -> ViewSet:
    kept = []
    for view in generated:
        if view.confidence is None:
            raise DomainError("Generated views must carry confidence maps")
        if any(_duplicate_pose(view.pose, other.pose) for other in list(current.views) + kept):
            logger.debug("Dropping generated view with duplicate pose (cycle %d)", cycle)
            continue
        kept.append(view)
    views = current.views + tuple(kept)
    return ViewSet(views, current.history + (views,), current.added + (tuple(kept),))


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PipelineConfig:
    scene: SceneSpec = field(default_factory=lambda: SceneSpec(seed=0))
    n_views: int = 5
    resolution: int = 64
    fov_deg: float = 60.0
    desk_factor: float = 0.2
    base_iterations: int = 15000
    base_first_cycle: int = 7000
    base_cycle_period: int = 4000
    cycle_count: int = 2
    generator: str = "oracle"
    init_completion: bool = True
    train_completion: bool = True
    seed: int = 0
    point_stride: int = 2
    dedup_voxel_fraction: float = 0.004
    densify_stride: int = 2
    normal_noise: float = 0.05
    grid_resolution: int = 128
    truncation_voxels: float = 5.0
    held_out_views: int = 3
    eval_samples: int = 100_000
    fscore_fraction: float = 0.02
    confidence_tau: float = 0.05
    confidence_floor: float = 0.3
    denoise_steps: int = 50
    workers: int = 1
    loss: LossConfig = LossConfig()
    sampler: SamplerConfig = SamplerConfig()
    schedule: GuidanceSchedule = GuidanceSchedule()

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise UnsupportedOptionError("generator", self.generator, GENERATORS)
        if self.n_views < 1:
            raise DomainError("n_views must be >= 1")
        if self.cycle_count > 0 and self.cycle_iterations[-1] >= self.total_iterations:
            raise DomainError("Last cycle must start before the final iteration")

    @staticmethod
    def _scaled(value: int, factor: float) -> int:
        return int(round(value * factor))

    @property
    def total_iterations(self) -> int:
        return self._scaled(self.base_iterations, self.desk_factor)

    @property
    def cycle_iterations(self) -> List[int]:
        first = self._scaled(self.base_first_cycle, self.desk_factor)
        period = self._scaled(self.base_cycle_period, self.desk_factor)
        return [first + k * period for k in range(self.cycle_count)]

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics.from_fov(self.resolution, self.resolution, self.fov_deg)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        kwargs = dict(data)
        if "scene" in kwargs:
            kwargs["scene"] = SceneSpec.from_dict(kwargs["scene"])
        if "loss" in kwargs:
            kwargs["loss"] = LossConfig.from_dict(kwargs["loss"])
        if "sampler" in kwargs:
            kwargs["sampler"] = SamplerConfig.from_dict(kwargs["sampler"])
        if "schedule" in kwargs:
            kwargs["schedule"] = GuidanceSchedule.from_dict(kwargs["schedule"])
        return cls(**kwargs)

    def to_dict(self) -> dict:
        out = {}
        for name in self.__dataclass_fields__:
            value = getattr(self, name)
            out[name] = value.to_dict() if hasattr(value, "to_dict") else value
        return out


# ---------------------------------------------------------------------------
# Point cloud initialisation and densification
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    colors: np.ndarray
    normals: np.ndarray

    def __len__(self) -> int:
        return len(self.points)


def _view_normals(view: ViewRecord) -> np.ndarray:
    normals, valid = depth_normals(view.depth, view.intrinsics, view.pose)
    if view.normal is not None:
        normals = np.where(valid[..., None], normals, view.normal)
    return normals


def init_point_cloud(views: Sequence[ViewRecord], voxel_size: float, stride: int = 2) -> PointCloud:
    """Backproject strided finite-depth pixels of every view; keep the first point per voxel."""
    points, colors, normals = [], [], []
    for index, view in enumerate(views):
        if view.depth is None:
            raise ConfigValidationError(f"View {index} has no depth; point-cloud initialisation needs depth")
        world = backproject_depth(view.depth, view.intrinsics, view.pose)[::stride, ::stride]
        finite = np.isfinite(view.depth)[::stride, ::stride]
        points.append(world[finite])
        colors.append(view.rgb[::stride, ::stride][finite])
        normals.append(_view_normals(view)[::stride, ::stride][finite])
    if not points or sum(len(p) for p in points) == 0:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)))
    points = np.concatenate(points)
    colors = np.concatenate(colors)
    normals = np.concatenate(normals)
    keys = np.floor(points / voxel_size).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    first = np.sort(first)
    logger.info("Initial point cloud: %d points after voxel merge (%d before)", len(first), len(points))
    return PointCloud(points[first], colors[first], normals[first])


def densify_from_views(views: Sequence[ViewRecord], cloud: SurfelCloud, stride: int = 2) -> SurfelCloud:
    """Insert surfels at strided pixels whose rays the current surfels do not explain (alpha < 0.5)."""
    inserted = []
    for view in views:
        if view.depth is None:
            continue
        render = rasterize(cloud, view.intrinsics, view.pose)
        sel = np.zeros(view.intrinsics.shape, dtype=bool)
        sel[::stride, ::stride] = True
        sel &= np.isfinite(view.depth) & (render.alpha < DENSIFY_ALPHA)
        if not sel.any():
            continue
        world = backproject_depth(view.depth, view.intrinsics, view.pose)[sel]
        normals = _view_normals(view)[sel]
        facing = -view.pose.forward
        normals = np.where(np.linalg.norm(normals, axis=1, keepdims=True) > 0, normals, facing)
        tu, tv = frames_from_normals(normals)
        footprint = stride * view.depth[sel] / view.intrinsics.focal_x
        inserted.append(SurfelCloud(world, tu, tv, np.stack([footprint, footprint], axis=1),
                                    np.full(len(world), DENSIFY_OPACITY), view.rgb[sel]))
    out = SurfelCloud.empty()
    for part in inserted:
        out = out.concatenate(part)
    return out


def compute_confidence(view: ViewRecord, peers: Sequence[ViewRecord], tau: float = 0.05,
                       floor: float = 0.3) -> np.ndarray:
    """
    U = exp(-median_peers(|z_proj - D_peer| / z_proj) / tau) per pixel, with D_peer read by
    bilinear interpolation of the peer's inverse depth. Pixels no peer observes get `floor`.
    """
    if not peers:
        raise DomainError("compute_confidence needs at least one peer view")
    h, w = view.intrinsics.shape
    u = np.full((h, w), floor)
    if view.depth is None:
        return u
    own = np.isfinite(view.depth)
    world = backproject_depth(np.where(own, view.depth, 1.0), view.intrinsics, view.pose).reshape(-1, 3)
    errors = []
    for peer in peers:
        if peer.depth is None:
            continue
        x, y, z = project_points(world, peer.intrinsics, peer.pose)
        ph, pw = peer.intrinsics.shape
        finite = np.isfinite(peer.depth)
        inv = np.where(finite, 1.0 / np.where(finite, peer.depth, 1.0), 0.0)
        with np.errstate(invalid="ignore"):
            inside = (z > 0) & (x >= 0) & (x <= pw - 1) & (y >= 0) & (y <= ph - 1)
        coords = np.stack([np.where(inside, y, 0.0), np.where(inside, x, 0.0)])
        inv_sample = ndimage.map_coordinates(inv, coords, order=1, mode="nearest")
        support = ndimage.map_coordinates(finite.astype(np.float64), coords, order=1, mode="nearest")
        ok = inside & (support > 1 - 1e-9) & (inv_sample > 0) & own.reshape(-1)
        err = np.full(len(world), np.nan)
        err[ok] = np.abs(z[ok] - 1.0 / inv_sample[ok]) / z[ok]
        errors.append(err)
    if not errors:
        return u
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        median = np.nanmedian(np.stack(errors), axis=0)
    seen = np.isfinite(median)
    flat = u.reshape(-1)
    flat[seen] = np.clip(np.exp(-median[seen] / tau), 0.0, 1.0)
    return flat.reshape(h, w)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class LossResult:
    total: float
    terms: Dict[str, float]
    grads: RenderGradients


def _geometric_terms(render: RenderOutput, view: ViewRecord, cfg: LossConfig, weight: Optional[np.ndarray]):
    dist, g_dist = distortion_loss(render.distortion, weight)
    cons, g_depth, g_normal_reg = depth_normal_consistency(render.depth, render.normal, render.alpha,
                                                           view.intrinsics, view.pose, weight)
    if view.normal is None:
        logger.warning("View has no normal prior; skipping the normal loss term")
        normal_term, g_normal_prior = 0.0, np.zeros_like(render.normal)
    else:
        normal_term, g_normal_prior = normal_prior_loss(render.normal, view.normal, render.alpha, weight)
    grads = RenderGradients(
        depth=cfg.lambda1 * g_depth,
        normal=cfg.lambda1 * g_normal_reg + cfg.lambda2 * g_normal_prior,
        distortion=cfg.lambda1 * g_dist,
    )
    return dist + cons, normal_term, grads


def loss_input(render: RenderOutput, view: ViewRecord, cfg: LossConfig) -> LossResult:
    """Photometric + lambda1 * regularisation + lambda2 * normal prior on a ground-truth input view."""
    if view.provenance != GROUND_TRUTH_INPUT:
        raise DomainError("loss_input applies to ground-truth input views only")
    l_c, g_rgb = photometric_loss(render.rgb, view.rgb, cfg.ssim_weight)
    l_reg, l_n, grads = _geometric_terms(render, view, cfg, None)
    grads.rgb = g_rgb
    total = l_c + cfg.lambda1 * l_reg + cfg.lambda2 * l_n
    return LossResult(total, {"photometric": l_c, "regularization": l_reg, "normal": l_n}, grads)


def loss_gen(render: RenderOutput, view: ViewRecord, cfg: LossConfig) -> LossResult:
    """Pyramid + lambda1 * regularisation + lambda2 * normal prior, each weighted per pixel by the confidence."""
    if view.confidence is None:
        raise DomainError("loss_gen needs a confidence map")
    u = np.asarray(view.confidence, dtype=np.float64)
    l_lap, g_rgb = laplacian_loss(render.rgb, view.rgb, cfg.pyramid_levels, u)
    l_reg, l_n, grads = _geometric_terms(render, view, cfg, u)
    grads.rgb = g_rgb
    total = l_lap + cfg.lambda1 * l_reg + cfg.lambda2 * l_n
    return LossResult(total, {"photometric": l_lap, "regularization": l_reg, "normal": l_n}, grads)


def view_loss(render: RenderOutput, view: ViewRecord, cfg: LossConfig) -> LossResult:
    return loss_gen(render, view, cfg) if view.is_generated else loss_input(render, view, cfg)


# ---------------------------------------------------------------------------
# Run
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class ReconstructionResult:
    cloud: SurfelCloud
    mesh: TriangleMesh
    report: MetricReport
    view_set: ViewSet
    loss_trace: pd.DataFrame
    rejection_log: pd.DataFrame
    timings: Dict[str, float]


def build_input_views(scene: Scene, config: PipelineConfig) -> List[ViewRecord]:
    intrinsics = config.intrinsics
    views = []
    for i, pose in enumerate(default_view_poses(scene, config.n_views)):
        gt = render_ground_truth(scene, intrinsics, pose)
        normal = perturb_normals(gt.normal, config.normal_noise, config.seed * 1000 + i)
        views.append(ViewRecord(pose, intrinsics, gt.rgb, gt.depth, normal))
    return views


class ReconstructionRun:
    """Holds pipeline state; the point cloud can only be (re)built before training starts."""

    def __init__(self, config: PipelineConfig, scene: Optional[Scene] = None,
                 input_views: Optional[Sequence[ViewRecord]] = None, output_dir: Optional[Path] = None,
                 progress: bool = False):
        self.config = config
        self.scene = scene if scene is not None else build_scene(config.scene)
        views = list(input_views) if input_views is not None else build_input_views(self.scene, config)
        self.view_set = ViewSet.from_inputs(views)
        self.generator = GENERATORS[config.generator]()
        self.output_dir = None if output_dir is None else Path(output_dir)
        self.progress = progress
        self.cloud = SurfelCloud.empty()
        self.points: Optional[PointCloud] = None
        self.optimizer = SurfelOptimizer()
        self.training_started = False
        self.loss_rows: List[dict] = []
        self.rejections: List[pd.DataFrame] = []
        self.timings: Dict[str, float] = {}
        self._rng = np.random.default_rng(config.seed)
        lo, hi = self.scene.bounds
        pad = BOUNDS_PADDING * (hi - lo).max()
        self.bounds = (lo - pad, hi + pad)

    # -- timing -------------------------------------------------------------
    def _timed(self, phase: str, started: float) -> None:
        self.timings[phase] = self.timings.get(phase, 0.0) + time.perf_counter() - started

    # -- initialisation -----------------------------------------------------
    def initialize(self) -> None:
        if self.training_started:
            raise ReconError("Generated views cannot re-initialise the point cloud once training has started")
        started = time.perf_counter()
        voxel = self.config.dedup_voxel_fraction * self.scene.diagonal
        with_depth = [v for v in self.view_set.views if v.depth is not None]
        cloud = init_point_cloud(with_depth, voxel, self.config.point_stride)
        self.points = cloud
        self.cloud = surfels_from_point_cloud(cloud.points, cloud.colors, cloud.normals, seed=self.config.seed)
        self.optimizer = SurfelOptimizer()
        self._timed("initialize", started)

    def complete_initialization(self) -> None:
        """Generate views around the initial point cloud and rebuild the cloud from the expanded set."""
        started = time.perf_counter()
        renderer = PointCloudVisibilityRenderer(self.points.points)
        generated = self._generate(0, self.points.points, renderer)
        self.view_set = expand_view_set(self.view_set, generated, 0)
        self._timed("init_completion", started)
        self.initialize()

    # -- generation ---------------------------------------------------------
    def _generate_candidate(self, cycle: int, index: int, candidate, context: GenerationContext) -> List[ViewRecord]:
        config = self.config
        seed = int(np.random.SeedSequence([config.seed, cycle, index]).generate_state(1)[0])
        poses, discard = extend_trajectory(candidate.poses, config.sampler.extension, candidate.center)
        try:
            frames = self.generator.generate(poses, candidate.intrinsics, context, seed)
        except GenerationError:
            raise
        except Exception as exc:
            raise GenerationError(f"Generator '{config.generator}' failed: {exc}") from exc
        if not frames:
            return []
        # frames past the original arc only stabilise the generator
        frames, poses = frames[:discard], poses[:discard]
        keys = select_keyframes([f.rgb for f in frames], poses, min(config.sampler.keyframes, len(frames)))
        return [ViewRecord(poses[k], candidate.intrinsics, np.clip(frames[k].rgb, 0.0, 1.0), frames[k].depth,
                           frames[k].normal, GENERATED, cycle, np.ones(candidate.intrinsics.shape))
                for k in keys]

    def _generate(self, cycle: int, surface, renderer) -> List[ViewRecord]:
        config = self.config
        inputs = self.view_set.inputs
        sampling = sample_trajectories(inputs, surface, renderer, config.sampler, self.scene.diagonal,
                                       config.workers)
        log = sampling.rejection_log.assign(cycle=cycle)
        self.rejections.append(log)
        context = GenerationContext(self.scene, self.cloud, [v.rgb for v in inputs], config.normal_noise,
                                    config.schedule, config.denoise_steps, visibility=renderer)
        accepted = sampling.accepted
        if config.workers > 1 and len(accepted) > 1:
            with ThreadPoolExecutor(max_workers=config.workers) as pool:
                batches = list(pool.map(lambda item: self._generate_candidate(cycle, item[0], item[1], context),
                                        enumerate(accepted)))
        else:
            batches = [self._generate_candidate(cycle, i, c, context) for i, c in enumerate(accepted)]
        records = [record for batch in batches for record in batch]
        peers = [v for v in self.view_set.views if v.depth is not None]
        if not peers:
            return records
        return [r.with_confidence(compute_confidence(r, peers, config.confidence_tau, config.confidence_floor))
                for r in records]

    # -- mesh evaluation ----------------------------------------------------
    def evaluate_mesh(self) -> TriangleMesh:
        started = time.perf_counter()
        depths = []
        for view in self.view_set.views:
            render = rasterize(self.cloud, view.intrinsics, view.pose)
            depths.append(PosedDepth(render.depth, view.intrinsics, view.pose, render.alpha))
        grid = fuse_depths(depths, *self.bounds, resolution=self.config.grid_resolution,
                           truncation_voxels=self.config.truncation_voxels, progress=self.progress)
        mesh = extract_mesh(grid)
        self._timed("mesh_evaluation", started)
        return mesh

    # -- training -----------------------------------------------------------
    def _train_step(self, iteration: int, view_index: int) -> None:
        view = self.view_set.views[view_index]
        render = rasterize(self.cloud, view.intrinsics, view.pose)
        loss = view_loss(render, view, self.config.loss)
        grads = rasterize_backward(self.cloud, view.intrinsics, view.pose, loss.grads, render)
        self.cloud = self.optimizer.step(self.cloud, grads)
        self.loss_rows.append({"iteration": iteration, "view": view_index, "provenance": view.provenance,
                               "loss": loss.total, **loss.terms})

    def run_cycle(self, cycle: int) -> None:
        started = time.perf_counter()
        mesh = self.evaluate_mesh()
        try:
            if mesh.is_empty:
                raise GenerationError("Evaluated mesh is empty; nothing to orbit")
            generated = self._generate(cycle, mesh, MeshVisibilityRenderer(mesh))
        except GenerationError as exc:
            logger.warning("Cycle %d skipped: %s", cycle, exc)
            self.view_set = expand_view_set(self.view_set, [], cycle)
            self._timed("cycles", started)
            return
        before = len(self.view_set)
        self.view_set = expand_view_set(self.view_set, generated, cycle)
        added = list(self.view_set.views[before:])
        inserted = densify_from_views(added, self.cloud, self.config.densify_stride)
        if len(inserted):
            self.cloud = self.cloud.concatenate(inserted)
            self.optimizer.extend(len(inserted))
        logger.info("Cycle %d: %d views generated, %d kept, %d surfels inserted (total %d)",
                    cycle, len(generated), len(added), len(inserted), len(self.cloud))
        self._timed("cycles", started)
        if self.output_dir is not None:
            self._snapshot(cycle, mesh)

    def train(self) -> None:
        self.training_started = True
        config = self.config
        cycles = dict(zip(config.cycle_iterations, range(1, config.cycle_count + 1))) \
            if config.train_completion and config.generator != "passthrough" else {}
        order: List[int] = []
        started = time.perf_counter()
        for iteration in tqdm(range(config.total_iterations), desc="train", disable=not self.progress):
            if iteration in cycles:
                self._timed("training", started)
                self.run_cycle(cycles[iteration])
                order = []
                started = time.perf_counter()
            if not order:
                order = list(self._rng.permutation(len(self.view_set)))
            self._train_step(iteration, int(order.pop(0)))
        self._timed("training", started)

    # -- outputs ------------------------------------------------------------
    def _snapshot(self, cycle: int, mesh: TriangleMesh) -> None:
        folder = self.output_dir / "snapshots" / f"cycle_{cycle}"
        if not mesh.is_empty:
            save_mesh(folder / "mesh.ply", mesh)
        save_surfels(folder / "primitives.ply", self.cloud)
        write_json_atomic(folder / "view_set.json", self.view_set.summary())

    def evaluate(self, mesh: TriangleMesh) -> MetricReport:
        started = time.perf_counter()
        config = self.config
        report = evaluate_meshes(mesh, self.scene.mesh, f"scene_{config.scene.seed}", config.eval_samples,
                                 config.fscore_fraction, config.seed)
        psnrs, ssims = [], []
        for pose in held_out_poses(self.scene, config.held_out_views):
            gt = render_ground_truth(self.scene, config.intrinsics, pose)
            render = rasterize(self.cloud, config.intrinsics, pose)
            pred = np.clip(render.rgb, 0.0, 1.0)
            psnrs.append(psnr(pred, gt.rgb))
            ssims.append(ssim(pred, gt.rgb))
        if psnrs:
            report.psnr = float(np.mean(psnrs))
            report.ssim = float(np.mean(ssims))
        self._timed("evaluation", started)
        return report

    def run(self) -> ReconstructionResult:
        config = self.config
        self.initialize()
        if config.init_completion and config.generator != "passthrough":
            try:
                self.complete_initialization()
            except GenerationError as exc:
                logger.warning("Initialisation completion skipped: %s", exc)
        self.train()
        mesh = self.evaluate_mesh()
        report = self.evaluate(mesh)
        rejections = (pd.concat(self.rejections, ignore_index=True) if self.rejections
                      else pd.DataFrame(columns=REJECTION_COLUMNS + ["cycle"]))
        return ReconstructionResult(
            cloud=self.cloud, mesh=mesh, report=report, view_set=self.view_set,
            loss_trace=pd.DataFrame(self.loss_rows, columns=LOSS_TRACE_COLUMNS),
            rejection_log=rejections, timings=dict(self.timings),
        )


def run_reconstruction(config: PipelineConfig, scene: Optional[Scene] = None,
                       input_views: Optional[Sequence[ViewRecord]] = None, output_dir=None,
                       progress: bool = False) -> ReconstructionResult:
    return ReconstructionRun(config, scene, input_views, output_dir, progress).run()
