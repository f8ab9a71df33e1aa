"""
View generators used by completion cycles. A generator turns a list of camera
poses into frames (rgb plus the depth / normal estimates the pipeline needs).

  oracle       exact scene renders (isolates the geometric machinery)
  guided_flow  geometry-guided flow denoising of the current reconstruction's renders
  passthrough  produces nothing (no completion)
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy import ndimage

from sparse_view_recon.exceptions import GenerationError
from sparse_view_recon.flow_match import GaussianMixture, fit_gaussian_field
from sparse_view_recon.geometry import CameraIntrinsics, Pose
from sparse_view_recon.guided_denoise import DenoiseConfig, GuidanceSchedule, ReferencePair, guided_denoise
from sparse_view_recon.scene_oracle import Scene, perturb_normals, render_ground_truth
from sparse_view_recon.splat_render import SurfelCloud, rasterize
from sparse_view_recon.traj_sampler import VisibilityRenderer

logger = logging.getLogger(__name__)

LATENT_SIZE = 16


@dataclass(frozen=True, eq=False)
class GeneratedFrame:
    rgb: np.ndarray
    depth: Optional[np.ndarray]
    normal: Optional[np.ndarray]


@dataclass(eq=False)
class GenerationContext:
    """
    What a generator may look at. `visibility` is the geometry proxy the trajectories were
    sampled against (the extracted mesh during training cycles, the initial point cloud
    during initialization completion); guided generation takes its reference mask from it.
    """
    scene: Scene
    cloud: SurfelCloud
    input_rgbs: Sequence[np.ndarray]
    normal_noise: float = 0.0
    schedule: GuidanceSchedule = GuidanceSchedule()
    denoise_steps: int = 50
    visibility: Optional[VisibilityRenderer] = None


def _oracle_frame(context: GenerationContext, intrinsics: CameraIntrinsics, pose: Pose, seed: int) -> GeneratedFrame:
    gt = render_ground_truth(context.scene, intrinsics, pose)
    return GeneratedFrame(gt.rgb, gt.depth, perturb_normals(gt.normal, context.normal_noise, seed))


class OracleGenerator:
    def generate(self, poses: Sequence[Pose], intrinsics: CameraIntrinsics, context: GenerationContext,
                 seed: int) -> List[GeneratedFrame]:
        return [_oracle_frame(context, intrinsics, pose, seed + i) for i, pose in enumerate(poses)]


class PassthroughGenerator:
    def generate(self, poses, intrinsics, context, seed) -> List[GeneratedFrame]:
        return []


def to_latent(image: np.ndarray, size: int = LATENT_SIZE) -> np.ndarray:
    """Linearly resample an (H, W, C) image to (size, size, C)."""
    h, w = image.shape[:2]
    factors = (size / h, size / w) + ((1.0,) if image.ndim == 3 else ())
    return ndimage.zoom(np.asarray(image, dtype=np.float64), factors, order=1, grid_mode=True, mode="nearest")


def from_latent(latent: np.ndarray, shape) -> np.ndarray:
    h, w = shape
    factors = (h / latent.shape[0], w / latent.shape[1]) + ((1.0,) if latent.ndim == 3 else ())
    return ndimage.zoom(latent, factors, order=1, grid_mode=True, mode="nearest")


class GuidedFlowGenerator:
    """
    Each frame: render the current surfels for the reference colours, take the reference
    mask as 1 - unseen from the context's visibility renderer, reduce both to a 16x16
    latent, and denoise under geometry guidance with a Gaussian field fitted to the input
    latents. Depth and normals come from the oracle, standing in for a monocular estimator.
    """

    def generate(self, poses: Sequence[Pose], intrinsics: CameraIntrinsics, context: GenerationContext,
                 seed: int) -> List[GeneratedFrame]:
        if not context.input_rgbs:
            raise GenerationError("guided_flow generation needs input images to fit the prior")
        if context.visibility is None:
            raise GenerationError("guided_flow generation needs a visibility renderer for the reference mask")
        latents = np.stack([to_latent(rgb).ravel() for rgb in context.input_rgbs])
        field: GaussianMixture = fit_gaussian_field(latents)
        frames = []
        for i, pose in enumerate(poses):
            render = rasterize(context.cloud, intrinsics, pose)
            x0_ref = to_latent(np.clip(render.rgb, 0.0, 1.0))
            _, unseen = context.visibility.render_visibility(intrinsics, pose)
            mask = np.clip(to_latent(1.0 - unseen[..., None]), 0.0, 1.0)
            mask = np.broadcast_to(mask, x0_ref.shape)
            result = guided_denoise(
                field,
                ReferencePair(x0_ref.ravel(), mask.ravel()),
                context.schedule,
                DenoiseConfig(num_steps=context.denoise_steps, seed=seed + i),
            )
            if not np.all(np.isfinite(result.latent)):
                raise GenerationError(f"Denoising produced non-finite values for frame {i}")
            rgb = np.clip(from_latent(result.latent.reshape(x0_ref.shape), intrinsics.shape), 0.0, 1.0)
            oracle = _oracle_frame(context, intrinsics, pose, seed + i)
            frames.append(GeneratedFrame(rgb, oracle.depth, oracle.normal))
        return frames


GENERATORS = {
    "oracle": OracleGenerator,
    "guided_flow": GuidedFlowGenerator,
    "passthrough": PassthroughGenerator,
}
