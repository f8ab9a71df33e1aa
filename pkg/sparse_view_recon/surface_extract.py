"""
Mesh evaluation from rendered depth: TSDF fusion, marching-cubes extraction, and
ray-traced unseen-region masks.
"""

import itertools
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from skimage import measure
from tqdm import tqdm

from sparse_view_recon.exceptions import DomainError
from sparse_view_recon.geometry import CameraIntrinsics, Pose, TriangleMesh, project_points
from sparse_view_recon.traj_sampler import MeshVisibilityRenderer

logger = logging.getLogger(__name__)

DEFAULT_RESOLUTION = 128
DEFAULT_TRUNCATION_VOXELS = 5.0


@dataclass(frozen=True, eq=False)
class PosedDepth:
    depth: np.ndarray
    intrinsics: CameraIntrinsics
    pose: Pose
    # per-pixel fusion weight (rendered alpha); None means weight 1
    alpha: Optional[np.ndarray] = None


@dataclass(eq=False)
class TsdfGrid:
    origin: np.ndarray
    voxel_size: float
    truncation: float
    sdf: np.ndarray
    weight: np.ndarray

    def __post_init__(self):
        if self.truncation < 2 * self.voxel_size - 1e-12:
            raise DomainError("Truncation must be at least two voxels")
        if np.any(self.weight < 0):
            raise DomainError("Fusion weights must be non-negative")

    @property
    def resolution(self) -> Tuple[int, int, int]:
        return tuple(self.sdf.shape)

    @classmethod
    def empty(cls, lo, hi, resolution: int = DEFAULT_RESOLUTION,
              truncation_voxels: float = DEFAULT_TRUNCATION_VOXELS) -> "TsdfGrid":
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        extent = hi - lo
        if np.any(extent <= 0) or not np.all(np.isfinite(extent)):
            raise DomainError(f"Empty grid bounds {lo} .. {hi}")
        voxel = float(extent.max()) / resolution
        dims = tuple(int(d) for d in np.maximum(np.ceil(extent / voxel - 1e-9), 1))
        trunc = truncation_voxels * voxel
        return cls(lo, voxel, trunc, np.full(dims, trunc), np.zeros(dims))

    @classmethod
    def from_function(cls, sdf_fn: Callable[[np.ndarray], np.ndarray], lo, hi,
                      resolution: int = DEFAULT_RESOLUTION,
                      truncation_voxels: float = DEFAULT_TRUNCATION_VOXELS) -> "TsdfGrid":
        """Sample a signed distance function on the grid (weight 1 everywhere)."""
        grid = cls.empty(lo, hi, resolution, truncation_voxels)
        centers = grid.voxel_centers()
        values = np.clip(sdf_fn(centers.reshape(-1, 3)).reshape(grid.resolution), -grid.truncation, grid.truncation)
        grid.sdf = values
        grid.weight = np.ones(grid.resolution)
        return grid

    def voxel_centers(self) -> np.ndarray:
        idx = np.stack(np.meshgrid(*[np.arange(n) for n in self.resolution], indexing="ij"), axis=-1)
        return self.origin + (idx + 0.5) * self.voxel_size


def _integrate(grid: TsdfGrid, centers: np.ndarray, view: PosedDepth) -> None:
    h, w = view.intrinsics.height, view.intrinsics.width
    x, y, z = project_points(centers, view.intrinsics, view.pose)
    with np.errstate(invalid="ignore"):
        px = np.rint(x)
        py = np.rint(y)
        inside = (z > 0) & (px >= 0) & (px < w) & (py >= 0) & (py < h)
    idx = np.flatnonzero(inside)
    pix = py[idx].astype(np.int64) * w + px[idx].astype(np.int64)
    depth = view.depth.reshape(-1)[pix]
    alpha = np.ones_like(depth) if view.alpha is None else view.alpha.reshape(-1)[pix]
    sdf = depth - z[idx]
    keep = np.isfinite(depth) & (sdf >= -grid.truncation) & (alpha > 0)
    idx, sdf, alpha = idx[keep], np.minimum(sdf[keep], grid.truncation), alpha[keep]

    flat_sdf = grid.sdf.reshape(-1)
    flat_w = grid.weight.reshape(-1)
    total = flat_w[idx] + alpha
    flat_sdf[idx] = (flat_w[idx] * flat_sdf[idx] + alpha * sdf) / total
    flat_w[idx] = total


def fuse_depths(views: Sequence[PosedDepth], lo, hi, resolution: int = DEFAULT_RESOLUTION,
                truncation_voxels: float = DEFAULT_TRUNCATION_VOXELS, progress: bool = False) -> TsdfGrid:
    """Weighted-average TSDF integration in the given view order; per-view weight is the rendered alpha."""
    grid = TsdfGrid.empty(lo, hi, resolution, truncation_voxels)
    if len(views) == 0:
        return grid
    centers = grid.voxel_centers().reshape(-1, 3)
    for view in tqdm(views, desc="fuse_depths", disable=not progress):
        _integrate(grid, centers, view)
    logger.debug("Fused %d views into a %s grid (voxel %.4f)", len(views), grid.resolution, grid.voxel_size)
    return grid


def _complete_cells(observed: np.ndarray) -> np.ndarray:
    """Cells (indexed by their lowest corner) whose eight corners were all observed."""
    inner = tuple(n - 1 for n in observed.shape)
    cells = np.zeros_like(observed)
    if min(inner) < 1:
        return cells
    full = np.ones(inner, dtype=bool)
    for offset in itertools.product((0, 1), repeat=3):
        full &= observed[tuple(slice(o, o + n) for o, n in zip(offset, inner))]
    cells[tuple(slice(0, n) for n in inner)] = full
    return cells


def extract_mesh(grid: TsdfGrid) -> TriangleMesh:
    observed = grid.weight > 0
    if not observed.any():
        return TriangleMesh.empty()
    values = grid.sdf[observed]
    if values.min() >= 0 or values.max() <= 0:
        return TriangleMesh.empty()
    volume = np.where(observed, grid.sdf, grid.truncation)
    # cells with an unobserved corner are skipped
    cells = _complete_cells(observed)
    if not cells.any():
        return TriangleMesh.empty()
    try:
        verts, faces, _, _ = measure.marching_cubes(
            volume, level=0.0, spacing=(grid.voxel_size,) * 3, mask=cells, allow_degenerate=False,
        )
    except (ValueError, RuntimeError) as exc:
        logger.warning("Marching cubes found no surface: %s", exc)
        return TriangleMesh.empty()
    if len(faces) == 0:
        return TriangleMesh.empty()
    # voxel values sit at voxel centers
    verts = verts + grid.origin + 0.5 * grid.voxel_size
    return TriangleMesh(verts, faces.astype(np.int64))


def mesh_visibility_mask(mesh: TriangleMesh, intrinsics: CameraIntrinsics, pose: Pose) -> np.ndarray:
    """1 where the pixel ray misses the mesh (unseen), 0 where it hits."""
    _, mask = MeshVisibilityRenderer(mesh).render_visibility(intrinsics, pose)
    return mask
