"""
Image-space training losses with analytic gradients with respect to the rendered
images (rgb, depth, normal, distortion). Every term accepts an optional per-pixel
weight map that multiplies the per-pixel loss before spatial averaging.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from sparse_view_recon.exceptions import DomainError
from sparse_view_recon.geometry import CameraIntrinsics, Pose, camera_directions, pixel_grid

logger = logging.getLogger(__name__)

SSIM_SIGMA = 1.5
SSIM_RADIUS = 5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PYRAMID_SIGMA = 1.0
NORMAL_ALPHA_THRESHOLD = 0.5


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 0.05
    lambda2: float = 0.1
    pyramid_levels: int = 4
    ssim_weight: float = 0.2

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise DomainError("Loss weights must be non-negative")
        if self.pyramid_levels < 1:
            raise DomainError("pyramid_levels must be >= 1")
        if not 0.0 <= self.ssim_weight <= 1.0:
            raise DomainError("ssim_weight must lie in [0, 1]")

    @classmethod
    def from_dict(cls, data: dict) -> "LossConfig":
        return cls(**data)

    def to_dict(self) -> dict:
        return {"lambda1": self.lambda1, "lambda2": self.lambda2,
                "pyramid_levels": self.pyramid_levels, "ssim_weight": self.ssim_weight}


def _spatial_sigma(image: np.ndarray, sigma: float):
    return (sigma, sigma, 0.0) if image.ndim == 3 else sigma


def _window(image: np.ndarray) -> np.ndarray:
    # 11x11 Gaussian window with zero padding; symmetric, so the operator is its own adjoint
    return ndimage.gaussian_filter(image, _spatial_sigma(image, SSIM_SIGMA), mode="constant",
                                   truncate=SSIM_RADIUS / SSIM_SIGMA)


def _check_pair(x: np.ndarray, y: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DomainError(f"Image shapes differ: {x.shape} vs {y.shape}")
    return x, y


def ssim_with_grad(x: np.ndarray, y: np.ndarray, weight: Optional[np.ndarray] = None) -> Tuple[float, np.ndarray]:
    """Mean (optionally weighted) SSIM map value and its gradient with respect to x."""
    x, y = _check_pair(x, y)
    mu_x, mu_y = _window(x), _window(y)
    e_xx, e_yy, e_xy = _window(x * x), _window(y * y), _window(x * y)
    a1 = 2 * mu_x * mu_y + SSIM_C1
    a2 = 2 * (e_xy - mu_x * mu_y) + SSIM_C2
    b1 = mu_x ** 2 + mu_y ** 2 + SSIM_C1
    b2 = (e_xx - mu_x ** 2) + (e_yy - mu_y ** 2) + SSIM_C2
    smap = a1 * a2 / (b1 * b2)

    w = np.ones_like(smap) if weight is None else _broadcast_weight(weight, smap)
    g = w / smap.size
    d_mu = (2 * mu_y * a2 - 2 * mu_y * a1) / (b1 * b2) - smap * (2 * mu_x / b1 - 2 * mu_x / b2)
    d_exx = -smap / b2
    d_exy = 2 * a1 / (b1 * b2)
    grad = _window(g * d_mu) + 2 * x * _window(g * d_exx) + y * _window(g * d_exy)
    return float(np.sum(w * smap) / smap.size), grad


def ssim(x: np.ndarray, y: np.ndarray) -> float:
    return ssim_with_grad(x, y)[0]


def _broadcast_weight(weight: np.ndarray, like: np.ndarray) -> np.ndarray:
    weight = np.asarray(weight, dtype=np.float64)
    if like.ndim == 3 and weight.ndim == 2:
        weight = weight[..., None]
    return np.broadcast_to(weight, like.shape)


def l1_with_grad(x: np.ndarray, y: np.ndarray, weight: Optional[np.ndarray] = None) -> Tuple[float, np.ndarray]:
    x, y = _check_pair(x, y)
    w = np.ones_like(x) if weight is None else _broadcast_weight(weight, x)
    diff = x - y
    return float(np.sum(w * np.abs(diff)) / diff.size), w * np.sign(diff) / diff.size


def photometric_loss(render_rgb: np.ndarray, target_rgb: np.ndarray, ssim_weight: float) -> Tuple[float, np.ndarray]:
    """(1 - w) L1 + w (1 - SSIM)."""
    l1, g_l1 = l1_with_grad(render_rgb, target_rgb)
    s, g_s = ssim_with_grad(render_rgb, target_rgb)
    return (1 - ssim_weight) * l1 + ssim_weight * (1 - s), (1 - ssim_weight) * g_l1 - ssim_weight * g_s


# ---------------------------------------------------------------------------
# Laplacian pyramid
# ---------------------------------------------------------------------------

def _blur(image: np.ndarray) -> np.ndarray:
    return ndimage.gaussian_filter(image, _spatial_sigma(image, PYRAMID_SIGMA), mode="constant", truncate=4.0)


def _upsample_adjoint(image: np.ndarray, shape) -> np.ndarray:
    out = np.zeros(shape)
    out[::2, ::2] = image
    return out


def laplacian_pyramid(image: np.ndarray, levels: int) -> List[np.ndarray]:
    """Band-pass levels G_l - blur(G_l) with G_{l+1} = stride2(blur(G_l)); the last level is the residual G."""
    bands = []
    g = np.asarray(image, dtype=np.float64)
    for level in range(levels):
        blurred = _blur(g)
        if level == levels - 1:
            bands.append(g)
        else:
            bands.append(g - blurred)
            g = blurred[::2, ::2]
    return bands


def laplacian_loss(render_rgb: np.ndarray, target_rgb: np.ndarray, levels: int,
                   weight: Optional[np.ndarray] = None) -> Tuple[float, np.ndarray]:
    """Sum over levels of the mean weighted L1 between pyramid bands; the weight map is strided per level."""
    x, y = _check_pair(render_rgb, target_rgb)
    bands_x = laplacian_pyramid(x, levels)
    bands_y = laplacian_pyramid(y, levels)
    value = 0.0
    band_grads = []
    for level, (bx, by) in enumerate(zip(bands_x, bands_y)):
        w = None if weight is None else np.asarray(weight)[::2 ** level, ::2 ** level]
        v, g = l1_with_grad(bx, by, w)
        value += v
        band_grads.append(g)

    shapes = [b.shape for b in bands_x]
    g_level = band_grads[-1]
    for level in range(levels - 2, -1, -1):
        up = _upsample_adjoint(g_level, shapes[level])
        g_level = band_grads[level] - _blur(band_grads[level]) + _blur(up)
    return value, g_level


# ---------------------------------------------------------------------------
# Geometric terms
# ---------------------------------------------------------------------------

def normal_prior_loss(normal: np.ndarray, prior: Optional[np.ndarray], alpha: np.ndarray,
                      weight: Optional[np.ndarray] = None) -> Tuple[float, np.ndarray]:
    """mean |1 - N . N_prior| over pixels with alpha > 0.5 and a defined prior."""
    g = np.zeros_like(normal)
    if prior is None:
        return 0.0, g
    valid = (alpha > NORMAL_ALPHA_THRESHOLD) & (np.linalg.norm(prior, axis=-1) > 0)
    count = int(valid.sum())
    if count == 0:
        return 0.0, g
    w = np.ones(alpha.shape) if weight is None else np.asarray(weight, dtype=np.float64)
    resid = 1.0 - np.sum(normal * prior, axis=-1)
    value = float(np.sum(np.where(valid, w * np.abs(resid), 0.0)) / count)
    g = np.where(valid[..., None], -(w * np.sign(resid))[..., None] * prior / count, 0.0)
    return value, g


def _world_directions(intrinsics: CameraIntrinsics, pose: Pose) -> np.ndarray:
    xs, ys = pixel_grid(intrinsics)
    return camera_directions(intrinsics, xs, ys) @ pose.rotation.T


def depth_normal_consistency(depth: np.ndarray, normal: np.ndarray, alpha: np.ndarray,
                             intrinsics: CameraIntrinsics, pose: Pose,
                             weight: Optional[np.ndarray] = None) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    mean (1 - N . N_d) over interior pixels with alpha > 0.5, N_d the camera-facing normal
    of the backprojected depth (central differences). Returns value, d/d depth, d/d normal.
    """
    h, w = depth.shape
    g_depth = np.zeros((h, w))
    g_normal = np.zeros((h, w, 3))
    if h < 3 or w < 3:
        return 0.0, g_depth, g_normal
    rays = _world_directions(intrinsics, pose)
    finite = np.isfinite(depth)
    d = np.where(finite, depth, 0.0)
    points = rays * d[..., None]

    c = (slice(1, -1), slice(1, -1))
    dx = points[1:-1, 2:] - points[1:-1, :-2]
    dy = points[2:, 1:-1] - points[:-2, 1:-1]
    raw = np.cross(dx, dy)
    length = np.linalg.norm(raw, axis=-1)
    neighbours = finite[1:-1, 2:] & finite[1:-1, :-2] & finite[2:, 1:-1] & finite[:-2, 1:-1]
    valid = neighbours & finite[c] & (length > 1e-12) & (alpha[c] > NORMAL_ALPHA_THRESHOLD)
    count = int(valid.sum())
    if count == 0:
        return 0.0, g_depth, g_normal
    unit = raw / np.where(valid, length, 1.0)[..., None]
    # orient toward the camera: the point's view vector is rays * d
    facing = np.where(np.sum(unit * points[c], axis=-1) > 0, -1.0, 1.0)
    n_d = unit * facing[..., None]

    wt = np.ones((h - 2, w - 2)) if weight is None else np.asarray(weight, dtype=np.float64)[c]
    wt = np.where(valid, wt, 0.0) / count
    value = float(np.sum(wt * (1.0 - np.sum(normal[c] * n_d, axis=-1))))

    g_normal[c] = -wt[..., None] * n_d
    g_nd = -wt[..., None] * normal[c]
    g_unit = g_nd * facing[..., None]
    g_raw = (g_unit - np.sum(g_unit * unit, axis=-1, keepdims=True) * unit) / np.where(valid, length, 1.0)[..., None]
    g_raw = np.where(valid[..., None], g_raw, 0.0)
    g_dx = np.cross(dy, g_raw)
    g_dy = np.cross(g_raw, dx)
    g_depth[1:-1, 2:] += np.sum(g_dx * rays[1:-1, 2:], axis=-1)
    g_depth[1:-1, :-2] -= np.sum(g_dx * rays[1:-1, :-2], axis=-1)
    g_depth[2:, 1:-1] += np.sum(g_dy * rays[2:, 1:-1], axis=-1)
    g_depth[:-2, 1:-1] -= np.sum(g_dy * rays[:-2, 1:-1], axis=-1)
    return value, g_depth, g_normal


def distortion_loss(distortion: np.ndarray, weight: Optional[np.ndarray] = None) -> Tuple[float, np.ndarray]:
    w = np.ones(distortion.shape) if weight is None else np.asarray(weight, dtype=np.float64)
    return float(np.sum(w * distortion) / distortion.size), w / distortion.size
