"""
Gaussian surfels (2D Gaussian disks) and a differentiable rasterizer.

Forward: for every (pixel, surfel) pair inside the surfel's screen footprint the
pixel ray is intersected with the surfel plane; the kernel value is the Gaussian
falloff in the disk's tangent coordinates, floored by a 0.3 px^2 screen-space
low-pass kernel. Pairs are sorted front-to-back per pixel by surfel view depth
(ties by surfel index) and alpha-composited:
    w_i = a_i * prod_{j<i} (1 - a_j),   a_i = o_i * p_i,
until the transmittance falls below 1e-4.

Backward: exact gradients of every output (rgb, depth, alpha, normal, distortion)
with respect to position, scales, tangent frame (world-frame rotation vector
applied on the left), opacity and color.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from sparse_view_recon.exceptions import DomainError
from sparse_view_recon.geometry import CameraIntrinsics, Pose

logger = logging.getLogger(__name__)

NEAR_PLANE = 0.01
LOWPASS_VARIANCE = 0.3
TRANSMITTANCE_EPS = 1e-4
# Kernel support radius in standard deviations (quartic taper reaches zero here)
TAPER_RADIUS = 3.0
MIN_SCALE = 1e-4

# Accumulated channels: rgb(3), weight, depth, depth^2, normal(3)
_RGB, _W, _Z, _Z2, _N = slice(0, 3), 3, 4, 5, slice(6, 9)
_CHANNELS = 9


@dataclass
class SurfelPrimitive:
    position: np.ndarray
    tangent_u: np.ndarray
    tangent_v: np.ndarray
    scales: np.ndarray
    opacity: float
    color: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.tangent_u = np.asarray(self.tangent_u, dtype=np.float64)
        self.tangent_v = np.asarray(self.tangent_v, dtype=np.float64)
        self.scales = np.asarray(self.scales, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.float64)
        if abs(np.dot(self.tangent_u, self.tangent_v)) > 1e-6 or \
                abs(np.linalg.norm(self.tangent_u) - 1) > 1e-6 or abs(np.linalg.norm(self.tangent_v) - 1) > 1e-6:
            raise DomainError("Surfel tangent vectors must be orthonormal")
        if np.any(self.scales <= 0):
            raise DomainError("Surfel scales must be positive")

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.tangent_u, self.tangent_v)


@dataclass
class SurfelCloud:
    """Struct-of-arrays storage for N surfels (one parallel array per field); the optimizer works on this form."""
    positions: np.ndarray
    tangents_u: np.ndarray
    tangents_v: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.tangents_u = np.asarray(self.tangents_u, dtype=np.float64).reshape(-1, 3)
        self.tangents_v = np.asarray(self.tangents_v, dtype=np.float64).reshape(-1, 3)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(-1, 2)
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(-1)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        if not all(len(a) == n for a in (self.tangents_u, self.tangents_v, self.scales,
                                         self.opacities, self.colors)):
            raise DomainError("Surfel attribute arrays must have matching lengths")

    def __len__(self) -> int:
        return len(self.positions)

    @classmethod
    def empty(cls) -> "SurfelCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 2)),
                   np.zeros(0), np.zeros((0, 3)))

    @classmethod
    def from_primitives(cls, primitives: Sequence[SurfelPrimitive]) -> "SurfelCloud":
        if len(primitives) == 0:
            return cls.empty()
        return cls(
            np.stack([p.position for p in primitives]),
            np.stack([p.tangent_u for p in primitives]),
            np.stack([p.tangent_v for p in primitives]),
            np.stack([p.scales for p in primitives]),
            np.array([p.opacity for p in primitives]),
            np.stack([p.color for p in primitives]),
        )

    def to_primitives(self) -> List[SurfelPrimitive]:
        return [SurfelPrimitive(self.positions[i], self.tangents_u[i], self.tangents_v[i],
                                self.scales[i], float(self.opacities[i]), self.colors[i])
                for i in range(len(self))]

    @property
    def normals(self) -> np.ndarray:
        return np.cross(self.tangents_u, self.tangents_v)

    def copy(self) -> "SurfelCloud":
        return SurfelCloud(self.positions.copy(), self.tangents_u.copy(), self.tangents_v.copy(),
                           self.scales.copy(), self.opacities.copy(), self.colors.copy())

    def concatenate(self, other: "SurfelCloud") -> "SurfelCloud":
        return SurfelCloud(
            np.concatenate([self.positions, other.positions]),
            np.concatenate([self.tangents_u, other.tangents_u]),
            np.concatenate([self.tangents_v, other.tangents_v]),
            np.concatenate([self.scales, other.scales]),
            np.concatenate([self.opacities, other.opacities]),
            np.concatenate([self.colors, other.colors]),
        )

    def rotated(self, rotvecs: np.ndarray) -> "SurfelCloud":
        """Apply per-surfel world-frame rotations exp([w]) to the tangent frames."""
        out = self.copy()
        if len(self) == 0:
            return out
        rot = Rotation.from_rotvec(np.asarray(rotvecs, dtype=np.float64).reshape(-1, 3))
        out.tangents_u = rot.apply(self.tangents_u)
        out.tangents_v = rot.apply(self.tangents_v)
        # keep the frame orthonormal against round-off drift
        out.tangents_u /= np.linalg.norm(out.tangents_u, axis=1, keepdims=True)
        out.tangents_v -= np.sum(out.tangents_v * out.tangents_u, axis=1, keepdims=True) * out.tangents_u
        out.tangents_v /= np.linalg.norm(out.tangents_v, axis=1, keepdims=True)
        return out


@dataclass
class SplatKernel2D:
    mean: np.ndarray
    covariance: np.ndarray
    depth: float

    @property
    def extent(self) -> float:
        """One-sigma extent along the major axis, pixels."""
        return float(np.sqrt(np.linalg.eigvalsh(self.covariance).max()))


@dataclass
class RenderOutput:
    rgb: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    normal: np.ndarray
    distortion: np.ndarray
    transmittance: np.ndarray
    _context: Optional[dict] = field(default=None, repr=False)


@dataclass
class SurfelGradients:
    positions: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "SurfelGradients":
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 2)), np.zeros(n), np.zeros((n, 3)))

    def as_dict(self) -> Dict[str, np.ndarray]:
        return {"positions": self.positions, "rotations": self.rotations, "scales": self.scales,
                "opacities": self.opacities, "colors": self.colors}

    def __iadd__(self, other: "SurfelGradients") -> "SurfelGradients":
        for name, value in other.as_dict().items():
            getattr(self, name).__iadd__(value)
        return self


def as_cloud(primitives: Union[SurfelCloud, Sequence[SurfelPrimitive]]) -> SurfelCloud:
    if isinstance(primitives, SurfelCloud):
        return primitives
    return SurfelCloud.from_primitives(list(primitives))


# ---------------------------------------------------------------------------
# Kernel
# ---------------------------------------------------------------------------

def _taper_kernel(r2: np.ndarray):
    """exp(-r2/2) * (1 - (r2/R^2)^2)^2 on r2 < R^2, and its derivative in r2."""
    x = r2 / TAPER_RADIUS ** 2
    inside = x < 1.0
    e = np.exp(-0.5 * r2)
    one = 1.0 - x * x
    win = one * one
    value = np.where(inside, e * win, 0.0)
    deriv = np.where(inside, e * (-0.5 * win - 4.0 * one * x / TAPER_RADIUS ** 2), 0.0)
    return value, deriv


def _camera_frame(cloud: SurfelCloud, pose: Pose):
    pc = pose.world_to_camera(cloud.positions)
    a = cloud.tangents_u @ pose.rotation
    b = cloud.tangents_v @ pose.rotation
    return pc, a, b


def project_surfel(primitive: SurfelPrimitive, intrinsics: CameraIntrinsics, pose: Pose) -> Optional[SplatKernel2D]:
    pc = pose.world_to_camera(primitive.position)
    x, y, z = pc
    if z <= NEAR_PLANE:
        return None
    a = pose.rotation.T @ primitive.tangent_u
    b = pose.rotation.T @ primitive.tangent_v
    su, sv = primitive.scales
    cov3 = su ** 2 * np.outer(a, a) + sv ** 2 * np.outer(b, b)
    jac = np.array([[intrinsics.focal_x / z, 0.0, -intrinsics.focal_x * x / z ** 2],
                    [0.0, intrinsics.focal_y / z, -intrinsics.focal_y * y / z ** 2]])
    cov2 = jac @ cov3 @ jac.T + LOWPASS_VARIANCE * np.eye(2)
    mean = np.array([intrinsics.focal_x * x / z + intrinsics.principal_x,
                     intrinsics.focal_y * y / z + intrinsics.principal_y])
    return SplatKernel2D(mean=mean, covariance=0.5 * (cov2 + cov2.T), depth=float(z))


def _screen_boxes(pc, a, b, scales, intrinsics: CameraIntrinsics):
    """Conservative integer pixel boxes covering each surfel's kernel support."""
    w, h = intrinsics.width, intrinsics.height
    n = len(pc)
    ru = (TAPER_RADIUS * scales[:, 0])[:, None] * a
    rv = (TAPER_RADIUS * scales[:, 1])[:, None] * b
    corners = np.stack([pc + ru + rv, pc + ru - rv, pc - ru + rv, pc - ru - rv], axis=1)
    cz = corners[..., 2]
    behind = (cz <= NEAR_PLANE).any(axis=1)
    safe_z = np.where(cz > NEAR_PLANE, cz, 1.0)
    cx = intrinsics.focal_x * corners[..., 0] / safe_z + intrinsics.principal_x
    cy = intrinsics.focal_y * corners[..., 1] / safe_z + intrinsics.principal_y
    mx = intrinsics.focal_x * pc[:, 0] / pc[:, 2] + intrinsics.principal_x
    my = intrinsics.focal_y * pc[:, 1] / pc[:, 2] + intrinsics.principal_y
    lp = TAPER_RADIUS * np.sqrt(LOWPASS_VARIANCE)
    x0 = np.minimum(cx.min(axis=1), mx - lp)
    x1 = np.maximum(cx.max(axis=1), mx + lp)
    y0 = np.minimum(cy.min(axis=1), my - lp)
    y1 = np.maximum(cy.max(axis=1), my + lp)
    x0 = np.where(behind, 0, np.clip(np.floor(x0), 0, w))
    x1 = np.where(behind, w - 1, np.clip(np.ceil(x1), -1, w - 1))
    y0 = np.where(behind, 0, np.clip(np.floor(y0), 0, h))
    y1 = np.where(behind, h - 1, np.clip(np.ceil(y1), -1, h - 1))
    return x0.astype(np.int64), x1.astype(np.int64), y0.astype(np.int64), y1.astype(np.int64)


def _evaluate_pairs(sid, xs, ys, pc, a, b, scales, intrinsics: CameraIntrinsics):
    fx, fy = intrinsics.focal_x, intrinsics.focal_y
    d = np.stack([(xs - intrinsics.principal_x) / fx, (ys - intrinsics.principal_y) / fy,
                  np.ones_like(xs)], axis=-1)
    A, B, P = a[sid], b[sid], pc[sid]
    su, sv = scales[sid, 0], scales[sid, 1]

    # Ray-plane intersection: [a b -d] w = -p  ->  p + w0 a + w1 b = w2 d
    mats = np.stack([A, B, -d], axis=-1)
    det = np.einsum("ij,ij->i", np.cross(A, B), d)
    solvable = np.abs(det) > 1e-9
    mats = np.where(solvable[:, None, None], mats, np.eye(3))
    w = np.linalg.solve(mats, -P[..., None])[..., 0]
    tau = w[:, 2]
    surf_ok = solvable & (tau > NEAR_PLANE)
    r2 = (w[:, 0] / su) ** 2 + (w[:, 1] / sv) ** 2
    g_surf, dg_surf = _taper_kernel(np.where(surf_ok, r2, np.inf))
    g_surf = np.where(surf_ok, g_surf, 0.0)

    mu_x = fx * P[:, 0] / P[:, 2] + intrinsics.principal_x
    mu_y = fy * P[:, 1] / P[:, 2] + intrinsics.principal_y
    dx, dy = xs - mu_x, ys - mu_y
    r2_lp = (dx * dx + dy * dy) / LOWPASS_VARIANCE
    g_lp, dg_lp = _taper_kernel(r2_lp)

    use_surf = g_surf >= g_lp
    kernel = np.where(use_surf, g_surf, g_lp)
    z = np.where(use_surf, tau, P[:, 2])
    return {
        "kernel": kernel, "z": z, "use_surf": use_surf, "w": w, "mats": mats,
        "dg_surf": np.where(surf_ok, dg_surf, 0.0), "dg_lp": dg_lp, "dx": dx, "dy": dy,
    }


def _build_pairs(cloud: SurfelCloud, intrinsics: CameraIntrinsics, pose: Pose):
    pc, a, b = _camera_frame(cloud, pose)
    visible = np.flatnonzero(pc[:, 2] > NEAR_PLANE)
    ctx = {"pc": pc, "a": a, "b": b}
    if len(visible) == 0:
        return ctx, None
    x0, x1, y0, y1 = _screen_boxes(pc[visible], a[visible], b[visible], cloud.scales[visible], intrinsics)
    bw = np.maximum(x1 - x0 + 1, 0)
    bh = np.maximum(y1 - y0 + 1, 0)
    counts = bw * bh
    keep = counts > 0
    visible, x0, y0, bw, counts = visible[keep], x0[keep], y0[keep], bw[keep], counts[keep]
    if counts.sum() == 0:
        return ctx, None
    sid = np.repeat(visible, counts)
    offsets = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    bw_rep = np.repeat(bw, counts)
    xs = (np.repeat(x0, counts) + offsets % bw_rep).astype(np.float64)
    ys = (np.repeat(y0, counts) + offsets // bw_rep).astype(np.float64)

    ev = _evaluate_pairs(sid, xs, ys, pc, a, b, cloud.scales, intrinsics)
    nz = ev["kernel"] > 0
    pairs = {k: v[nz] for k, v in ev.items()}
    pairs["sid"] = sid[nz]
    pairs["xs"], pairs["ys"] = xs[nz], ys[nz]
    pairs["pixel"] = (pairs["ys"].astype(np.int64) * intrinsics.width + pairs["xs"].astype(np.int64))
    if len(pairs["sid"]) == 0:
        return ctx, None

    order = np.lexsort((pairs["sid"], pc[pairs["sid"], 2], pairs["pixel"]))
    pairs = {k: v[order] for k, v in pairs.items()}
    pix = pairs["pixel"]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    group_start = np.flatnonzero(first)
    rank = np.arange(len(pix)) - np.repeat(group_start, np.diff(np.append(group_start, len(pix))))
    pairs["rank"] = rank
    return ctx, pairs


def rasterize(primitives: Union[SurfelCloud, Sequence[SurfelPrimitive]], intrinsics: CameraIntrinsics,
              pose: Pose, background=(0.0, 0.0, 0.0)) -> RenderOutput:
    cloud = as_cloud(primitives)
    h, w = intrinsics.height, intrinsics.width
    n_pix = h * w
    bg = np.asarray(background, dtype=np.float64)
    accum = np.zeros((n_pix, _CHANNELS))
    transmittance = np.ones(n_pix)
    context = {"cloud": cloud, "intrinsics": intrinsics, "pose": pose, "background": bg, "pairs": None}

    if len(cloud):
        ctx, pairs = _build_pairs(cloud, intrinsics, pose)
        context.update(ctx)
        if pairs is not None:
            k_max = int(pairs["rank"].max()) + 1
            sid = pairs["sid"]
            alpha_pairs = cloud.opacities[sid] * pairs["kernel"]
            normals = cloud.normals
            facing = np.where(np.einsum("ij,ij->i", normals, cloud.positions - pose.translation) > 0, -1.0, 1.0)
            feats = np.zeros((len(sid), _CHANNELS))
            feats[:, _RGB] = cloud.colors[sid]
            feats[:, _W] = 1.0
            feats[:, _Z] = pairs["z"]
            feats[:, _Z2] = pairs["z"] ** 2
            feats[:, _N] = normals[sid] * facing[sid, None]

            alpha = np.zeros((n_pix, k_max))
            alpha[pairs["pixel"], pairs["rank"]] = alpha_pairs
            trans = np.ones((n_pix, k_max))
            trans[:, 1:] = np.cumprod(1.0 - alpha[:, :-1], axis=1)
            included = trans >= TRANSMITTANCE_EPS
            weight = alpha * trans * included
            pair_w = weight[pairs["pixel"], pairs["rank"]]
            np.add.at(accum, pairs["pixel"], pair_w[:, None] * feats)
            last = np.where(included, trans * (1.0 - alpha), 1.0)
            transmittance = np.min(np.where(included, last, np.inf), axis=1)
            transmittance = np.where(np.isfinite(transmittance), transmittance, 1.0)
            context.update({"pairs": pairs, "feats": feats, "alpha": alpha, "trans": trans,
                            "included": included, "facing": facing, "k_max": k_max})

    a_tot = accum[:, _W]
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = np.where(a_tot > 0, accum[:, _Z] / a_tot, np.inf)
    distortion = 2.0 * (a_tot * accum[:, _Z2] - accum[:, _Z] ** 2)
    rgb = accum[:, _RGB] + (1.0 - a_tot)[:, None] * bg
    context["accum"] = accum
    return RenderOutput(
        rgb=rgb.reshape(h, w, 3),
        depth=depth.reshape(h, w),
        alpha=a_tot.reshape(h, w),
        normal=accum[:, _N].reshape(h, w, 3),
        distortion=distortion.reshape(h, w),
        transmittance=transmittance.reshape(h, w),
        _context=context,
    )


@dataclass
class RenderGradients:
    """Upstream gradients of a scalar loss with respect to RenderOutput images."""
    rgb: Optional[np.ndarray] = None
    depth: Optional[np.ndarray] = None
    alpha: Optional[np.ndarray] = None
    normal: Optional[np.ndarray] = None
    distortion: Optional[np.ndarray] = None

    def __iadd__(self, other: "RenderGradients") -> "RenderGradients":
        for name in ("rgb", "depth", "alpha", "normal", "distortion"):
            mine, theirs = getattr(self, name), getattr(other, name)
            if theirs is None:
                continue
            setattr(self, name, theirs.copy() if mine is None else mine + theirs)
        return self

    def scaled(self, factor) -> "RenderGradients":
        out = RenderGradients()
        for name in ("rgb", "depth", "alpha", "normal", "distortion"):
            value = getattr(self, name)
            if value is not None:
                f = factor if np.ndim(factor) == 0 or value.ndim == np.ndim(factor) else factor[..., None]
                setattr(out, name, value * f)
        return out


def rasterize_backward(primitives: Union[SurfelCloud, Sequence[SurfelPrimitive]], intrinsics: CameraIntrinsics,
                       pose: Pose, upstream: RenderGradients,
                       render: Optional[RenderOutput] = None) -> SurfelGradients:
    cloud = as_cloud(primitives)
    h, w = intrinsics.height, intrinsics.width
    n_pix = h * w
    expected = {"rgb": (h, w, 3), "depth": (h, w), "alpha": (h, w), "normal": (h, w, 3), "distortion": (h, w)}
    for name, shape in expected.items():
        value = getattr(upstream, name)
        if value is not None and value.shape != shape:
            raise DomainError(f"Upstream gradient '{name}' has shape {value.shape}, expected {shape}")
    if render is None or render._context is None or render._context["cloud"] is not cloud:
        render = rasterize(cloud, intrinsics, pose)
    ctx = render._context
    grads = SurfelGradients.zeros(len(cloud))
    if ctx["pairs"] is None:
        return grads

    accum = ctx["accum"]
    a_tot, s1, s2 = accum[:, _W], accum[:, _Z], accum[:, _Z2]
    g_acc = np.zeros((n_pix, _CHANNELS))
    if upstream.rgb is not None:
        g_rgb = upstream.rgb.reshape(n_pix, 3)
        g_acc[:, _RGB] = g_rgb
        g_acc[:, _W] -= g_rgb @ ctx["background"]
    if upstream.alpha is not None:
        g_acc[:, _W] += upstream.alpha.reshape(n_pix)
    if upstream.depth is not None:
        g_depth = upstream.depth.reshape(n_pix)
        covered = (a_tot > 0) & np.isfinite(g_depth)
        safe_a = np.where(covered, a_tot, 1.0)
        g_depth = np.where(covered, g_depth, 0.0)
        g_acc[:, _Z] += g_depth / safe_a
        g_acc[:, _W] -= g_depth * s1 / safe_a ** 2
    if upstream.distortion is not None:
        g_dist = upstream.distortion.reshape(n_pix)
        g_acc[:, _W] += 2.0 * g_dist * s2
        g_acc[:, _Z2] += 2.0 * g_dist * a_tot
        g_acc[:, _Z] -= 4.0 * g_dist * s1
    if upstream.normal is not None:
        g_acc[:, _N] = upstream.normal.reshape(n_pix, 3)

    pairs, feats = ctx["pairs"], ctx["feats"]
    alpha, trans, included, k_max = ctx["alpha"], ctx["trans"], ctx["included"], ctx["k_max"]
    pix, rank, sid = pairs["pixel"], pairs["rank"], pairs["sid"]

    # g_acc . f for every padded slot
    gf = np.zeros((n_pix, k_max))
    gf[pix, rank] = np.einsum("ij,ij->i", g_acc[pix], feats)
    # g_acc . B_k with B_k the composite of everything behind slot k
    g_back = np.zeros((n_pix, k_max))
    for k in range(k_max - 2, -1, -1):
        nxt = included[:, k + 1]
        g_back[:, k] = np.where(nxt, alpha[:, k + 1] * gf[:, k + 1] + (1.0 - alpha[:, k + 1]) * g_back[:, k + 1], 0.0)
    g_alpha = np.where(included, trans * (gf - g_back), 0.0)[pix, rank]
    weight = (alpha * trans * included)[pix, rank]
    g_feat = weight[:, None] * g_acc[pix]

    kernel = pairs["kernel"]
    g_opacity = g_alpha * kernel
    g_kernel = g_alpha * cloud.opacities[sid]
    g_z = g_feat[:, _Z] + 2.0 * pairs["z"] * g_feat[:, _Z2]

    n = len(cloud)
    pc, a, b = ctx["pc"], ctx["a"], ctx["b"]
    g_pc = np.zeros((len(sid), 3))
    g_a = np.zeros((len(sid), 3))
    g_b = np.zeros((len(sid), 3))
    g_scale = np.zeros((len(sid), 2))

    use_surf = pairs["use_surf"]
    wv = pairs["w"]
    su, sv = cloud.scales[sid, 0], cloud.scales[sid, 1]
    g_r2 = np.where(use_surf, g_kernel * pairs["dg_surf"], 0.0)
    g_w = np.stack([g_r2 * 2.0 * wv[:, 0] / su ** 2,
                    g_r2 * 2.0 * wv[:, 1] / sv ** 2,
                    np.where(use_surf, g_z, 0.0)], axis=-1)
    g_scale[:, 0] = -2.0 * g_r2 * wv[:, 0] ** 2 / su ** 3
    g_scale[:, 1] = -2.0 * g_r2 * wv[:, 1] ** 2 / sv ** 3
    lam = np.linalg.solve(np.swapaxes(pairs["mats"], 1, 2), g_w[..., None])[..., 0]
    lam = np.where(use_surf[:, None], lam, 0.0)
    g_pc -= lam
    g_a -= lam * wv[:, 0:1]
    g_b -= lam * wv[:, 1:2]

    # low-pass branch: kernel of the projected center, depth = center depth
    lp = ~use_surf
    fx, fy = intrinsics.focal_x, intrinsics.focal_y
    P = pc[sid]
    g_r2lp = np.where(lp, g_kernel * pairs["dg_lp"], 0.0) / LOWPASS_VARIANCE
    g_mux = -2.0 * g_r2lp * pairs["dx"]
    g_muy = -2.0 * g_r2lp * pairs["dy"]
    g_pc[:, 0] += g_mux * fx / P[:, 2]
    g_pc[:, 1] += g_muy * fy / P[:, 2]
    g_pc[:, 2] += -g_mux * fx * P[:, 0] / P[:, 2] ** 2 - g_muy * fy * P[:, 1] / P[:, 2] ** 2
    g_pc[:, 2] += np.where(lp, g_z, 0.0)

    def reduce(values):
        values = values.reshape(len(sid), -1)
        out = np.stack([np.bincount(sid, weights=values[:, c], minlength=n) for c in range(values.shape[1])], axis=1)
        return out

    g_pc_s = reduce(g_pc)
    g_a_s = reduce(g_a)
    g_b_s = reduce(g_b)
    g_n_s = reduce(g_feat[:, _N]) * ctx["facing"][:, None]

    rot = pose.rotation
    tu, tv = cloud.tangents_u, cloud.tangents_v
    g_tu = g_a_s @ rot.T + np.cross(tv, g_n_s)
    g_tv = g_b_s @ rot.T + np.cross(g_n_s, tu)
    grads.positions = g_pc_s @ rot.T
    grads.rotations = np.cross(tu, g_tu) + np.cross(tv, g_tv)
    grads.scales = reduce(g_scale)
    grads.opacities = reduce(g_opacity)[:, 0]
    grads.colors = reduce(g_feat[:, _RGB])
    return grads


# ---------------------------------------------------------------------------
# Initialisation helpers
# ---------------------------------------------------------------------------

def frames_from_normals(normals: np.ndarray) -> tuple:
    """Orthonormal tangent pairs (t_u, t_v) with t_u x t_v = normal."""
    n = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    n = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
    helper = np.where(np.abs(n[:, 2:3]) < 0.9, np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0]))
    tu = np.cross(helper, n)
    tu /= np.linalg.norm(tu, axis=1, keepdims=True)
    tv = np.cross(n, tu)
    return tu, tv


def surfels_from_point_cloud(points: np.ndarray, colors: np.ndarray, normals: Optional[np.ndarray] = None,
                             opacity: float = 0.5, seed: int = 0) -> SurfelCloud:
    """
    One surfel per point. Scale = mean distance to the 3 nearest neighbours,
    frame from the point normal (random normal when none is given).
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        return SurfelCloud.empty()
    if normals is None or len(normals) == 0:
        rng = np.random.default_rng(seed)
        normals = rng.normal(size=points.shape)
    normals = np.array(normals, dtype=np.float64).reshape(-1, 3)
    bad = np.linalg.norm(normals, axis=1) < 1e-9
    normals[bad] = np.array([0.0, 0.0, 1.0])
    k = min(4, len(points))
    if k > 1:
        dist, _ = cKDTree(points).query(points, k=k)
        scale = np.maximum(dist[:, 1:].mean(axis=1), MIN_SCALE)
    else:
        scale = np.full(len(points), 0.05)
    tu, tv = frames_from_normals(normals)
    return SurfelCloud(points, tu, tv, np.stack([scale, scale], axis=1),
                       np.full(len(points), opacity), np.clip(colors, 0.0, 1.0))
