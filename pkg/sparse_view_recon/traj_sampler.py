"""
Visibility-based camera trajectory sampling.

For each input view the principal ray is cast into the current surface; the hit
point becomes an orbit center and the camera is swept along azimuth/elevation
arcs around it. A candidate is kept only when every screening keyframe sees a
moderate amount of unseen surface and nothing sits closer than the near-plane
threshold:

    S_low < area(M_i) < S_high   and   min D_i > d0
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import ndimage
from scipy.spatial.transform import Rotation

from sparse_view_recon.exceptions import DomainError, EvaluationError
from sparse_view_recon.geometry import (
    CameraIntrinsics, Pose, TriangleMesh, camera_rays, intersect_ray_mesh, intersect_rays_mesh,
    project_points, ray_for_pixel, rotation_angle,
)

logger = logging.getLogger(__name__)

REASON_EXCESSIVE = "excessive unseen region coverage"
REASON_INSUFFICIENT = "insufficient unseen region coverage"
REASON_NEAR_PLANE = "near-plane occlusion"

REJECTION_COLUMNS = ["candidate_id", "keyframe", "failed_inequality", "measured_value"]


@dataclass(frozen=True)
class SamplerConfig:
    s_low: float = 0.05
    s_high: float = 0.45
    # absolute near-plane threshold; when None it is d0_fraction * scene diagonal
    d0: Optional[float] = None
    d0_fraction: float = 0.2
    azimuth_spans_deg: Tuple[float, ...] = (30.0, 60.0)
    elevation_offsets_deg: Tuple[float, ...] = (0.0, 20.0)
    frames: int = 16
    keyframes: int = 4
    extension: float = 0.25
    max_trajectories: int = 3
    point_hit_tolerance: float = 0.05
    up: Tuple[float, float, float] = (0.0, 0.0, 1.0)

    def __post_init__(self):
        if not 0.0 <= self.s_low < self.s_high <= 1.0:
            raise DomainError(f"Need 0 <= S_low < S_high <= 1, got {self.s_low}, {self.s_high}")
        if self.d0 is not None and self.d0 <= 0:
            raise DomainError("d0 must be positive")
        if self.d0_fraction <= 0:
            raise DomainError("d0_fraction must be positive")
        if not self.frames >= self.keyframes >= 1:
            raise DomainError("Need frames >= keyframes >= 1")
        if self.extension < 0:
            raise DomainError("Extension fraction must be >= 0")

    @classmethod
    def from_dict(cls, data: dict) -> "SamplerConfig":
        kwargs = dict(data)
        for key in ("azimuth_spans_deg", "elevation_offsets_deg", "up"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {
            "s_low": self.s_low, "s_high": self.s_high, "d0": self.d0, "d0_fraction": self.d0_fraction,
            "azimuth_spans_deg": list(self.azimuth_spans_deg),
            "elevation_offsets_deg": list(self.elevation_offsets_deg),
            "frames": self.frames, "keyframes": self.keyframes, "extension": self.extension,
            "max_trajectories": self.max_trajectories, "point_hit_tolerance": self.point_hit_tolerance,
            "up": list(self.up),
        }

    def near_plane(self, scene_diagonal: Optional[float] = None) -> float:
        if self.d0 is not None:
            return self.d0
        if scene_diagonal is None:
            raise DomainError("d0 is unset and no scene diagonal was given")
        return self.d0_fraction * scene_diagonal


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: Optional[str] = None
    keyframe: Optional[int] = None
    value: Optional[float] = None


@dataclass(eq=False)
class TrajectoryCandidate:
    candidate_id: int
    source_index: int
    center: np.ndarray
    radius: float
    azimuth_span: float
    elevation_offset: float
    poses: List[Pose]
    intrinsics: CameraIntrinsics
    keyframe_indices: List[int] = field(default_factory=list)
    depths: List[np.ndarray] = field(default_factory=list)
    masks: List[np.ndarray] = field(default_factory=list)
    verdict: Optional[Verdict] = None

    @property
    def accepted(self) -> bool:
        return self.verdict is not None and self.verdict.accepted


class VisibilityRenderer(Protocol):
    def render_visibility(self, intrinsics: CameraIntrinsics, pose: Pose) -> Tuple[np.ndarray, np.ndarray]:
        """Depth map (inf = nothing) and unseen mask in [0, 1] at a pose."""


@dataclass(eq=False)
class MeshVisibilityRenderer:
    mesh: TriangleMesh

    def render_visibility(self, intrinsics: CameraIntrinsics, pose: Pose):
        h, w = intrinsics.height, intrinsics.width
        if self.mesh.is_empty:
            return np.full((h, w), np.inf), np.ones((h, w))
        origins, dirs = camera_rays(intrinsics, pose)
        t, face = intersect_rays_mesh(origins.reshape(-1, 3), dirs.reshape(-1, 3), self.mesh)
        depth = np.where(face >= 0, t * (dirs.reshape(-1, 3) @ pose.forward), np.inf).reshape(h, w)
        return depth, (face < 0).astype(np.float64).reshape(h, w)


@dataclass(eq=False)
class PointCloudVisibilityRenderer:
    """z-buffered point splats; pixels no point lands on are unseen."""
    points: np.ndarray
    splat_radius: int = 1

    def render_visibility(self, intrinsics: CameraIntrinsics, pose: Pose):
        h, w = intrinsics.height, intrinsics.width
        depth = np.full(h * w, np.inf)
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(pts):
            x, y, z = project_points(pts, intrinsics, pose)
            front = z > 0
            xi, yi, z = np.rint(x[front]).astype(np.int64), np.rint(y[front]).astype(np.int64), z[front]
            r = self.splat_radius
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    px, py = xi + dx, yi + dy
                    inside = (px >= 0) & (px < w) & (py >= 0) & (py < h)
                    np.minimum.at(depth, py[inside] * w + px[inside], z[inside])
        depth = depth.reshape(h, w)
        return depth, (~np.isfinite(depth)).astype(np.float64)


# ---------------------------------------------------------------------------
# Orbit construction
# ---------------------------------------------------------------------------

def _principal_hit(surface: Union[TriangleMesh, np.ndarray], view_pose: Pose, intrinsics: CameraIntrinsics,
                   tolerance: float) -> Optional[Tuple[np.ndarray, float]]:
    ray = ray_for_pixel(intrinsics, view_pose, (intrinsics.principal_x, intrinsics.principal_y))
    if isinstance(surface, TriangleMesh):
        hit = intersect_ray_mesh(ray, surface)
        return None if hit is None else (hit.point, hit.distance)
    pts = np.asarray(surface, dtype=np.float64).reshape(-1, 3)
    rel = pts - ray.origin
    along = rel @ ray.direction
    perp = np.linalg.norm(rel - along[:, None] * ray.direction, axis=1)
    near = np.flatnonzero((along > 0) & (perp < tolerance))
    if len(near) == 0:
        return None
    distance = float(along[near].min())
    return ray.at(distance), distance


def orbit_arc(source: Pose, center: np.ndarray, azimuth: float, elevation: float, frames: int,
              up=(0.0, 0.0, 1.0)) -> List[Pose]:
    """Rotate the source camera about `center`: frame k applies the fraction k/(frames-1) of both angles."""
    up = np.asarray(up, dtype=np.float64)
    up = up / np.linalg.norm(up)
    right = source.rotation[:, 0]
    offset = source.translation - center
    poses = []
    for k in range(frames):
        s = k / (frames - 1) if frames > 1 else 0.0
        # negative pitch about the camera's right axis lifts the camera
        rot = (Rotation.from_rotvec(s * azimuth * up) * Rotation.from_rotvec(-s * elevation * right)).as_matrix()
        poses.append(source if k == 0 else Pose(rot @ source.rotation, center + rot @ offset))
    return poses


def screening_keyframes(frames: int, keyframes: int) -> List[int]:
    """Evenly spaced frames ending at the last one; the anchor frame 0 is left out when possible."""
    if frames == 1:
        return [0]
    picks = np.rint(np.linspace(frames - 1, 0, keyframes, endpoint=False)).astype(int)
    return sorted(set(int(p) for p in picks))


def propose_orbits(views: Sequence, surface: Union[TriangleMesh, np.ndarray],
                   config: SamplerConfig) -> List[TrajectoryCandidate]:
    """`views` need `.pose` and `.intrinsics`; `surface` is a mesh or an (N, 3) point set."""
    if len(views) == 0:
        raise DomainError("propose_orbits needs at least one input view")
    if isinstance(surface, TriangleMesh):
        if surface.is_empty:
            raise DomainError("propose_orbits needs a non-empty surface")
    elif len(np.asarray(surface).reshape(-1, 3)) == 0:
        raise DomainError("propose_orbits needs a non-empty surface")

    candidates = []
    keyframes = screening_keyframes(config.frames, config.keyframes)
    for index, view in enumerate(views):
        hit = _principal_hit(surface, view.pose, view.intrinsics, config.point_hit_tolerance)
        if hit is None:
            logger.warning("Principal ray of view %d misses the surface; skipping its orbits", index)
            continue
        center, radius = hit
        for span in config.azimuth_spans_deg:
            for sign in (1.0, -1.0):
                for elevation in config.elevation_offsets_deg:
                    azimuth = np.radians(sign * span)
                    poses = orbit_arc(view.pose, center, azimuth, np.radians(elevation), config.frames, config.up)
                    candidates.append(TrajectoryCandidate(
                        candidate_id=len(candidates), source_index=index, center=np.array(center),
                        radius=float(radius), azimuth_span=float(azimuth),
                        elevation_offset=float(np.radians(elevation)), poses=poses,
                        intrinsics=view.intrinsics, keyframe_indices=list(keyframes),
                    ))
    return candidates


# ---------------------------------------------------------------------------
# Screening
# ---------------------------------------------------------------------------

def check_keyframe(depth: np.ndarray, mask: np.ndarray, config: SamplerConfig, d0: float) -> Verdict:
    area = float(np.mean(mask))
    if area >= config.s_high:
        return Verdict(False, REASON_EXCESSIVE, value=area)
    if area <= config.s_low:
        return Verdict(False, REASON_INSUFFICIENT, value=area)
    finite = depth[np.isfinite(depth)]
    min_depth = float(finite.min()) if finite.size else np.inf
    if min_depth <= d0:
        return Verdict(False, REASON_NEAR_PLANE, value=min_depth)
    return Verdict(True)


def evaluate_candidate(candidate: TrajectoryCandidate, renderer: VisibilityRenderer, config: SamplerConfig,
                       d0: Optional[float] = None) -> Verdict:
    """Screens every keyframe; stores D_i and M_i on the candidate so the verdict can be rechecked."""
    d0 = config.near_plane() if d0 is None else d0
    depths, masks = [], []
    verdict = Verdict(True)
    for key in candidate.keyframe_indices:
        try:
            depth, mask = renderer.render_visibility(candidate.intrinsics, candidate.poses[key])
        except Exception as exc:
            raise EvaluationError(f"Visibility rendering failed for candidate {candidate.candidate_id}, "
                                  f"keyframe {key}: {exc}") from exc
        depths.append(depth)
        masks.append(np.clip(mask, 0.0, 1.0))
        if verdict.accepted:
            check = check_keyframe(depth, masks[-1], config, d0)
            if not check.accepted:
                verdict = Verdict(False, check.reason, key, check.value)
    candidate.depths, candidate.masks, candidate.verdict = depths, masks, verdict
    return verdict


def extend_trajectory(poses: Sequence[Pose], fraction: float = 0.25,
                      center: Optional[np.ndarray] = None) -> Tuple[List[Pose], int]:
    """Continue the orbit arc by ceil(fraction * N) poses at the last angular step."""
    if len(poses) < 2:
        raise DomainError("extend_trajectory needs at least 2 poses")
    n = len(poses)
    extra = math.ceil(fraction * n - 1e-9) if fraction > 0 else 0
    out = list(poses)
    if extra == 0:
        return out, n
    step = poses[-1].rotation @ poses[-2].rotation.T
    if center is None:
        center = _axes_intersection(poses)
    for _ in range(extra):
        last = out[-1]
        if center is None:
            out.append(Pose(step @ last.rotation, last.translation.copy()))
        else:
            out.append(Pose(step @ last.rotation, center + step @ (last.translation - center)))
    return out, n


def _axes_intersection(poses: Sequence[Pose]) -> Optional[np.ndarray]:
    """Least-squares point closest to every optical axis; None when the axes are parallel."""
    a = np.zeros((3, 3))
    b = np.zeros(3)
    for pose in poses:
        d = pose.forward
        proj = np.eye(3) - np.outer(d, d)
        a += proj
        b += proj @ pose.translation
    if np.linalg.matrix_rank(a, tol=1e-9) < 3:
        return None
    return np.linalg.solve(a, b)


def _gray(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    return frame.mean(axis=-1) if frame.ndim == 3 else frame


def sharpness(frame: np.ndarray) -> float:
    return float(np.var(ndimage.laplace(_gray(frame))))


def pose_distance(a: Pose, b: Pose) -> float:
    return rotation_angle(a.rotation, b.rotation) + float(np.linalg.norm(a.translation - b.translation))


def select_keyframes(frames: Sequence[np.ndarray], poses: Sequence[Pose], k: int) -> List[int]:
    """Sharpest frame first, then farthest-point picks among the sharper half; ties go to the lower index."""
    n = len(frames)
    if len(poses) != n:
        raise DomainError("Frame and pose counts differ")
    if k > n:
        raise DomainError(f"Cannot select {k} keyframes from {n} frames")
    if k <= 0:
        return []
    scores = np.array([sharpness(f) for f in frames])
    pool = np.flatnonzero(scores >= np.median(scores))
    if len(pool) < k:
        # widen with the next-sharpest frames; stable order keeps low indices first on ties
        order = np.argsort(-scores, kind="stable")
        pool = np.sort(order[:k])
    chosen = [int(pool[np.argmax(scores[pool])])]
    dist = np.array([[pose_distance(poses[i], poses[j]) for j in range(n)] for i in range(n)])
    while len(chosen) < k:
        remaining = np.array([i for i in pool if i not in chosen])
        gap = dist[np.ix_(remaining, chosen)].min(axis=1)
        chosen.append(int(remaining[np.argmax(gap)]))
    return chosen


@dataclass(eq=False)
class SamplingResult:
    candidates: List[TrajectoryCandidate]
    accepted: List[TrajectoryCandidate]
    rejection_log: pd.DataFrame


def rejection_frame(candidates: Sequence[TrajectoryCandidate]) -> pd.DataFrame:
    rows = [
        {"candidate_id": c.candidate_id, "keyframe": c.verdict.keyframe,
         "failed_inequality": c.verdict.reason, "measured_value": c.verdict.value}
        for c in candidates if c.verdict is not None and not c.verdict.accepted
    ]
    return pd.DataFrame(rows, columns=REJECTION_COLUMNS)


def sample_trajectories(views: Sequence, surface: Union[TriangleMesh, np.ndarray], renderer: VisibilityRenderer,
                        config: SamplerConfig, scene_diagonal: Optional[float] = None,
                        workers: int = 1) -> SamplingResult:
    """Propose, screen in parallel (results kept in proposal order), keep the first accepted ones."""
    d0 = config.near_plane(scene_diagonal)
    try:
        candidates = propose_orbits(views, surface, config)
    except DomainError as exc:
        logger.warning("No trajectories proposed: %s", exc)
        candidates = []
    if workers > 1 and len(candidates) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda c: evaluate_candidate(c, renderer, config, d0), candidates))
    else:
        for candidate in candidates:
            evaluate_candidate(candidate, renderer, config, d0)
    accepted = [c for c in candidates if c.accepted][:config.max_trajectories]
    log = rejection_frame(candidates)
    for _, row in log.iterrows():
        logger.info("Rejected trajectory %d at keyframe %s: %s (%.4f)", row["candidate_id"], row["keyframe"],
                    row["failed_inequality"], row["measured_value"])
    logger.info("Trajectory screening: %d proposed, %d accepted, %d kept",
                len(candidates), sum(c.accepted for c in candidates), len(accepted))
    return SamplingResult(candidates, accepted, log)
