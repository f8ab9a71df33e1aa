"""
Cameras, rigid poses, rays, triangle meshes and exact ray-surface intersection.

Conventions (used by every other module):
- right-handed frames; a camera looks down +z of its own frame, x to the right,
  image y grows downward;
- Pose stores world-from-camera: X_world = rotation @ X_cam + translation, so
  `translation` is the camera center;
- pixel (x, y) refers to continuous image coordinates with pixel centers on
  integers, row index = y, column index = x.
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Tuple

import numpy as np

from sparse_view_recon.exceptions import DomainError

logger = logging.getLogger(__name__)

POSE_TOLERANCE = 1e-9
UNIT_TOLERANCE = 1e-9
# Degenerate faces with area below this are dropped at construction.
MIN_FACE_AREA = 1e-14


def _frozen_array(values, shape_tail: Tuple[int, ...], dtype=np.float64) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    if shape_tail and arr.shape[-len(shape_tail):] != shape_tail:
        raise DomainError(f"Expected array with trailing shape {shape_tail}, got {arr.shape}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class CameraIntrinsics:
    focal_x: float
    focal_y: float
    principal_x: float
    principal_y: float
    width: int
    height: int

    def __post_init__(self):
        if self.focal_x <= 0 or self.focal_y <= 0:
            raise DomainError("Focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise DomainError("Image width and height must be >= 1")
        if not (0 <= self.principal_x <= self.width and 0 <= self.principal_y <= self.height):
            raise DomainError("Principal point must lie inside the image bounds")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_x_deg: float) -> "CameraIntrinsics":
        focal = 0.5 * width / np.tan(0.5 * np.radians(fov_x_deg))
        return cls(focal, focal, 0.5 * width, 0.5 * height, width, height)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.height, self.width

    def to_dict(self) -> dict:
        return {
            "focal_x": self.focal_x, "focal_y": self.focal_y,
            "principal_x": self.principal_x, "principal_y": self.principal_y,
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CameraIntrinsics":
        return cls(float(data["focal_x"]), float(data["focal_y"]),
                   float(data["principal_x"]), float(data["principal_y"]),
                   int(data["width"]), int(data["height"]))


@dataclass(frozen=True, eq=False)
class Pose:
    # World-from-camera rigid transform.
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = _frozen_array(self.rotation, (3, 3))
        translation = _frozen_array(self.translation, (3,))
        if not np.allclose(rotation.T @ rotation, np.eye(3), atol=POSE_TOLERANCE):
            raise DomainError("Pose rotation must be orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > POSE_TOLERANCE:
            raise DomainError("Pose rotation must have determinant +1")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @property
    def center(self) -> np.ndarray:
        return self.translation

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[:, 2]

    def compose(self, other: "Pose") -> "Pose":
        # (self o other)(x) = self(other(x))
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @classmethod
    def from_matrix(cls, matrix) -> "Pose":
        m = np.asarray(matrix, dtype=np.float64).reshape(4, 4)
        # Re-orthonormalize rotations read back from text at limited precision
        u, _, vt = np.linalg.svd(m[:3, :3])
        return cls(u @ vt, m[:3, 3])

    def is_close(self, other: "Pose", tol: float = 1e-6) -> bool:
        return (np.abs(self.rotation - other.rotation).max() <= tol
                and np.abs(self.translation - other.translation).max() <= tol)


@dataclass(frozen=True, eq=False)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        origin = _frozen_array(self.origin, (3,))
        direction = _frozen_array(self.direction, (3,))
        if abs(np.linalg.norm(direction) - 1.0) > UNIT_TOLERANCE:
            raise DomainError("Ray direction must be unit length")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", direction)

    def at(self, distance: float) -> np.ndarray:
        return self.origin + distance * self.direction


@dataclass(frozen=True)
class Hit:
    distance: float
    point: np.ndarray
    normal: np.ndarray
    face_index: int


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    vertex_normals: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if faces.size and (faces.min() < 0 or faces.max() >= len(vertices)):
            raise DomainError("Mesh face index out of range")
        if faces.size:
            tri = vertices[faces]
            area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
            keep = area > MIN_FACE_AREA
            if not keep.all():
                logger.debug("Dropping %d degenerate faces", int((~keep).sum()))
            faces = faces[keep]
        normals = None
        if self.vertex_normals is not None:
            normals = _frozen_array(self.vertex_normals, (3,)).reshape(-1, 3)
            if len(normals) != len(vertices):
                raise DomainError("vertex_normals must match the vertex count")
        vertices.flags.writeable = False
        faces.flags.writeable = False
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "faces", faces)
        object.__setattr__(self, "vertex_normals", normals)

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    @cached_property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    @cached_property
    def face_normals(self) -> np.ndarray:
        tri = self.triangles
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    @cached_property
    def face_areas(self) -> np.ndarray:
        tri = self.triangles
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    @cached_property
    def bvh(self):
        from sparse_view_recon.bvh import BVH
        return BVH(self.triangles)

    def with_vertex_normals(self) -> "TriangleMesh":
        # Area-weighted average of incident face normals
        acc = np.zeros_like(self.vertices)
        weighted = self.face_normals * self.face_areas[:, None]
        for corner in range(3):
            np.add.at(acc, self.faces[:, corner], weighted)
        norm = np.linalg.norm(acc, axis=1, keepdims=True)
        acc = np.where(norm > 0, acc / np.maximum(norm, 1e-300), 0.0)
        return TriangleMesh(self.vertices, self.faces, acc)

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        if len(self.vertices) == 0:
            raise DomainError("Empty mesh has no bounds")
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    @staticmethod
    def concatenate(meshes) -> "TriangleMesh":
        vertices, faces, offset = [], [], 0
        for mesh in meshes:
            vertices.append(mesh.vertices)
            faces.append(mesh.faces + offset)
            offset += len(mesh.vertices)
        if not vertices:
            return TriangleMesh.empty()
        return TriangleMesh(np.concatenate(vertices), np.concatenate(faces))


def _check_pixel(camera: CameraIntrinsics, pixel) -> np.ndarray:
    px = np.asarray(pixel, dtype=np.float64)
    if px.shape != (2,):
        raise DomainError("Pixel must be a 2-vector (x, y)")
    x, y = px
    if not (-0.5 <= x <= camera.width - 0.5 and -0.5 <= y <= camera.height - 0.5):
        raise DomainError(f"Pixel {tuple(px)} outside image bounds {camera.width}x{camera.height}")
    return px


def camera_directions(camera: CameraIntrinsics, xs, ys) -> np.ndarray:
    """Camera-frame ray directions with z = 1 (not normalized)."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    return np.stack([(xs - camera.principal_x) / camera.focal_x,
                     (ys - camera.principal_y) / camera.focal_y,
                     np.ones_like(xs)], axis=-1)


def pixel_grid(camera: CameraIntrinsics) -> Tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:camera.height, 0:camera.width].astype(np.float64)
    return xs, ys


def ray_for_pixel(camera: CameraIntrinsics, pose: Pose, pixel) -> Ray:
    x, y = _check_pixel(camera, pixel)
    d = camera_directions(camera, x, y)
    d = pose.rotation @ (d / np.linalg.norm(d))
    return Ray(pose.translation, d / np.linalg.norm(d))


def camera_rays(camera: CameraIntrinsics, pose: Pose) -> Tuple[np.ndarray, np.ndarray]:
    """World-space origins and unit directions for every pixel, shaped (H, W, 3)."""
    xs, ys = pixel_grid(camera)
    d = camera_directions(camera, xs, ys) @ pose.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.translation, d.shape).copy()
    return origins, d


def project_points(points: np.ndarray, camera: CameraIntrinsics, pose: Pose):
    """Project world points; returns pixel x, pixel y and camera-frame depth z."""
    pc = pose.world_to_camera(points)
    z = pc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        x = camera.focal_x * pc[..., 0] / z + camera.principal_x
        y = camera.focal_y * pc[..., 1] / z + camera.principal_y
    return x, y, z


def backproject_depth(depth: np.ndarray, camera: CameraIntrinsics, pose: Pose) -> np.ndarray:
    """World points for a z-depth map; non-finite depth yields NaN points."""
    xs, ys = pixel_grid(camera)
    pc = camera_directions(camera, xs, ys) * depth[..., None]
    return pose.camera_to_world(pc)


def depth_normals(depth: np.ndarray, camera: CameraIntrinsics, pose: Pose) -> Tuple[np.ndarray, np.ndarray]:
    """
    Normals from central differences of the backprojected depth map, oriented toward the camera.
    Border pixels and pixels with a non-finite neighbour are invalid (zero normal).
    """
    points = backproject_depth(np.where(np.isfinite(depth), depth, np.nan), camera, pose)
    normals = np.zeros_like(points)
    valid = np.zeros(depth.shape, dtype=bool)
    if depth.shape[0] < 3 or depth.shape[1] < 3:
        return normals, valid
    dx = points[1:-1, 2:] - points[1:-1, :-2]
    dy = points[2:, 1:-1] - points[:-2, 1:-1]
    n = np.cross(dx, dy)
    norm = np.linalg.norm(n, axis=-1)
    ok = np.isfinite(norm) & (norm > 1e-12)
    n = np.where(ok[..., None], n / np.where(ok, norm, 1.0)[..., None], 0.0)
    view = points[1:-1, 1:-1] - pose.translation
    flip = np.sum(n * view, axis=-1) > 0
    n[flip] *= -1.0
    normals[1:-1, 1:-1] = n
    valid[1:-1, 1:-1] = ok
    return normals, valid


def intersect_rays_triangles(origins: np.ndarray, directions: np.ndarray, triangles: np.ndarray,
                             face_ids: Optional[np.ndarray] = None, eps: float = 1e-12):
    """
    Brute-force Moller-Trumbore over every (ray, triangle) pair.
    Returns (distance, face) with inf / -1 for misses; ties go to the lowest face index.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    n_rays = len(origins)
    best_t = np.full(n_rays, np.inf)
    best_f = np.full(n_rays, -1, dtype=np.int64)
    if len(triangles) == 0 or n_rays == 0:
        return best_t, best_f
    if face_ids is None:
        face_ids = np.arange(len(triangles))
    chunk = max(1, 2_000_000 // max(len(triangles), 1))
    for start in range(0, n_rays, chunk):
        sl = slice(start, start + chunk)
        t, hit = _moller_trumbore(origins[sl, None, :], directions[sl, None, :],
                                  triangles[None, :, 0], triangles[None, :, 1], triangles[None, :, 2], eps)
        t = np.where(hit, t, np.inf)
        # argmin returns the first minimum, i.e. the lowest face index among ties
        order = np.argsort(face_ids, kind="stable")
        t_sorted = t[:, order]
        idx = np.argmin(t_sorted, axis=1)
        best_t[sl] = t_sorted[np.arange(len(idx)), idx]
        best_f[sl] = np.where(np.isfinite(best_t[sl]), face_ids[order][idx], -1)
    return best_t, best_f


def _moller_trumbore(o, d, v0, v1, v2, eps):
    e1 = v1 - v0
    e2 = v2 - v0
    p = np.cross(d, e2)
    det = np.sum(e1 * p, axis=-1)
    ok = np.abs(det) > 1e-15
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = o - v0
    u = np.sum(s * p, axis=-1) * inv
    q = np.cross(s, e1)
    v = np.sum(d * q, axis=-1) * inv
    t = np.sum(e2 * q, axis=-1) * inv
    hit = ok & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > eps)
    return t, hit


def intersect_rays_mesh(origins: np.ndarray, directions: np.ndarray, mesh: TriangleMesh):
    """Batched nearest positive hit; returns (distance, face) arrays."""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    if mesh.is_empty:
        return np.full(len(origins), np.inf), np.full(len(origins), -1, dtype=np.int64)
    return mesh.bvh.intersect(origins, directions)


def intersect_ray_mesh(ray: Ray, mesh: TriangleMesh) -> Optional[Hit]:
    if mesh.is_empty:
        raise DomainError("Cannot intersect an empty mesh")
    t, face = intersect_rays_mesh(ray.origin[None], ray.direction[None], mesh)
    if face[0] < 0:
        return None
    normal = mesh.face_normals[face[0]]
    if np.dot(normal, ray.direction) > 0:
        normal = -normal
    return Hit(float(t[0]), ray.at(float(t[0])), normal.copy(), int(face[0]))


def look_at(eye, target, up) -> Pose:
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(forward)
    if norm == 0:
        raise DomainError("Camera eye and target coincide")
    forward /= norm
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    rnorm = np.linalg.norm(right)
    if rnorm < 1e-9:
        raise DomainError("Up vector is parallel to the view direction")
    right /= rnorm
    down = np.cross(forward, right)
    return Pose(np.stack([right, down, forward], axis=1), eye)


def reference_direction(up) -> np.ndarray:
    """Horizontal direction used as azimuth zero for a given up vector."""
    up = np.asarray(up, dtype=np.float64)
    for axis in (np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])):
        ref = axis - np.dot(axis, up) * up
        if np.linalg.norm(ref) > 1e-6:
            return ref / np.linalg.norm(ref)
    raise DomainError("Up vector must be non-zero")


def orbit_pose(center, radius: float, azimuth: float, elevation: float, up=(0.0, 0.0, 1.0)) -> Pose:
    if radius <= 0:
        raise DomainError("Orbit radius must be positive")
    if abs(elevation) >= np.pi / 2:
        raise DomainError("Orbit elevation must satisfy |elevation| < pi/2")
    up = np.asarray(up, dtype=np.float64)
    up_norm = np.linalg.norm(up)
    if up_norm == 0:
        raise DomainError("Up vector must be non-zero")
    up = up / up_norm
    e1 = reference_direction(up)
    e2 = np.cross(up, e1)
    direction = (np.cos(elevation) * (np.cos(azimuth) * e1 + np.sin(azimuth) * e2)
                 + np.sin(elevation) * up)
    center = np.asarray(center, dtype=np.float64)
    return look_at(center + radius * direction, center, up)


def rotation_angle(a: np.ndarray, b: np.ndarray) -> float:
    """Geodesic angle between two rotation matrices, radians."""
    cos = 0.5 * (np.trace(a.T @ b) - 1.0)
    return float(np.arccos(np.clip(cos, -1.0, 1.0)))
