"""
Procedural synthetic scenes and exact ground-truth rendering (rgb, depth, normals).

A scene is a closed box room (floor at z = 0, centered on the z axis) with boxes,
spheres and free-standing panels placed deterministically from the scene seed.
Boxes, panels and walls are rendered from their triangles; spheres are rendered
analytically, so sphere normals are exact.
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from sparse_view_recon.exceptions import DomainError, SceneGenerationError, UnsupportedOptionError
from sparse_view_recon.geometry import (
    CameraIntrinsics, Pose, TriangleMesh, camera_rays, intersect_rays_mesh, orbit_pose,
)

logger = logging.getLogger(__name__)

BACKGROUND_RGB = (0.7, 0.7, 0.7)
AMBIENT = 0.1
PLACEMENT_ATTEMPTS = 200
SPHERE_LAT, SPHERE_LON = 24, 48


# ---------------------------------------------------------------------------
# Textures (registry pattern: name -> albedo function over world points)
# ---------------------------------------------------------------------------

def _checker(points, material):
    cells = np.floor(points / material["scale"]).astype(np.int64).sum(axis=-1)
    parity = (cells % 2 == 0)[..., None]
    return np.where(parity, material["colors"][0], material["colors"][1])


def _gradient(points, material):
    axis = material.get("axis", 2)
    lo, hi = material.get("range", (0.0, 1.0))
    w = np.clip((points[..., axis] - lo) / max(hi - lo, 1e-12), 0.0, 1.0)[..., None]
    return (1.0 - w) * material["colors"][0] + w * material["colors"][1]


def _flat(points, material):
    return np.broadcast_to(material["colors"][0], points.shape).copy()


TEXTURES = {
    "checker": _checker,
    "gradient": _gradient,
    "flat": _flat,
}


# ---------------------------------------------------------------------------
# Scene spec types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    size: Tuple[float, ...]
    texture: Dict[str, Any]
    position: Optional[Tuple[float, float]] = None
    yaw: Optional[float] = None

    @classmethod
    def from_dict(cls, data: dict) -> "ObjectSpec":
        size = data["size"]
        size = tuple(float(s) for s in (size if isinstance(size, (list, tuple)) else [size]))
        pos = data.get("position")
        return cls(shape=data["shape"], size=size, texture=dict(data.get("texture", {"type": "flat"})),
                   position=None if pos is None else (float(pos[0]), float(pos[1])),
                   yaw=data.get("yaw"))

    def to_dict(self) -> dict:
        out = {"shape": self.shape, "size": list(self.size), "texture": self.texture}
        if self.position is not None:
            out["position"] = list(self.position)
        if self.yaw is not None:
            out["yaw"] = self.yaw
        return out

    def footprint_radius(self) -> float:
        if self.shape == "sphere":
            return self.size[0]
        return 0.5 * float(np.hypot(self.size[0], self.size[1]))


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    room_extent: Tuple[float, float, float] = (6.0, 6.0, 3.0)
    objects: Tuple[ObjectSpec, ...] = ()
    light_direction: Tuple[float, float, float] = (-0.3, -0.5, -1.0)
    wall_texture: Dict[str, Any] = field(default_factory=lambda: {"type": "checker", "scale": 0.5})
    # Objects keep out of this fraction of the smaller floor extent around the room axis
    keepout_fraction: float = 0.25

    @classmethod
    def from_dict(cls, data: dict) -> "SceneSpec":
        return cls(
            seed=int(data["seed"]),
            room_extent=tuple(float(v) for v in data.get("room_extent", (6.0, 6.0, 3.0))),
            objects=tuple(ObjectSpec.from_dict(o) for o in data.get("objects", [])),
            light_direction=tuple(float(v) for v in data.get("light_direction", (-0.3, -0.5, -1.0))),
            wall_texture=dict(data.get("wall_texture", {"type": "checker", "scale": 0.5})),
            keepout_fraction=float(data.get("keepout_fraction", 0.25)),
        )

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "room_extent": list(self.room_extent),
            "objects": [o.to_dict() for o in self.objects],
            "light_direction": list(self.light_direction),
            "wall_texture": self.wall_texture,
            "keepout_fraction": self.keepout_fraction,
        }


@dataclass(frozen=True, eq=False)
class GroundTruthView:
    pose: Pose
    intrinsics: CameraIntrinsics
    rgb: np.ndarray
    depth: np.ndarray
    normal: np.ndarray


@dataclass(frozen=True, eq=False)
class AnalyticSphere:
    center: np.ndarray
    radius: float
    material: int


@dataclass(frozen=True, eq=False)
class Scene:
    spec: SceneSpec
    # triangles rendered directly (walls, boxes, panels) with a material id per face
    flat_mesh: TriangleMesh
    face_materials: np.ndarray
    spheres: Tuple[AnalyticSphere, ...]
    materials: Tuple[Dict[str, Any], ...]

    @cached_property
    def mesh(self) -> TriangleMesh:
        """Full scene surface, spheres tessellated; used for serialization and evaluation."""
        parts = [self.flat_mesh]
        parts += [uv_sphere(s.center, s.radius) for s in self.spheres]
        return TriangleMesh.concatenate(parts)

    @property
    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        ex, ey, ez = self.spec.room_extent
        return np.array([-ex / 2, -ey / 2, 0.0]), np.array([ex / 2, ey / 2, ez])

    @property
    def diagonal(self) -> float:
        lo, hi = self.bounds
        return float(np.linalg.norm(hi - lo))

    @property
    def center(self) -> np.ndarray:
        lo, hi = self.bounds
        return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# Shape builders (registry pattern: shape name -> triangles or analytic sphere)
# ---------------------------------------------------------------------------

def quad_mesh(corners) -> TriangleMesh:
    corners = np.asarray(corners, dtype=np.float64)
    return TriangleMesh(corners, np.array([[0, 1, 2], [0, 2, 3]]))


def box_mesh(lo, hi, yaw: float = 0.0) -> TriangleMesh:
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    corners = np.array([[x, y, z] for z in (lo[2], hi[2]) for y in (lo[1], hi[1]) for x in (lo[0], hi[0])])
    if yaw:
        c, s = np.cos(yaw), np.sin(yaw)
        mid = 0.5 * (lo + hi)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        corners = (corners - mid) @ rot.T + mid
    faces = np.array([
        [0, 2, 3], [0, 3, 1],  # bottom
        [4, 5, 7], [4, 7, 6],  # top
        [0, 1, 5], [0, 5, 4],
        [2, 6, 7], [2, 7, 3],
        [0, 4, 6], [0, 6, 2],
        [1, 3, 7], [1, 7, 5],
    ])
    return TriangleMesh(corners, faces)


def uv_sphere(center, radius: float, n_lat: int = SPHERE_LAT, n_lon: int = SPHERE_LON) -> TriangleMesh:
    center = np.asarray(center, dtype=np.float64)
    theta = np.linspace(0.0, np.pi, n_lat + 1)[1:-1]
    phi = np.linspace(0.0, 2 * np.pi, n_lon, endpoint=False)
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    ring = np.stack([np.sin(tt) * np.cos(pp), np.sin(tt) * np.sin(pp), np.cos(tt)], axis=-1).reshape(-1, 3)
    verts = np.concatenate([[[0.0, 0.0, 1.0]], ring, [[0.0, 0.0, -1.0]]]) * radius + center
    faces = []
    south = len(verts) - 1
    for j in range(n_lon):
        jn = (j + 1) % n_lon
        faces.append([0, 1 + j, 1 + jn])
        for i in range(n_lat - 2):
            a = 1 + i * n_lon + j
            b = 1 + i * n_lon + jn
            c = 1 + (i + 1) * n_lon + j
            d = 1 + (i + 1) * n_lon + jn
            faces += [[a, c, d], [a, d, b]]
        last = 1 + (n_lat - 2) * n_lon
        faces.append([last + j, south, last + jn])
    return TriangleMesh(verts, np.array(faces))


def room_shell(extent) -> TriangleMesh:
    ex, ey, ez = extent
    lo = np.array([-ex / 2, -ey / 2, 0.0])
    hi = np.array([ex / 2, ey / 2, ez])
    return box_mesh(lo, hi)


def _build_box(obj: ObjectSpec, xy, yaw):
    sx, sy, sz = obj.size
    lo = np.array([xy[0] - sx / 2, xy[1] - sy / 2, 0.0])
    hi = np.array([xy[0] + sx / 2, xy[1] + sy / 2, sz])
    return box_mesh(lo, hi, yaw)


def _build_sphere(obj: ObjectSpec, xy, yaw):
    r = obj.size[0]
    return np.array([xy[0], xy[1], r]), r


def _build_plane(obj: ObjectSpec, xy, yaw):
    # Free-standing vertical panel; size = (width, height)
    w, h = obj.size[0], obj.size[1]
    u = np.array([np.cos(yaw), np.sin(yaw), 0.0]) * (w / 2)
    base = np.array([xy[0], xy[1], 0.0])
    top = np.array([0.0, 0.0, h])
    return quad_mesh([base - u, base + u, base + u + top, base - u + top])


SHAPE_BUILDERS = {
    "box": _build_box,
    "sphere": _build_sphere,
    "plane": _build_plane,
}


def _material(texture: Dict[str, Any], rng: np.random.Generator, extent) -> Dict[str, Any]:
    kind = texture.get("type", "flat")
    if kind not in TEXTURES:
        raise UnsupportedOptionError("texture", kind, TEXTURES.keys())
    colors = texture.get("colors")
    if colors is None:
        colors = rng.uniform(0.2, 0.9, size=(2, 3))
    colors = np.clip(np.asarray(colors, dtype=np.float64).reshape(-1, 3), 0.0, 1.0)
    if len(colors) == 1:
        colors = np.concatenate([colors, colors * 0.5])
    material = {"type": kind, "colors": colors, "scale": float(texture.get("scale", 0.5))}
    if kind == "gradient":
        material["axis"] = int(texture.get("axis", 2))
        material["range"] = tuple(texture.get("range", (0.0, float(extent[2]))))
    return material


def _place_objects(spec: SceneSpec, rng: np.random.Generator):
    ex, ey, _ = spec.room_extent
    keepout = spec.keepout_fraction * min(ex, ey)
    placed: List[Tuple[np.ndarray, float]] = []
    layout = []
    for obj in spec.objects:
        if obj.shape not in SHAPE_BUILDERS:
            raise UnsupportedOptionError("shape", obj.shape, SHAPE_BUILDERS.keys())
        radius = obj.footprint_radius()
        for attempt in range(PLACEMENT_ATTEMPTS):
            if obj.position is not None:
                xy = np.array(obj.position, dtype=np.float64)
            else:
                xy = rng.uniform([-ex / 2 + radius, -ey / 2 + radius], [ex / 2 - radius, ey / 2 - radius])
            yaw = float(obj.yaw) if obj.yaw is not None else float(rng.uniform(0.0, np.pi))
            inside = (abs(xy[0]) + radius <= ex / 2) and (abs(xy[1]) + radius <= ey / 2)
            clear = np.linalg.norm(xy) >= keepout + radius or obj.position is not None
            free = all(np.linalg.norm(xy - c) >= radius + r for c, r in placed)
            if inside and clear and free:
                placed.append((xy, radius))
                layout.append((obj, xy, yaw))
                break
            if obj.position is not None:
                raise SceneGenerationError(spec.seed, attempt + 1)
        else:
            raise SceneGenerationError(spec.seed, PLACEMENT_ATTEMPTS)
    return layout


def build_scene(spec: SceneSpec) -> Scene:
    if min(spec.room_extent) <= 0:
        raise DomainError("room_extent must be positive")
    rng = np.random.default_rng(spec.seed)
    materials = [_material(spec.wall_texture, rng, spec.room_extent)]
    meshes = [room_shell(spec.room_extent)]
    face_materials = [np.zeros(len(meshes[0].faces), dtype=np.int64)]
    spheres = []
    for obj, xy, yaw in _place_objects(spec, rng):
        materials.append(_material(obj.texture, rng, spec.room_extent))
        mat_id = len(materials) - 1
        built = SHAPE_BUILDERS[obj.shape](obj, xy, yaw)
        if isinstance(built, TriangleMesh):
            meshes.append(built)
            face_materials.append(np.full(len(built.faces), mat_id, dtype=np.int64))
        else:
            center, radius = built
            spheres.append(AnalyticSphere(center, float(radius), mat_id))
    scene = Scene(spec, TriangleMesh.concatenate(meshes), np.concatenate(face_materials),
                  tuple(spheres), tuple(materials))
    logger.debug("Built scene seed=%d with %d objects", spec.seed, len(spec.objects))
    return scene


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _intersect_spheres(origins, directions, spheres, eps=1e-12):
    best_t = np.full(len(origins), np.inf)
    best_s = np.full(len(origins), -1, dtype=np.int64)
    for k, sphere in enumerate(spheres):
        oc = origins - sphere.center
        b = np.sum(oc * directions, axis=-1)
        c = np.sum(oc * oc, axis=-1) - sphere.radius ** 2
        disc = b * b - c
        ok = disc >= 0
        root = np.sqrt(np.where(ok, disc, 0.0))
        t0 = -b - root
        t1 = -b + root
        t = np.where(t0 > eps, t0, np.where(t1 > eps, t1, np.inf))
        t = np.where(ok, t, np.inf)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_s = np.where(closer, k, best_s)
    return best_t, best_s


def trace_scene(scene: Scene, origins: np.ndarray, directions: np.ndarray):
    """Nearest hit for unit-direction rays: distance, world point, oriented normal, albedo."""
    t_tri, face = intersect_rays_mesh(origins, directions, scene.flat_mesh)
    t_sph, sph = _intersect_spheres(origins, directions, scene.spheres)
    use_sphere = t_sph < t_tri
    t = np.where(use_sphere, t_sph, t_tri)
    hit = np.isfinite(t)
    points = origins + np.where(hit, t, 0.0)[:, None] * directions

    normals = np.zeros_like(points)
    mat_ids = np.full(len(t), -1, dtype=np.int64)
    tri_hit = hit & ~use_sphere
    normals[tri_hit] = scene.flat_mesh.face_normals[face[tri_hit]]
    mat_ids[tri_hit] = scene.face_materials[face[tri_hit]]
    for k, sphere in enumerate(scene.spheres):
        sel = hit & use_sphere & (sph == k)
        normals[sel] = (points[sel] - sphere.center) / sphere.radius
        mat_ids[sel] = sphere.material
    flip = np.sum(normals * directions, axis=-1) > 0
    normals[flip] *= -1.0
    normals[hit] /= np.linalg.norm(normals[hit], axis=-1, keepdims=True)

    albedo = np.zeros_like(points)
    for m, material in enumerate(scene.materials):
        sel = mat_ids == m
        if sel.any():
            albedo[sel] = TEXTURES[material["type"]](points[sel], material)
    return t, points, normals, albedo


def render_ground_truth(scene: Scene, intrinsics: CameraIntrinsics, pose: Pose) -> GroundTruthView:
    origins, directions = camera_rays(intrinsics, pose)
    shape = directions.shape[:2]
    t, _, normals, albedo = trace_scene(scene, origins.reshape(-1, 3), directions.reshape(-1, 3))
    hit = np.isfinite(t)

    light = -np.asarray(scene.spec.light_direction, dtype=np.float64)
    light /= np.linalg.norm(light)
    shade = AMBIENT + (1.0 - AMBIENT) * np.clip(normals @ light, 0.0, None)
    rgb = np.where(hit[:, None], np.clip(albedo * shade[:, None], 0.0, 1.0), np.asarray(BACKGROUND_RGB))

    cos_axis = directions.reshape(-1, 3) @ pose.forward
    depth = np.where(hit, t * cos_axis, np.inf)
    return GroundTruthView(
        pose=pose,
        intrinsics=intrinsics,
        rgb=rgb.reshape(*shape, 3),
        depth=depth.reshape(shape),
        normal=np.where(hit[:, None], normals, 0.0).reshape(*shape, 3),
    )


def perturb_normals(normal: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    """Rotate each normal about a random tangent axis by an angle ~ |N(0, sigma)|."""
    if sigma < 0:
        raise DomainError("sigma must be >= 0")
    normal = np.asarray(normal, dtype=np.float64)
    if sigma == 0:
        return normal.copy()
    rng = np.random.default_rng(seed)
    flat = normal.reshape(-1, 3)
    norm = np.linalg.norm(flat, axis=-1)
    valid = norm > 0
    n = np.where(valid[:, None], flat / np.where(valid, norm, 1.0)[:, None], 0.0)

    # orthonormal tangent basis per normal
    helper = np.where(np.abs(n[:, :1]) < 0.9, np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))
    t1 = np.cross(n, helper)
    t1 /= np.maximum(np.linalg.norm(t1, axis=-1, keepdims=True), 1e-300)
    t2 = np.cross(n, t1)
    phi = rng.uniform(0.0, 2 * np.pi, size=len(n))
    angle = np.abs(rng.normal(0.0, sigma, size=len(n)))
    axis = np.cos(phi)[:, None] * t1 + np.sin(phi)[:, None] * t2
    rotated = n * np.cos(angle)[:, None] + np.cross(axis, n) * np.sin(angle)[:, None]
    rotated /= np.maximum(np.linalg.norm(rotated, axis=-1, keepdims=True), 1e-300)
    out = np.where(valid[:, None], rotated, 0.0)
    return out.reshape(normal.shape)


def default_view_poses(scene: Scene, count: int, arc_degrees: float = 90.0,
                       radius_fraction: float = 0.15, height_fraction: float = 0.5) -> List[Pose]:
    """Inward-facing arc of `count` cameras around the room axis."""
    if count <= 0:
        return []
    ex, ey, ez = scene.spec.room_extent
    radius = radius_fraction * min(ex, ey)
    target = np.array([0.0, 0.0, height_fraction * ez])
    half = np.radians(arc_degrees) / 2
    azimuths = [0.0] if count == 1 else np.linspace(-half, half, count)
    return [orbit_pose(target, radius, float(a), 0.0) for a in azimuths]


def held_out_poses(scene: Scene, count: int) -> List[Pose]:
    """Evaluation cameras on the far side of the room axis from the input arc."""
    if count <= 0:
        return []
    ex, ey, ez = scene.spec.room_extent
    target = np.array([0.0, 0.0, 0.5 * ez])
    azimuths = [np.pi] if count == 1 else np.linspace(2 * np.pi / 3, 4 * np.pi / 3, count)
    return [orbit_pose(target, 0.12 * min(ex, ey), float(a), 0.0) for a in azimuths]
