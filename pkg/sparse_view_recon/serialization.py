"""
File formats: PNG images, float maps with JSON headers, pose documents, meshes,
surfel PLY files, CSV tables and atomically written JSON manifests.
"""

import json
import logging
import os
import tempfile
from pathlib import Path
from typing import List, Sequence

import numpy as np
import pandas as pd
import trimesh
from PIL import Image
from plyfile import PlyData, PlyElement

from sparse_view_recon.exceptions import DomainError
from sparse_view_recon.geometry import Pose, TriangleMesh
from sparse_view_recon.splat_render import SurfelCloud

logger = logging.getLogger(__name__)

SURFEL_FIELDS = [
    "x", "y", "z",
    "tu_x", "tu_y", "tu_z",
    "tv_x", "tv_y", "tv_z",
    "scale_u", "scale_v",
    "opacity",
    "red", "green", "blue",
]


def _parent(path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def save_png(path, image: np.ndarray) -> None:
    """8-bit PNG from an rgb (H, W, 3) or gray (H, W) image in [0, 1]."""
    data = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(_parent(path), format="PNG", optimize=False)


def load_png(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img, dtype=np.float64) / 255.0


def save_float_map(path, values: np.ndarray, units: str = "") -> None:
    """Little-endian float32 `.bin` next to a `.json` header {shape, dtype, units}."""
    path = _parent(path)
    values = np.asarray(values)
    values.astype("<f4").tofile(path.with_suffix(".bin"))
    header = {"shape": list(values.shape), "dtype": "float32", "byte_order": "little", "units": units}
    path.with_suffix(".json").write_text(json.dumps(header, indent=2))


def load_float_map(path) -> np.ndarray:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    data = np.fromfile(path.with_suffix(".bin"), dtype="<f4").astype(np.float64)
    return data.reshape(header["shape"])


def save_poses(path, poses: Sequence[Pose]) -> None:
    doc = {"poses": [pose.matrix().tolist() for pose in poses]}
    _parent(path).write_text(json.dumps(doc, indent=2))


def load_poses(path) -> List[Pose]:
    doc = json.loads(Path(path).read_text())
    return [Pose.from_matrix(m) for m in doc["poses"]]


def save_mesh(path, mesh: TriangleMesh, ascii: bool = False) -> None:
    """PLY (binary little-endian unless ascii) or OBJ, chosen by suffix."""
    path = _parent(path)
    tm = trimesh.Trimesh(vertices=mesh.vertices, faces=mesh.faces, process=False)
    suffix = path.suffix.lower()
    if suffix == ".ply":
        path.write_bytes(trimesh.exchange.ply.export_ply(tm, encoding="ascii" if ascii else "binary"))
    elif suffix == ".obj":
        path.write_text(trimesh.exchange.obj.export_obj(tm))
    else:
        raise DomainError(f"Unsupported mesh format '{suffix}'")


def load_mesh(path) -> TriangleMesh:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Mesh file not found: {path}")
    loaded = trimesh.load(path, process=False, force="mesh")
    return TriangleMesh(np.asarray(loaded.vertices), np.asarray(loaded.faces))


def save_surfels(path, cloud: SurfelCloud) -> None:
    data = np.column_stack([
        cloud.positions, cloud.tangents_u, cloud.tangents_v, cloud.scales,
        cloud.opacities[:, None], cloud.colors,
    ]).astype(np.float32) if len(cloud) else np.zeros((0, len(SURFEL_FIELDS)), dtype=np.float32)
    records = np.empty(len(data), dtype=[(name, "<f4") for name in SURFEL_FIELDS])
    for i, name in enumerate(SURFEL_FIELDS):
        records[name] = data[:, i]
    PlyData([PlyElement.describe(records, "vertex")], text=False, byte_order="<").write(str(_parent(path)))


def load_surfels(path) -> SurfelCloud:
    vertex = PlyData.read(str(path))["vertex"]
    cols = {name: np.asarray(vertex[name], dtype=np.float64) for name in SURFEL_FIELDS}

    def stack(*names):
        return np.stack([cols[n] for n in names], axis=1)

    tu = stack("tu_x", "tu_y", "tu_z")
    tv = stack("tv_x", "tv_y", "tv_z")
    # float32 storage; restore orthonormality
    tu /= np.maximum(np.linalg.norm(tu, axis=1, keepdims=True), 1e-300)
    tv -= np.sum(tv * tu, axis=1, keepdims=True) * tu
    tv /= np.maximum(np.linalg.norm(tv, axis=1, keepdims=True), 1e-300)
    return SurfelCloud(stack("x", "y", "z"), tu, tv, stack("scale_u", "scale_v"), cols["opacity"],
                       stack("red", "green", "blue"))


def save_table(path, frame: pd.DataFrame) -> None:
    frame.to_csv(_parent(path), index=False, float_format="%.6f")


def write_json_atomic(path, document: dict) -> None:
    path = _parent(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as handle:
            json.dump(document, handle, indent=2, sort_keys=True)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise
