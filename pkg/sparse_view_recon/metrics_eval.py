"""
Surface and image metrics: Chamfer distance, F-score, normal consistency, PSNR, SSIM.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from sparse_view_recon.exceptions import DomainError, UnsupportedOptionError
from sparse_view_recon.geometry import TriangleMesh
from sparse_view_recon.losses import ssim as _ssim

logger = logging.getLogger(__name__)

DEFAULT_SAMPLES = 100_000
DEFAULT_FSCORE_FRACTION = 0.02

# metric key -> report column
METRICS = {
    "cd": "CD",
    "f_score": "F-Score",
    "nc": "NC",
    "psnr": "PSNR",
    "ssim": "SSIM",
}
REPORT_COLUMNS = ["scene"] + list(METRICS.values())


def _points(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0:
        raise DomainError("Point set must be non-empty")
    return a


def nearest_distances(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Distance from every point of a to its nearest neighbour in b, and that neighbour's index."""
    dist, idx = cKDTree(b).query(a, k=1)
    return dist, idx


def chamfer(a, b) -> float:
    a, b = _points(a), _points(b)
    d_ab, _ = nearest_distances(a, b)
    d_ba, _ = nearest_distances(b, a)
    return float(0.5 * (d_ab.mean() + d_ba.mean()))


def f_score(a, b, tau: float) -> float:
    if tau <= 0:
        raise DomainError("F-score threshold must be positive")
    a, b = _points(a), _points(b)
    precision = float(np.mean(nearest_distances(a, b)[0] < tau))
    recall = float(np.mean(nearest_distances(b, a)[0] < tau))
    if precision + recall == 0:
        return 0.0
    return 100.0 * 2 * precision * recall / (precision + recall)


def normal_consistency(a, b, normals_a, normals_b) -> float:
    if normals_a is None or normals_b is None:
        raise DomainError("normal_consistency needs normals on both point sets")
    a, b = _points(a), _points(b)
    na = np.asarray(normals_a, dtype=np.float64).reshape(-1, 3)
    nb = np.asarray(normals_b, dtype=np.float64).reshape(-1, 3)
    if len(na) != len(a) or len(nb) != len(b):
        raise DomainError("Normal counts must match point counts")
    _, ab = nearest_distances(a, b)
    _, ba = nearest_distances(b, a)
    forward = np.abs(np.sum(na * nb[ab], axis=1)).mean()
    backward = np.abs(np.sum(nb * na[ba], axis=1)).mean()
    return float(100.0 * 0.5 * (forward + backward))


def _images(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DomainError(f"Image shapes differ: {x.shape} vs {y.shape}")
    return x, y


def psnr(x, y, peak: float = 1.0) -> float:
    x, y = _images(x, y)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(peak ** 2 / mse))


def ssim(x, y) -> float:
    x, y = _images(x, y)
    return _ssim(x, y)


def sample_mesh_surface(mesh: TriangleMesh, count: int = DEFAULT_SAMPLES, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Area-weighted uniform samples and their face normals."""
    if mesh.is_empty:
        raise DomainError("Cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas
    faces = rng.choice(len(areas), size=count, p=areas / areas.sum())
    r1 = np.sqrt(rng.uniform(size=count))
    r2 = rng.uniform(size=count)
    tri = mesh.triangles[faces]
    points = ((1 - r1)[:, None] * tri[:, 0] + (r1 * (1 - r2))[:, None] * tri[:, 1]
              + (r1 * r2)[:, None] * tri[:, 2])
    return points, mesh.face_normals[faces]


@dataclass
class MetricReport:
    scene: str
    cd: Optional[float] = None
    f_score: Optional[float] = None
    nc: Optional[float] = None
    psnr: Optional[float] = None
    ssim: Optional[float] = None

    def __post_init__(self):
        if self.cd is not None and self.cd < 0:
            raise DomainError("Chamfer distance must be >= 0")
        for name in ("f_score", "nc"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 100.0:
                raise DomainError(f"{name} must lie in [0, 100]")
        if self.ssim is not None and not -1.0 <= self.ssim <= 1.0 + 1e-9:
            raise DomainError("SSIM must lie in [-1, 1]")


def evaluate_meshes(pred: TriangleMesh, gt: TriangleMesh, scene: str = "scene",
                    samples: int = DEFAULT_SAMPLES, fscore_fraction: float = DEFAULT_FSCORE_FRACTION,
                    seed: int = 0) -> MetricReport:
    """CD / F-score / NC on area-weighted samples; tau is a fraction of the GT bounding-box diagonal."""
    lo, hi = gt.bounds()
    tau = fscore_fraction * float(np.linalg.norm(hi - lo))
    if pred.is_empty:
        logger.warning("Predicted mesh for %s is empty; surface metrics left undefined", scene)
        return MetricReport(scene)
    pa, na = sample_mesh_surface(pred, samples, seed)
    # same stream for both meshes, so identical meshes give identical samples
    pb, nb = sample_mesh_surface(gt, samples, seed)
    return MetricReport(scene, cd=chamfer(pa, pb), f_score=f_score(pa, pb, tau),
                        nc=normal_consistency(pa, pb, na, nb))


def report_frame(reports: Sequence[MetricReport], metrics: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """Per-scene rows in fixed column order plus an aggregate `mean` row."""
    keys = list(METRICS) if metrics is None else list(metrics)
    for key in keys:
        if key not in METRICS:
            raise UnsupportedOptionError("metric", key, METRICS)
    rows = [{"scene": r.scene, **{METRICS[k]: getattr(r, k) for k in keys}} for r in reports]
    frame = pd.DataFrame(rows, columns=["scene"] + [METRICS[k] for k in keys])
    if len(frame) > 1:
        numeric = frame.drop(columns="scene").astype(float)
        means = numeric.replace([np.inf, -np.inf], np.nan).mean()
        frame.loc[len(frame)] = {"scene": "mean", **means.to_dict()}
    return frame
