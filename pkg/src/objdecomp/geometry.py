"""SDF grids, marching cubes, Chamfer distance and mask IoU."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

from .fields import DomainError, ForegroundField, foreground_sdf


@dataclass
class SdfGrid:
    values: np.ndarray  # (N, N, N), indexed [ix, iy, iz]
    lo: float = -1.0
    hi: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        n = self.values.shape[0]
        if self.values.shape != (n, n, n) or n < 2:
            raise ValueError("SDF grid must be N x N x N with N >= 2")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("SDF grid contains non-finite samples")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def spacing(self) -> float:
        return (self.hi - self.lo) / (self.n - 1)

    def points(self) -> np.ndarray:
        ax = np.linspace(self.lo, self.hi, self.n)
        return np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1)


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def area(self) -> float:
        return float(triangle_areas(self).sum())


def sample_sdf_grid(sdf, n: int = 128, lo: float = -1.0, hi: float = 1.0, chunk: int = 65536) -> SdfGrid:
    """Evaluate an SDF (ForegroundField or callable on (M, 3) arrays) on an N^3 lattice."""
    if n < 2:
        raise ValueError("N must be >= 2")
    fn: Callable = (lambda x: foreground_sdf(sdf, x, chunk)) if isinstance(sdf, ForegroundField) else sdf
    ax = np.linspace(lo, hi, n)
    pts = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)
    vals = np.concatenate([np.asarray(fn(pts[i : i + chunk]), dtype=np.float64) for i in range(0, len(pts), chunk)])
    return SdfGrid(vals.reshape(n, n, n), lo, hi)


def marching_cubes(grid: SdfGrid, iso: float = 0.0) -> TriangleMesh:
    """Classic marching cubes with linear edge interpolation; empty mesh if no sign change."""
    v = grid.values
    if not (v.min() < iso < v.max()):
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    verts, faces, _, _ = measure.marching_cubes(v, level=iso, spacing=(grid.spacing,) * 3, method="lorensen")
    verts = verts + grid.lo
    keep = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    return TriangleMesh(verts, faces[keep])


def triangle_areas(mesh: TriangleMesh) -> np.ndarray:
    a, b, c = (mesh.vertices[mesh.faces[:, i]] for i in range(3))
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=-1)


def sample_mesh_points(mesh: TriangleMesh, n: int, seed: int = 0) -> np.ndarray:
    """Area-uniform random points on the mesh surface."""
    if mesh.is_empty:
        raise DomainError("cannot sample points from an empty mesh")
    rng = np.random.default_rng(seed)
    areas = triangle_areas(mesh)
    tri = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    a, b, c = (mesh.vertices[mesh.faces[tri, i]] for i in range(3))
    return (1 - s)[:, None] * a + (s * (1 - r2))[:, None] * b + (s * r2)[:, None] * c


def sample_sphere_points(n: int, radius: float = 1.0, center=(0.0, 0.0, 0.0), seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(n, 3))
    return np.asarray(center) + radius * v / np.linalg.norm(v, axis=-1, keepdims=True)


def chamfer_distance(a, b) -> float:
    """Symmetric mean nearest-neighbor distance: (mean_a d(a, B) + mean_b d(b, A)) / 2."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise DomainError("chamfer distance needs two nonempty clouds")
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return float(0.5 * (da.mean() + db.mean()))


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def miou(pred, gt, two_class: bool = False) -> float:
    """Foreground IoU of one mask pair; ``two_class`` averages foreground and background IoU."""
    fg = iou(pred, gt)
    if not two_class:
        return fg
    return 0.5 * (fg + iou(~np.asarray(pred, dtype=bool), ~np.asarray(gt, dtype=bool)))


def mean_iou(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], two_class: bool = False) -> tuple[float, list[float]]:
    per_view = [miou(p, g, two_class) for p, g in zip(preds, gts, strict=True)]
    return float(np.mean(per_view)), per_view


# ---------------------------------------------------------------- export


def write_obj(path, mesh: TriangleMesh, comments: Sequence[str] = ()) -> None:
    lines = [f"# {c}" for c in comments]
    lines += [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> TriangleMesh:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        if line.startswith("v "):
            verts.append([float(t) for t in line.split()[1:4]])
        elif line.startswith("f "):
            faces.append([int(t.split("/")[0]) - 1 for t in line.split()[1:4]])
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_xyz(path, points: np.ndarray) -> None:
    np.savetxt(path, np.asarray(points).reshape(-1, 3), fmt="%.9g")


def write_metrics(path, scene: str, miou_value: float | None, cd: float | None, per_view: list) -> None:
    report = {"scene": scene, "miou": miou_value, "cd": cd, "per_view": per_view}
    Path(path).write_text(json.dumps(report, indent=2) + "\n")
