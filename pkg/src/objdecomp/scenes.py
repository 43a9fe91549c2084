"""Synthetic multi-view scenes with exact ground truth, and dataset persistence."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .fields import SphereAnnotation
from .maskgen import DescriptorMap, read_descriptor_map, write_descriptor_map
from .rendering import Camera, generate_rays, look_at, pixel_centers
from .supervision import MaskSet

DATASET_FORMAT = "objdecomp-dataset"
DATASET_VERSION = "1.0"

# region ids in the per-pixel region map
SKY, PLANE_LIGHT, PLANE_DARK, OBJECT, OBJECT_ALT, STRADDLE_FG, STRADDLE_BG = range(7)
REGION_NAMES = ("sky", "plane_light", "plane_dark", "object", "object_alt", "straddle_fg", "straddle_bg")
FOREGROUND_REGIONS = (OBJECT, OBJECT_ALT, STRADDLE_FG)
# the shared-appearance class of the straddling scene covers both of these regions
STRADDLE_CLASS = (STRADDLE_FG, STRADDLE_BG)

ALBEDO = {
    SKY: (0.62, 0.74, 0.9),
    PLANE_LIGHT: (0.86, 0.82, 0.72),
    PLANE_DARK: (0.42, 0.38, 0.33),
    OBJECT: (0.82, 0.24, 0.18),
    OBJECT_ALT: (0.95, 0.8, 0.2),
    STRADDLE_FG: (0.25, 0.6, 0.3),
    STRADDLE_BG: (0.25, 0.6, 0.3),
}


class SceneConfigError(ValueError):
    pass


class DatasetIOError(FileNotFoundError):
    pass


class DatasetVersionError(IOError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    """Declarative scene description. Lengths are in scene units."""

    object_kind: str = "sphere"  # sphere | box | union
    object_center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    object_radius: float = 0.4  # sphere radius, or box half-extent
    union_offset: tuple[float, float, float] = (0.3, 0.0, 0.15)  # second primitive (sphere) of a union
    union_radius: float = 0.25
    object_texture: str = "flat"  # flat | stripes
    background: str = "plane"  # plane | bowl
    plane_z: float = -0.4
    plane_extent: float = 4.0
    bowl_radius: float = 2.0
    bowl_depth: float = 0.6  # rim height above the bowl floor
    plane_texture: str = "checker"  # checker | flat
    checker_size: float = 0.25
    n_views: int = 28
    cam_radius: float = 3.0
    elevation_deg: float = 30.0
    image_size: int = 64
    fov_deg: float = 36.0
    sphere_center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    sphere_radius: float = 1.0
    light_dir: tuple[float, float, float] = (0.3, -0.5, 1.0)
    ambient: float = 0.35
    shadows: bool = False
    seed: int = 0
    descriptor_dim: int = 8
    descriptor_sep: float = 8.0  # distance between region means, in noise standard deviations
    saliency_fg: float = 0.8
    saliency_bg: float = 0.2
    saliency_noise: float = 0.05
    straddle: bool = False
    straddle_band: float = 0.2  # object points this far below the center belong to the shared class
    straddle_ring: tuple[float, float] = (0.45, 0.8)  # plane ring radii of the shared class
    straddle_salient_fraction: float = 0.5
    test_fraction: float = 0.3

    def __post_init__(self):
        if self.object_kind not in ("sphere", "box", "union"):
            raise SceneConfigError(f"unknown object kind {self.object_kind!r}")
        if self.background not in ("plane", "bowl"):
            raise SceneConfigError(f"unknown background {self.background!r}")
        if self.object_texture not in ("flat", "stripes"):
            raise SceneConfigError(f"unknown object texture {self.object_texture!r}")
        if self.plane_texture not in ("checker", "flat"):
            raise SceneConfigError(f"unknown plane texture {self.plane_texture!r}")
        if self.object_radius <= 0 or self.sphere_radius <= 0 or self.image_size < 2 or self.n_views < 2:
            raise SceneConfigError("sizes must be positive and at least two views are needed")
        if not 0.0 < self.fov_deg < 170.0:
            raise SceneConfigError("fov_deg must lie in (0, 170)")
        if self.descriptor_dim < len(REGION_NAMES):
            raise SceneConfigError(f"descriptor_dim must be >= {len(REGION_NAMES)}")
        if not 0.0 <= self.test_fraction < 1.0:
            raise SceneConfigError("test_fraction must lie in [0, 1)")

    @property
    def annotation(self) -> SphereAnnotation:
        return SphereAnnotation(np.asarray(self.sphere_center, dtype=np.float64), float(self.sphere_radius))

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise SceneConfigError(f"unknown scene key(s): {', '.join(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


# ---------------------------------------------------------------- primitives


def _ray_sphere(o, d, c, r):
    """Nearest positive hit distance and outward normal (inf where missed)."""
    oc = o - np.asarray(c)
    b = np.einsum("ij,ij->i", oc, d)
    cc = np.einsum("ij,ij->i", oc, oc) - r * r
    disc = b * b - cc
    root = np.sqrt(np.maximum(disc, 0.0))
    t0, t1 = -b - root, -b + root
    t = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, np.inf))
    t = np.where(disc >= 0, t, np.inf)
    p = o + d * np.where(np.isfinite(t), t, 0.0)[:, None]
    n = (p - np.asarray(c)) / r
    return t, n


def _ray_box(o, d, c, h):
    lo, hi = np.asarray(c) - h, np.asarray(c) + h
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        ta, tb = (lo - o) * inv, (hi - o) * inv
    tmin = np.nanmax(np.minimum(ta, tb), axis=1)
    tmax = np.nanmin(np.maximum(ta, tb), axis=1)
    hit = (tmax >= np.maximum(tmin, 0.0)) & (tmin > 1e-9)
    t = np.where(hit, tmin, np.inf)
    p = o + d * np.where(hit, t, 0.0)[:, None]
    rel = (p - np.asarray(c)) / h
    axis = np.abs(rel).argmax(1)
    n = np.zeros_like(p)
    n[np.arange(len(p)), axis] = np.sign(rel[np.arange(len(p)), axis])
    return t, n


def _object_hits(spec: SceneSpec, o, d):
    c = np.asarray(spec.object_center, dtype=np.float64)
    if spec.object_kind == "box":
        return _ray_box(o, d, c, spec.object_radius)
    t, n = _ray_sphere(o, d, c, spec.object_radius)
    if spec.object_kind == "union":
        t2, n2 = _ray_sphere(o, d, c + np.asarray(spec.union_offset), spec.union_radius)
        closer = t2 < t
        t, n = np.where(closer, t2, t), np.where(closer[:, None], n2, n)
    return t, n


def object_sdf(spec: SceneSpec, x: np.ndarray) -> np.ndarray:
    """Exact SDF of the object (sphere/box) or a union bound (union of sphere SDFs)."""
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(spec.object_center)
    if spec.object_kind == "box":
        q = np.abs(x - c) - spec.object_radius
        return np.linalg.norm(np.maximum(q, 0.0), axis=-1) + np.minimum(q.max(-1), 0.0)
    s = np.linalg.norm(x - c, axis=-1) - spec.object_radius
    if spec.object_kind == "union":
        s = np.minimum(s, np.linalg.norm(x - c - np.asarray(spec.union_offset), axis=-1) - spec.union_radius)
    return s


def object_surface_points(spec: SceneSpec, n: int, seed: int = 0) -> np.ndarray:
    """Uniform samples of the analytic object surface (scene units)."""
    rng = np.random.default_rng(seed)
    c = np.asarray(spec.object_center, dtype=np.float64)
    if spec.object_kind == "sphere":
        v = rng.normal(size=(n, 3))
        return c + spec.object_radius * v / np.linalg.norm(v, axis=-1, keepdims=True)
    if spec.object_kind == "box":
        h = spec.object_radius
        face = rng.integers(6, size=n)
        uv = rng.uniform(-h, h, size=(n, 2))
        p = np.zeros((n, 3))
        axis, sign = face // 2, np.where(face % 2 == 0, -1.0, 1.0)
        others = np.array([[1, 2], [0, 2], [0, 1]])[axis]
        p[np.arange(n), axis] = sign * h
        p[np.arange(n), others[:, 0]] = uv[:, 0]
        p[np.arange(n), others[:, 1]] = uv[:, 1]
        return c + p
    # union: sample both spheres by area, keep points outside the other sphere
    c2 = c + np.asarray(spec.union_offset)
    out = []
    while sum(len(o) for o in out) < n:
        a1, a2 = spec.object_radius**2, spec.union_radius**2
        pick = rng.random(n) < a1 / (a1 + a2)
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=-1, keepdims=True)
        p = np.where(pick[:, None], c + spec.object_radius * v, c2 + spec.union_radius * v)
        out.append(p[np.abs(object_sdf(spec, p)) < 1e-9])
    return np.concatenate(out)[:n]


def _background_hits(spec: SceneSpec, o, d):
    if spec.background == "plane":
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (spec.plane_z - o[:, 2]) / d[:, 2]
        t = np.where(np.isfinite(t) & (t > 1e-9), t, np.inf)
        p = o + d * np.where(np.isfinite(t), t, 0.0)[:, None]
        t = np.where(np.hypot(p[:, 0], p[:, 1]) <= spec.plane_extent, t, np.inf)
        n = np.broadcast_to(np.array([0.0, 0.0, 1.0]), p.shape).copy()
        return t, n, p
    # bowl: the lower cap of a sphere resting on the plane height, cut at the rim height
    rb = spec.bowl_radius
    c = np.array([0.0, 0.0, spec.plane_z + rb])
    rim = spec.plane_z + min(spec.bowl_depth, rb)
    oc = o - c
    b = np.einsum("ij,ij->i", oc, d)
    cc = np.einsum("ij,ij->i", oc, oc) - rb * rb
    disc = b * b - cc
    root = np.sqrt(np.maximum(disc, 0.0))
    best = np.full(len(o), np.inf)
    for t_cand in (-b - root, -b + root):
        p = o + d * t_cand[:, None]
        ok = (disc >= 0) & (t_cand > 1e-9) & (p[:, 2] <= rim) & (t_cand < best)
        best = np.where(ok, t_cand, best)
    p = o + d * np.where(np.isfinite(best), best, 0.0)[:, None]
    n = (c - p) / rb  # inner surface
    n = np.where((np.einsum("ij,ij->i", n, d) > 0)[:, None], -n, n)
    return best, n, p


# ---------------------------------------------------------------- dataset


@dataclass
class SyntheticDataset:
    spec: SceneSpec
    cameras: list[Camera]
    images: np.ndarray  # (N, H, W, 3) uint8
    masks_gt: np.ndarray  # (N, H, W) bool
    depth: np.ndarray  # (N, 2, H, W) float64: object and background hit distance (inf = none)
    regions: np.ndarray  # (N, H, W) uint8
    descriptors: list[DescriptorMap]
    train_idx: list[int]
    test_idx: list[int]
    masks: list[MaskSet] | None = None
    mask_params: dict = field(default_factory=dict)
    reference_view: int = 0

    @property
    def sphere(self) -> SphereAnnotation:
        return self.spec.annotation

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.images.shape[1:3]

    def images_float(self) -> np.ndarray:
        return self.images.astype(np.float64) / 255.0

    def with_masks(self, masks: Sequence[MaskSet], params: dict | None = None) -> "SyntheticDataset":
        if len(masks) != self.n_views:
            raise ValueError("one MaskSet per view is required")
        return replace(self, masks=list(masks), mask_params=dict(params or {}))

    def with_spec(self, **changes) -> "SyntheticDataset":
        """Same data under a modified spec (used to perturb the sphere annotation)."""
        return replace(self, spec=replace(self.spec, **changes))


def split_views(n: int, test_fraction: float) -> tuple[list[int], list[int]]:
    """Evenly strided test views; view 0 (the reference) always trains."""
    n_test = int(round(test_fraction * n))
    if n_test == 0:
        return list(range(n)), []
    test = sorted(set(np.round(np.linspace(0, n - 1, n_test + 2)[1:-1]).astype(int).tolist()))
    train = [i for i in range(n) if i not in test]
    return train, test


def make_cameras(spec: SceneSpec) -> list[Camera]:
    f = 0.5 * spec.image_size / math.tan(math.radians(spec.fov_deg) / 2)
    elev = math.radians(spec.elevation_deg)
    target = np.asarray(spec.object_center, dtype=np.float64)
    cams = []
    for i in range(spec.n_views):
        az = 2 * math.pi * i / spec.n_views
        eye = target + spec.cam_radius * np.array(
            [math.cos(elev) * math.cos(az), math.cos(elev) * math.sin(az), math.sin(elev)]
        )
        cams.append(Camera(f, f, spec.image_size / 2, spec.image_size / 2, look_at(eye, target), spec.image_size, spec.image_size))
    return cams


def _validate(spec: SceneSpec, cams: list[Camera]):
    ann = spec.annotation
    c = np.asarray(spec.object_center, dtype=np.float64)
    reach = spec.object_radius * (math.sqrt(3) if spec.object_kind == "box" else 1.0)
    extent = np.linalg.norm(c - ann.center) + reach
    if spec.object_kind == "union":
        extent = max(extent, np.linalg.norm(c + np.asarray(spec.union_offset) - ann.center) + spec.union_radius)
    if extent > ann.radius:
        raise SceneConfigError("the sphere annotation does not enclose the object")
    for cam in cams:
        if object_sdf(spec, cam.center[None])[0] <= 0:
            raise SceneConfigError("a camera lies inside the object")
        if np.linalg.norm(cam.center - ann.center) <= ann.radius:
            raise SceneConfigError("the camera ring must lie outside the sphere annotation")


def _checker(p: np.ndarray, size: float) -> np.ndarray:
    return (np.floor(p[:, 0] / size) + np.floor(p[:, 1] / size)).astype(np.int64) % 2 == 0


def _region_means(spec: SceneSpec) -> np.ndarray:
    means = np.zeros((len(REGION_NAMES), spec.descriptor_dim))
    means[np.arange(len(REGION_NAMES)), np.arange(len(REGION_NAMES))] = spec.descriptor_sep / math.sqrt(2.0)
    return means


def _straddle_salient(spec: SceneSpec, n: int) -> np.ndarray:
    """Views in which the shared-appearance class looks salient (always the reference view)."""
    rng = np.random.default_rng([spec.seed, 7])
    salient = rng.random(n) < spec.straddle_salient_fraction
    salient[0] = True
    return salient


def render_view(spec: SceneSpec, cam: Camera):
    """Ray trace one view. Returns (rgb float (H, W, 3), depth (2, H, W), regions (H, W))."""
    h, w = cam.height, cam.width
    rays = generate_rays(cam, pixel_centers(cam), SphereAnnotation())  # scene units
    o, d = rays.origins, rays.dirs
    t_obj, n_obj = _object_hits(spec, o, d)
    t_bg, n_bg, p_bg = _background_hits(spec, o, d)
    obj = t_obj < t_bg
    hit_bg = ~obj & np.isfinite(t_bg)

    regions = np.full(len(o), SKY, dtype=np.uint8)
    normals = np.zeros_like(o)
    p_obj = o + d * np.where(np.isfinite(t_obj), t_obj, 0.0)[:, None]
    if spec.plane_texture == "checker":
        regions[hit_bg] = np.where(_checker(p_bg[hit_bg], spec.checker_size), PLANE_LIGHT, PLANE_DARK)
    else:
        regions[hit_bg] = PLANE_LIGHT
    if spec.object_texture == "stripes":
        stripe = np.floor((p_obj[:, 2] - spec.object_center[2]) / 0.1).astype(np.int64) % 2 == 0
        regions[obj] = np.where(stripe[obj], OBJECT, OBJECT_ALT)
    else:
        regions[obj] = OBJECT
    if spec.straddle:
        band = obj & (p_obj[:, 2] < spec.object_center[2] - spec.straddle_band)
        rho = np.hypot(p_bg[:, 0] - spec.object_center[0], p_bg[:, 1] - spec.object_center[1])
        ring = hit_bg & (rho >= spec.straddle_ring[0]) & (rho <= spec.straddle_ring[1])
        regions[band] = STRADDLE_FG
        regions[ring] = STRADDLE_BG
    normals[obj] = n_obj[obj]
    normals[hit_bg] = n_bg[hit_bg]

    light = np.asarray(spec.light_dir, dtype=np.float64)
    light /= np.linalg.norm(light)
    albedo = np.array([ALBEDO[r] for r in range(len(REGION_NAMES))])[regions]
    lambert = np.clip(normals @ light, 0.0, None)
    if spec.shadows:
        surf = np.where(obj[:, None], p_obj, p_bg)
        lit = obj | hit_bg
        t_sh, _ = _object_hits(spec, surf + 1e-6 * normals, np.broadcast_to(light, surf.shape).copy())
        shadowed = lit & ~obj & np.isfinite(t_sh)
        lambert = np.where(shadowed, 0.0, lambert)
    shade = spec.ambient + (1.0 - spec.ambient) * lambert
    rgb = np.where((obj | hit_bg)[:, None], albedo * shade[:, None], albedo)
    depth = np.stack([np.where(np.isfinite(t_obj), t_obj, np.inf), np.where(np.isfinite(t_bg), t_bg, np.inf)])
    return rgb.reshape(h, w, 3), depth.reshape(2, h, w), regions.reshape(h, w)


def generate_scene(spec: SceneSpec) -> SyntheticDataset:
    cams = make_cameras(spec)
    _validate(spec, cams)
    n = len(cams)
    seeds = np.random.SeedSequence(spec.seed).spawn(n)
    means = _region_means(spec)
    salient_straddle = _straddle_salient(spec, n)
    images, depths, regions, masks, descs = [], [], [], [], []
    for i, cam in enumerate(cams):
        rgb, depth, reg = render_view(spec, cam)
        images.append(np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8))
        depths.append(depth)
        regions.append(reg)
        masks.append(depth[0] < depth[1])
        rng = np.random.default_rng(seeds[i])
        desc = means[reg] + rng.normal(size=reg.shape + (spec.descriptor_dim,))
        fg = np.isin(reg, FOREGROUND_REGIONS)
        sal = np.where(fg, spec.saliency_fg, spec.saliency_bg)
        if spec.straddle:
            in_class = np.isin(reg, STRADDLE_CLASS)
            sal = np.where(in_class, spec.saliency_fg if salient_straddle[i] else spec.saliency_bg, sal)
        sal = np.clip(sal + spec.saliency_noise * rng.normal(size=reg.shape), 0.0, 1.0)
        descs.append(DescriptorMap(desc.astype(np.float32), sal.astype(np.float32), i, 0))
    train, test = split_views(n, spec.test_fraction)
    return SyntheticDataset(
        spec=spec,
        cameras=cams,
        images=np.stack(images),
        masks_gt=np.stack(masks),
        depth=np.stack(depths),
        regions=np.stack(regions),
        descriptors=descs,
        train_idx=train,
        test_idx=test,
    )


# ---------------------------------------------------------------- persistence


def _png_write(path: Path, arr: np.ndarray, mode: str | None = None, palette: bool = False):
    img = Image.fromarray(arr, mode=mode) if mode else Image.fromarray(arr)
    if palette:
        img = Image.fromarray(arr.astype(np.uint8), mode="P")
        img.putpalette(_label_palette())
    img.save(path, format="PNG", optimize=False)


def _label_palette() -> list[int]:
    rng = np.random.default_rng(12345)
    pal = rng.integers(40, 256, size=(256, 3))
    pal[255] = 0
    return pal.reshape(-1).tolist()


def _png_read(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.array(img)


def save_dataset(ds: SyntheticDataset, path) -> Path:
    root = Path(path)
    for sub in ("images", "masks_gt", "descriptors", "depth", "regions"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for i in range(ds.n_views):
        _png_write(root / "images" / f"{i:04d}.png", ds.images[i])
        _png_write(root / "masks_gt" / f"{i:04d}.png", ds.masks_gt[i].astype(np.uint8) * 255)
        _png_write(root / "regions" / f"{i:04d}.png", ds.regions[i])
        np.save(root / "depth" / f"{i:04d}.npy", ds.depth[i])
        write_descriptor_map(root / "descriptors" / f"{i:04d}.bin", ds.descriptors[i])
    if ds.masks is not None:
        save_masks(root, ds.masks, ds.mask_params)
    (root / "cameras.json").write_text(json.dumps([c.to_dict() for c in ds.cameras], indent=1) + "\n")
    sphere = ds.sphere
    (root / "sphere.json").write_text(json.dumps({"center": sphere.center.tolist(), "radius": sphere.radius}) + "\n")
    manifest = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "n_views": ds.n_views,
        "height": int(ds.image_shape[0]),
        "width": int(ds.image_shape[1]),
        "train": ds.train_idx,
        "test": ds.test_idx,
        "reference_view": ds.reference_view,
        "has_masks": ds.masks is not None,
        "mask_params": ds.mask_params,
        "spec": ds.spec.to_dict(),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return root


def save_masks(root, masks: Sequence[MaskSet], params: dict | None = None) -> None:
    root = Path(root)
    (root / "masks_coarse").mkdir(parents=True, exist_ok=True)
    (root / "masks_cluster").mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(masks):
        _png_write(root / "masks_coarse" / f"{i:04d}.png", m.coarse.astype(np.uint8) * 255)
        _png_write(root / "masks_cluster" / f"{i:04d}.png", m.clusters, palette=True)
    manifest_path = root / "manifest.json"
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        manifest["has_masks"] = True
        manifest["mask_params"] = dict(params or {})
        manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _require(path: Path) -> Path:
    if not path.exists():
        raise DatasetIOError(f"missing dataset artifact: {path}")
    return path


def load_manifest(root) -> dict:
    manifest = json.loads(_require(Path(root) / "manifest.json").read_text())
    if manifest.get("format") != DATASET_FORMAT:
        raise DatasetIOError(f"{root}: not a {DATASET_FORMAT} directory")
    major = int(str(manifest.get("version", "0")).split(".")[0])
    supported = int(DATASET_VERSION.split(".")[0])
    if major > supported:
        raise DatasetVersionError(
            f"dataset version {manifest['version']} is newer than supported version {DATASET_VERSION}"
        )
    return manifest


def load_dataset(path, require_masks: bool = False) -> SyntheticDataset:
    root = Path(path)
    manifest = load_manifest(root)
    n = int(manifest["n_views"])
    cams_raw = json.loads(_require(root / "cameras.json").read_text())
    _require(root / "sphere.json")
    images, masks_gt, depth, regions, descs = [], [], [], [], []
    for i in range(n):
        name = f"{i:04d}"
        images.append(_png_read(_require(root / "images" / f"{name}.png")))
        masks_gt.append(_png_read(_require(root / "masks_gt" / f"{name}.png")) > 127)
        regions.append(_png_read(_require(root / "regions" / f"{name}.png")))
        depth.append(np.load(_require(root / "depth" / f"{name}.npy")))
        descs.append(read_descriptor_map(_require(root / "descriptors" / f"{name}.bin")))
    masks = None
    if manifest.get("has_masks") or require_masks:
        masks = load_masks(root, n)
    return SyntheticDataset(
        spec=SceneSpec.from_dict(manifest["spec"]),
        cameras=[Camera.from_dict(c) for c in cams_raw],
        images=np.stack(images),
        masks_gt=np.stack(masks_gt),
        depth=np.stack(depth),
        regions=np.stack(regions),
        descriptors=descs,
        train_idx=list(manifest["train"]),
        test_idx=list(manifest["test"]),
        masks=masks,
        mask_params=manifest.get("mask_params", {}),
        reference_view=int(manifest.get("reference_view", 0)),
    )


def load_masks(root, n: int) -> list[MaskSet]:
    root = Path(root)
    out = []
    for i in range(n):
        coarse = _png_read(_require(root / "masks_coarse" / f"{i:04d}.png")) > 127
        clusters = _png_read(_require(root / "masks_cluster" / f"{i:04d}.png"))
        out.append(MaskSet(coarse, clusters))
    return out


def build_masks(ds: SyntheticDataset, k: int = 16, seed: int = 0, vote_threshold: float = 0.5,
                seg_noise: float = 0.0, cls_noise: float = 0.0, noise_seed: int = 0,
                erase_fg: float = 0.0) -> tuple[SyntheticDataset, list[str]]:
    """Coarse and cluster masks for every view, each paired with the reference view.

    Optional corruptions: ``erase_fg`` clears that fraction of each coarse mask's
    foreground pixels; ``seg_noise``/``cls_noise`` flip mask pixels and reassign labels.
    """
    from .maskgen import erase_foreground, inject_mask_noise, make_mask_set

    ref = ds.descriptors[ds.reference_view]
    masks, statuses = [], []
    for i, dm in enumerate(ds.descriptors):
        m, status = make_mask_set(dm, ref, k, seed + i, vote_threshold)
        if erase_fg > 0:
            m = MaskSet(erase_foreground(m.coarse, erase_fg, seed=noise_seed * 100003 + i), m.clusters)
        if seg_noise > 0 or cls_noise > 0:
            m = inject_mask_noise(m, seg_noise, cls_noise, seed=noise_seed * 100003 + i)
        masks.append(m)
        statuses.append(status)
    params = {"k": k, "seed": seed, "vote_threshold": vote_threshold, "seg_noise": seg_noise,
              "cls_noise": cls_noise, "noise_seed": noise_seed, "erase_fg": erase_fg}
    return ds.with_masks(masks, params), statuses
