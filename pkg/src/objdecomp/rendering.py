"""Ray casting, hierarchical sampling, max composition and volume integration."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Protocol

import numpy as np

from .diffcore import tape as T
from .diffcore.tape import Tensor
from .fields import (
    BackgroundField,
    ForegroundField,
    SphereAnnotation,
    background_forward,
    background_input,
    foreground_beta,
    foreground_forward,
    foreground_sdf,
    opaque_density,
)

FAR_DT = 1e10


@dataclass(frozen=True)
class Camera:
    """Pinhole camera, OpenCV axes (x right, y down, z forward), ``c2w`` world-from-camera."""

    fx: float
    fy: float
    cx: float
    cy: float
    c2w: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        c2w = np.asarray(self.c2w, dtype=np.float64)
        if c2w.shape != (4, 4):
            raise ValueError("c2w must be 4x4")
        R = c2w[:3, :3]
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-8):
            raise ValueError("camera rotation is not orthonormal")
        object.__setattr__(self, "c2w", c2w)

    @property
    def center(self) -> np.ndarray:
        return self.c2w[:3, 3]

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "c2w": self.c2w.reshape(-1).tolist(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Camera":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], np.asarray(d["c2w"], dtype=np.float64).reshape(4, 4),
                   int(d["width"]), int(d["height"]))


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    c2w = np.eye(4)
    c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = right, down, forward, eye
    return c2w


def pixel_centers(camera: Camera) -> np.ndarray:
    """Continuous (u, v) coordinates of every pixel center, row-major."""
    v, u = np.mgrid[0 : camera.height, 0 : camera.width]
    return np.stack([u.ravel() + 0.5, v.ravel() + 0.5], axis=-1).astype(np.float64)


@dataclass
class RayBatch:
    """Rays in normalized coordinates (annotation sphere = unit sphere at origin)."""

    origins: np.ndarray
    dirs: np.ndarray
    t_near: np.ndarray
    t_far: np.ndarray
    hit: np.ndarray

    def __len__(self) -> int:
        return len(self.origins)

    def subset(self, idx) -> "RayBatch":
        return RayBatch(self.origins[idx], self.dirs[idx], self.t_near[idx], self.t_far[idx], self.hit[idx])


def intersect_unit_sphere(origins: np.ndarray, dirs: np.ndarray):
    b = np.einsum("ij,ij->i", origins, dirs)
    c = np.einsum("ij,ij->i", origins, origins) - 1.0
    disc = b * b - c
    root = np.sqrt(np.maximum(disc, 0.0))
    t_far = -b + root
    hit = (disc >= 0.0) & (t_far > 0.0)
    t_near = np.maximum(-b - root, 0.0)
    closest = np.maximum(-b, 0.0)
    t_near = np.where(hit, t_near, closest)
    t_far = np.where(hit, t_far, closest)
    return t_near, t_far, hit


def generate_rays(camera: Camera, uv: np.ndarray, sphere: SphereAnnotation = SphereAnnotation()) -> RayBatch:
    uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
    if np.any(uv < 0) or np.any(uv[:, 0] > camera.width) or np.any(uv[:, 1] > camera.height):
        raise ValueError("pixel coordinates outside the image")
    local = np.stack([(uv[:, 0] - camera.cx) / camera.fx, (uv[:, 1] - camera.cy) / camera.fy, np.ones(len(uv))], -1)
    dirs = local @ camera.c2w[:3, :3].T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(sphere.normalize(camera.center), dirs.shape).copy()
    t_near, t_far, hit = intersect_unit_sphere(origins, dirs)
    return RayBatch(origins, dirs, t_near, t_far, hit)


# ---------------------------------------------------------------- sampling


@dataclass(frozen=True)
class SamplingConfig:
    n_uniform: int = 64
    n_importance: int = 16
    importance_iters: int = 4
    n_outside: int = 64
    base_inv_s: float = 64.0


@dataclass
class SampleSet:
    hit_idx: np.ndarray  # rays with an inside segment
    t_in: np.ndarray  # (n_hit, S_in), sorted
    dt_in: np.ndarray
    t_out: np.ndarray  # (n_rays, S_out), sorted
    dt_out: np.ndarray


def ray_uniforms(seed: int, ray_ids: np.ndarray, n: int, stream: int = 0) -> np.ndarray:
    """Counter-based uniforms in [0, 1): depend only on (seed, ray id, slot, stream)."""
    ids = np.asarray(ray_ids, dtype=np.uint64)[:, None]
    slot = np.arange(n, dtype=np.uint64)[None, :]
    with np.errstate(over="ignore"):
        x = (np.uint64(seed) * np.uint64(0x9E3779B97F4A7C15)) ^ (ids * np.uint64(0xBF58476D1CE4E5B9))
        x = x + slot * np.uint64(0x94D049BB133111EB) + np.uint64(stream) * np.uint64(0xD6E8FEB86659FD93)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        x = x ^ (x >> np.uint64(31))
    return (x >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def sample_pdf(bins: np.ndarray, weights: np.ndarray, n_samples: int) -> np.ndarray:
    """Deterministic inverse-CDF sampling of a piecewise-constant pdf over ``bins``."""
    w = weights + 1e-5
    pdf = w / w.sum(axis=-1, keepdims=True)
    cdf = np.concatenate([np.zeros((len(w), 1)), np.cumsum(pdf, axis=-1)], axis=-1)
    u = np.broadcast_to(np.linspace(0.5 / n_samples, 1.0 - 0.5 / n_samples, n_samples), (len(w), n_samples))
    inds = np.empty(u.shape, dtype=np.int64)
    for r in range(len(w)):
        inds[r] = np.searchsorted(cdf[r], u[r], side="right")
    below = np.clip(inds - 1, 0, cdf.shape[-1] - 1)
    above = np.clip(inds, 0, cdf.shape[-1] - 1)
    cdf_lo = np.take_along_axis(cdf, below, -1)
    cdf_hi = np.take_along_axis(cdf, above, -1)
    bin_lo = np.take_along_axis(bins, below, -1)
    bin_hi = np.take_along_axis(bins, above, -1)
    denom = cdf_hi - cdf_lo
    denom = np.where(denom < 1e-5, 1.0, denom)
    return bin_lo + (u - cdf_lo) / denom * (bin_hi - bin_lo)


def _importance_weights(t: np.ndarray, sdf: np.ndarray, inv_s: float) -> np.ndarray:
    """Per-interval render weights of an SDF profile at a fixed sharpness."""
    prev_s, next_s = sdf[:, :-1], sdf[:, 1:]
    dist = t[:, 1:] - t[:, :-1]
    mid = 0.5 * (prev_s + next_s)
    slope = (next_s - prev_s) / (dist + 1e-5)
    prev_slope = np.concatenate([np.zeros((len(t), 1)), slope[:, :-1]], axis=-1)
    slope = np.clip(np.minimum(prev_slope, slope), -1e3, 0.0)
    cdf_prev = T.np_sigmoid((mid - slope * dist * 0.5) * inv_s)
    cdf_next = T.np_sigmoid((mid + slope * dist * 0.5) * inv_s)
    alpha = (cdf_prev - cdf_next + 1e-5) / (cdf_prev + 1e-5)
    trans = np.cumprod(np.concatenate([np.ones((len(t), 1)), 1.0 - alpha + 1e-7], axis=-1), axis=-1)[:, :-1]
    return alpha * trans


def _sdf_callable(fg):
    if isinstance(fg, ForegroundField):
        return lambda x: foreground_sdf(fg, x)
    if hasattr(fg, "sdf"):
        return fg.sdf
    return fg


def sample_hierarchical(rays: RayBatch, fg, cfg: SamplingConfig = SamplingConfig(), seed: int | None = None,
                        ray_ids: np.ndarray | None = None) -> SampleSet:
    """Uniform inside samples refined by importance rounds, plus inverse-depth outside samples.

    ``seed=None`` disables jitter. ``fg`` is a ForegroundField or any SDF callable.
    """
    sdf_fn = _sdf_callable(fg)
    n = len(rays)
    ray_ids = np.arange(n) if ray_ids is None else np.asarray(ray_ids)
    hit_idx = np.nonzero(rays.hit)[0]
    o, d = rays.origins[hit_idx], rays.dirs[hit_idx]
    near, far = rays.t_near[hit_idx, None], rays.t_far[hit_idx, None]
    nu = cfg.n_uniform
    frac = np.arange(nu)[None, :] / nu
    if seed is not None and len(hit_idx):
        frac = frac + ray_uniforms(seed, ray_ids[hit_idx], nu, stream=1) / nu
    t = near + (far - near) * frac

    if cfg.importance_iters > 0 and cfg.n_importance > 0 and len(hit_idx):
        sdf = sdf_fn((o[:, None, :] + d[:, None, :] * t[..., None]).reshape(-1, 3)).reshape(t.shape)
        for it in range(cfg.importance_iters):
            w = _importance_weights(t, sdf, cfg.base_inv_s * 2**it)
            new_t = sample_pdf(t, w, cfg.n_importance)
            t = np.concatenate([t, new_t], axis=-1)
            order = np.argsort(t, axis=-1, kind="stable")
            t = np.take_along_axis(t, order, -1)
            if it + 1 < cfg.importance_iters:
                new_sdf = sdf_fn((o[:, None, :] + d[:, None, :] * new_t[..., None]).reshape(-1, 3)).reshape(new_t.shape)
                sdf = np.take_along_axis(np.concatenate([sdf, new_sdf], axis=-1), order, -1)
    dt_in = np.diff(np.concatenate([t, far], axis=-1), axis=-1)

    no = cfg.n_outside
    start = np.where(rays.hit, rays.t_far, np.maximum(np.linalg.norm(rays.origins, axis=-1) - 1.0, 1e-3))
    edges = np.linspace(1.0, 1e-3, no + 1)
    if no > 0:
        if seed is None:
            inv = np.broadcast_to(edges[:-1], (n, no))
        else:
            jit = ray_uniforms(seed, ray_ids, no, stream=2)
            jit[:, 0] = 0.0  # keep the segment start covered
            inv = edges[None, :-1] + (edges[None, 1:] - edges[None, :-1]) * jit
        t_out = start[:, None] / inv
        dt_out = np.concatenate([np.diff(t_out, axis=-1), np.full((n, 1), FAR_DT)], axis=-1)
    else:
        t_out = np.zeros((n, 0))
        dt_out = np.zeros((n, 0))
    return SampleSet(hit_idx, t, dt_in, t_out, dt_out)


# ---------------------------------------------------------------- composition / integration


def compose_max(sigma_b, rho_f, c_b, c_f):
    """Point-wise max composition; ties go to the background."""
    sigma_b = np.asarray(sigma_b, dtype=np.float64)
    rho_f = np.asarray(rho_f, dtype=np.float64)
    fg_wins = rho_f > sigma_b
    sigma = np.where(fg_wins, rho_f, sigma_b)
    c = np.where(np.asarray(fg_wins)[..., None], np.asarray(c_f, dtype=np.float64), np.asarray(c_b, dtype=np.float64))
    if c.ndim and sigma.ndim == 0:
        c = c.reshape(-1)
    return sigma, c, fg_wins


def compose_max_tape(sigma_b: Tensor, rho_f: Tensor, c_b: Tensor, c_f: Tensor):
    """Tape version: the density gradient reaches only the winning branch."""
    fg_wins = rho_f.value > sigma_b.value
    sigma = T.where(fg_wins, rho_f, sigma_b)
    c = T.where(fg_wins[..., None], c_f, c_b)
    return sigma, c, fg_wins


@dataclass
class RenderResult:
    color: Tensor  # (B, 3)
    weight: Tensor  # (B,)
    fg_weight: Tensor
    bg_weight: Tensor
    extras: dict = field(default_factory=dict)

    def numpy(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k).value for k in ("color", "weight", "fg_weight", "bg_weight")}


def volume_render(sigma, dt, rgb, fg_mask) -> RenderResult:
    """Discrete volume rendering with alpha = 1 - exp(-sigma dt) and T_i = prod_{j<i} (1 - alpha_j).

    Inputs are (B, S) densities and intervals, (B, S, 3) colors, and a constant
    (B, S) boolean foreground indicator.
    """
    sigma, rgb = T.as_tensor(sigma), T.as_tensor(rgb)
    dt = np.asarray(dt, dtype=np.float64)
    fg_mask = np.asarray(fg_mask, dtype=bool)
    tau = sigma * dt
    alpha = 1.0 - T.exp(-tau)
    trans = T.exp(-T.cumsum_exclusive(tau, axis=-1))
    w = trans * alpha
    color = T.tsum(w.reshape(w.shape + (1,)) * rgb, axis=-2)
    fgm = fg_mask.astype(np.float64)
    w_f = T.tsum(w * fgm, axis=-1)
    w_b = T.tsum(w * (1.0 - fgm), axis=-1)
    total = w_f + w_b
    return RenderResult(color, total, w_f, w_b, {"weights": w, "transmittance": trans, "alpha": alpha})


@dataclass(frozen=True)
class RenderConfig:
    sampling: SamplingConfig = SamplingConfig()
    fgmask_mode: str = "composed"  # or "solo"

    def __post_init__(self):
        if self.fgmask_mode not in ("composed", "solo"):
            raise ValueError(f"unknown fgmask_mode {self.fgmask_mode!r}")


class ForegroundModel(Protocol):
    def sdf(self, x: np.ndarray) -> np.ndarray: ...
    def forward(self, x: np.ndarray, d: np.ndarray): ...
    def beta_tensor(self) -> Tensor: ...


class BackgroundModel(Protocol):
    def forward(self, x4: np.ndarray, d: np.ndarray): ...


@dataclass
class AnalyticSphereSdf:
    """Exact sphere SDF standing in for a foreground field (analysis and tests)."""

    radius: float = 0.5
    beta: float = 100.0
    rgb: tuple[float, float, float] = (0.0, 0.0, 1.0)
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def sdf(self, x):
        return np.linalg.norm(np.asarray(x) - np.asarray(self.center), axis=-1) - self.radius

    def forward(self, x, d):
        rel = np.asarray(x) - np.asarray(self.center)
        r = np.linalg.norm(rel, axis=-1)
        n = rel / np.maximum(r, 1e-12)[:, None]
        return T.constant(r - self.radius), T.constant(n), T.constant(np.broadcast_to(self.rgb, x.shape).copy())

    def beta_tensor(self):
        return T.constant(self.beta)


def _fg_eval(fg, x, d, p):
    if isinstance(fg, ForegroundField):
        s, n, c = foreground_forward(fg, x, d, p)
        return s, n, c, foreground_beta(fg, p)
    s, n, c = fg.forward(x, d)
    return s, n, c, fg.beta_tensor()


def _bg_eval(bg, x4, d, p):
    if isinstance(bg, BackgroundField):
        return background_forward(bg, x4, d, p)
    return bg.forward(x4, d)


def render_rays(
    rays: RayBatch,
    fg,
    bg,
    cfg: RenderConfig = RenderConfig(),
    seed: int | None = None,
    ray_ids: np.ndarray | None = None,
    p_fg: Mapping[str, Tensor] | None = None,
    p_bg: Mapping[str, Tensor] | None = None,
    ablate_fg: bool = False,
) -> RenderResult:
    """Sample, evaluate both fields, compose, and integrate a batch of rays.

    ``p_fg``/``p_bg`` are tape variables for the field parameters; without them
    the fields' current parameters enter as constants.
    """
    samples = sample_hierarchical(rays, fg, cfg.sampling, seed, ray_ids)
    n = len(rays)
    hit = samples.hit_idx
    n_hit, s_in = samples.t_in.shape
    s_out = samples.t_out.shape[1]

    x_in = (rays.origins[hit, None, :] + rays.dirs[hit, None, :] * samples.t_in[..., None]).reshape(-1, 3)
    d_in = np.repeat(rays.dirs[hit], s_in, axis=0)
    x_out = (rays.origins[:, None, :] + rays.dirs[:, None, :] * samples.t_out[..., None]).reshape(-1, 3)
    d_out = np.repeat(rays.dirs, s_out, axis=0)

    bg_sigma, bg_rgb = _bg_eval(bg, np.concatenate([background_input(x_in), background_input(x_out)]),
                                np.concatenate([d_in, d_out]), p_bg)
    k = len(x_in)
    sig_b_in = T.reshape(bg_sigma[:k], (n_hit, s_in))
    rgb_b_in = T.reshape(bg_rgb[:k], (n_hit, s_in, 3))
    sig_out = T.reshape(bg_sigma[k:], (n, s_out))
    rgb_out = T.reshape(bg_rgb[k:], (n, s_out, 3))

    extras = {"samples": samples}
    if ablate_fg or n_hit == 0:
        sigma_in, rgb_in = sig_b_in, rgb_b_in
        fg_in = np.zeros((n_hit, s_in), dtype=bool)
        normals = None
    else:
        s, normals, c_f, beta = _fg_eval(fg, x_in, d_in, p_fg)
        ds_dt = T.tsum(normals * d_in, axis=-1)
        rho = T.reshape(opaque_density(s, ds_dt, beta), (n_hit, s_in))
        sigma_in, rgb_in, fg_in = compose_max_tape(sig_b_in, rho, rgb_b_in, T.reshape(c_f, (n_hit, s_in, 3)))
        extras["rho"] = rho
        extras["sdf"] = s
    extras["normals"] = normals

    if n_hit == n:
        sig_full, rgb_full = sigma_in, rgb_in
    else:
        sig_full = T.scatter_rows(sigma_in, hit, n)
        rgb_full = T.scatter_rows(rgb_in, hit, n)
    fg_full = np.zeros((n, s_in), dtype=bool)
    fg_full[hit] = fg_in
    dt_full = np.zeros((n, s_in))
    dt_full[hit] = samples.dt_in

    sigma = T.concat([sig_full, sig_out], axis=1)
    rgb = T.concat([rgb_full, rgb_out], axis=1)
    dt = np.concatenate([dt_full, samples.dt_out], axis=1)
    fg_mask = np.concatenate([fg_full, np.zeros((n, s_out), dtype=bool)], axis=1)
    result = volume_render(sigma, dt, rgb, fg_mask)

    if cfg.fgmask_mode == "solo" and "rho" in extras:
        solo = volume_render(extras["rho"], samples.dt_in, T.constant(np.zeros((n_hit, s_in, 3))),
                             np.ones((n_hit, s_in), dtype=bool))
        w_f = T.scatter_rows(solo.fg_weight, hit, n) if n_hit != n else solo.fg_weight
        result = RenderResult(result.color, result.weight, w_f, result.weight - w_f, result.extras)
    result.extras.update(extras)
    return result


def render_pixel(rays: RayBatch, fg, bg, cfg: RenderConfig = RenderConfig(), **kw) -> RenderResult:
    """Render a single ray (a RayBatch of length 1)."""
    if len(rays) != 1:
        raise ValueError("render_pixel expects exactly one ray")
    return render_rays(rays, fg, bg, cfg, **kw)


def render_image(camera: Camera, fg, bg, sphere: SphereAnnotation, cfg: RenderConfig = RenderConfig(),
                 chunk: int = 2048, ablate_fg: bool = False) -> dict[str, np.ndarray]:
    """Full-frame render without gradients. Returns color (H, W, 3) and weight maps (H, W)."""
    rays = generate_rays(camera, pixel_centers(camera), sphere)
    h, w = camera.height, camera.width
    out = {"color": np.zeros((h * w, 3)), "weight": np.zeros(h * w), "fg_weight": np.zeros(h * w)}
    for start in range(0, len(rays), chunk):
        sl = slice(start, start + chunk)
        res = render_rays(rays.subset(sl), fg, bg, cfg, seed=None, ablate_fg=ablate_fg)
        out["color"][sl] = res.color.value
        out["weight"][sl] = res.weight.value
        out["fg_weight"][sl] = res.fg_weight.value
    return {
        "color": out["color"].reshape(h, w, 3),
        "weight": out["weight"].reshape(h, w),
        "fg_weight": out["fg_weight"].reshape(h, w),
    }
