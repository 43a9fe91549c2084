"""Foreground SDF field, background density field, and their input encodings."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from .diffcore import tape as T
from .diffcore.nn import MlpSpec, ParamSet, init_uniform, mlp_forward, mlp_forward_jac
from .diffcore.tape import Tensor


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class PositionalEncodingConfig:
    n_freqs: int
    include_input: bool = True

    def __post_init__(self):
        if self.n_freqs < 0:
            raise ValueError("n_freqs must be >= 0")

    def out_dim(self, in_dim: int) -> int:
        return in_dim * 2 * self.n_freqs + (in_dim if self.include_input else 0)


def positional_encode(p, cfg: PositionalEncodingConfig) -> np.ndarray:
    """``[p?, sin(2^0 pi p), cos(2^0 pi p), ..., sin(2^(L-1) pi p), cos(2^(L-1) pi p)]``."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 0:
        p = p[None]
    parts = [p] if cfg.include_input else []
    if cfg.n_freqs:
        # double-angle recurrence: one sin/cos pair, then products
        sin, cos = np.sin(math.pi * p), np.cos(math.pi * p)
        for k in range(cfg.n_freqs):
            if k:
                sin, cos = 2.0 * sin * cos, (cos - sin) * (cos + sin)
            parts.append(sin)
            parts.append(cos)
    if not parts:
        return np.zeros(p.shape[:-1] + (0,))
    return np.concatenate(parts, axis=-1)


def positional_encode_jacobian(p: np.ndarray, cfg: PositionalEncodingConfig) -> np.ndarray:
    """d encode(p) / d p with shape (N, D, out_dim)."""
    p = np.asarray(p, dtype=np.float64)
    n, dim = p.shape
    out = np.zeros((n, dim, cfg.out_dim(dim)))
    diag = np.arange(dim)
    col = 0
    if cfg.include_input:
        out[:, diag, diag] = 1.0
        col = dim
    if cfg.n_freqs:
        sin, cos = np.sin(math.pi * p), np.cos(math.pi * p)
        for k in range(cfg.n_freqs):
            if k:
                sin, cos = 2.0 * sin * cos, (cos - sin) * (cos + sin)
            w = (2.0**k) * math.pi
            out[:, diag, col + diag] = w * cos
            out[:, diag, col + dim + diag] = -w * sin
            col += 2 * dim
    return out


@dataclass(frozen=True)
class FieldConfig:
    sdf_width: int = 64
    sdf_depth: int = 4
    color_width: int = 64
    color_depth: int = 2
    bg_width: int = 64
    bg_depth: int = 4
    feature_dim: int = 16
    fg_pe_x: int = 6
    fg_pe_d: int = 4
    bg_pe_x: int = 10
    bg_pe_d: int = 4
    init_radius: float = 0.5
    inv_beta_init: float = 0.3
    beta_scale: float = 10.0
    softplus_beta: float = 100.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SphereAnnotation:
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    radius: float = 1.0

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"sphere radius must be positive, got {self.radius}")

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - np.asarray(self.center)) / self.radius

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.radius + np.asarray(self.center)


@dataclass
class ForegroundField:
    cfg: FieldConfig
    sdf_spec: MlpSpec
    color_spec: MlpSpec
    params: ParamSet

    @property
    def pe_x(self) -> PositionalEncodingConfig:
        return PositionalEncodingConfig(self.cfg.fg_pe_x)

    @property
    def pe_d(self) -> PositionalEncodingConfig:
        return PositionalEncodingConfig(self.cfg.fg_pe_d)

    @property
    def beta(self) -> float:
        return float(np.exp(self.cfg.beta_scale * self.params["beta"][0]))

    def with_params(self, params: ParamSet) -> "ForegroundField":
        return ForegroundField(self.cfg, self.sdf_spec, self.color_spec, params)


@dataclass
class BackgroundField:
    cfg: FieldConfig
    density_spec: MlpSpec
    color_spec: MlpSpec
    params: ParamSet

    @property
    def pe_x(self) -> PositionalEncodingConfig:
        return PositionalEncodingConfig(self.cfg.bg_pe_x)

    @property
    def pe_d(self) -> PositionalEncodingConfig:
        return PositionalEncodingConfig(self.cfg.bg_pe_d)

    def with_params(self, params: ParamSet) -> "BackgroundField":
        return BackgroundField(self.cfg, self.density_spec, self.color_spec, params)


def _fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    phi = math.pi * (1.0 + 5.0**0.5) * i
    r = np.sqrt(1.0 - z * z)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def foreground_specs(cfg: FieldConfig) -> tuple[MlpSpec, MlpSpec]:
    pe_x = PositionalEncodingConfig(cfg.fg_pe_x)
    pe_d = PositionalEncodingConfig(cfg.fg_pe_d)
    sdf = MlpSpec(
        widths=(pe_x.out_dim(3),) + (cfg.sdf_width,) * cfg.sdf_depth + (1 + cfg.feature_dim,),
        activations=("softplus",) * cfg.sdf_depth + ("linear",),
        outputs=(("sdf", 1), ("feature", cfg.feature_dim)),
        softplus_beta=cfg.softplus_beta,
        prefix="sdf.",
    )
    color_in = 3 + pe_d.out_dim(3) + 3 + cfg.feature_dim
    color = MlpSpec(
        widths=(color_in,) + (cfg.color_width,) * cfg.color_depth + (3,),
        activations=("relu",) * cfg.color_depth + ("sigmoid",),
        outputs=(("rgb", 3),),
        prefix="color.",
    )
    return sdf, color


def background_specs(cfg: FieldConfig) -> tuple[MlpSpec, MlpSpec]:
    pe_x = PositionalEncodingConfig(cfg.bg_pe_x)
    pe_d = PositionalEncodingConfig(cfg.bg_pe_d)
    density = MlpSpec(
        widths=(pe_x.out_dim(4),) + (cfg.bg_width,) * cfg.bg_depth + (1 + cfg.feature_dim,),
        activations=("relu",) * cfg.bg_depth + ("linear",),
        outputs=(("sigma", 1), ("feature", cfg.feature_dim)),
        prefix="density.",
    )
    color = MlpSpec(
        widths=(cfg.feature_dim + pe_d.out_dim(3), max(cfg.bg_width // 2, 1), 3),
        activations=("relu", "sigmoid"),
        outputs=(("rgb", 3),),
        prefix="color.",
    )
    return density, color


def make_foreground(cfg: FieldConfig, rng: np.random.Generator) -> ForegroundField:
    """Foreground field whose SDF starts close to ``|x| - init_radius``.

    The first layer projects x onto evenly spread unit directions, hidden layers
    start near identity, and the SDF readout is least-squares fitted to the
    target sphere on probe points. Encoded (sin/cos) inputs start disconnected.
    """
    sdf_spec, color_spec = foreground_specs(cfg)
    arrays = init_uniform(sdf_spec, rng)
    w = cfg.sdf_width
    first = np.zeros(sdf_spec.shapes()[sdf_spec.wname(0)])
    first[:3, :] = _fibonacci_sphere(w).T
    arrays[sdf_spec.wname(0)] = first
    arrays[sdf_spec.bname(0)] = np.zeros(w)
    jitter = 0.1 / math.sqrt(w)
    for i in range(1, cfg.sdf_depth):
        arrays[sdf_spec.wname(i)] = np.eye(w) + rng.uniform(-jitter, jitter, size=(w, w))
        arrays[sdf_spec.bname(i)] = np.zeros(w)
    last_w = sdf_spec.wname(cfg.sdf_depth)
    last_b = sdf_spec.bname(cfg.sdf_depth)
    arrays[last_w][:, 0] = 0.0
    arrays[last_b][:] = 0.0

    # fit the SDF readout to |x| - r on probe shells
    dirs = _fibonacci_sphere(200)
    radii = np.linspace(0.05, 1.0, 24)
    probe = (radii[:, None, None] * dirs[None]).reshape(-1, 3)
    hidden_spec = MlpSpec(
        widths=sdf_spec.widths[:-1] + (w,),
        activations=sdf_spec.activations[:-1] + ("linear",),
        softplus_beta=cfg.softplus_beta,
        prefix="sdf.",
    )
    tmp = ParamSet({k: v for k, v in arrays.items() if k in hidden_spec.shapes()} | {
        hidden_spec.wname(cfg.sdf_depth): np.eye(w), hidden_spec.bname(cfg.sdf_depth): np.zeros(w)})
    enc = positional_encode(probe, PositionalEncodingConfig(cfg.fg_pe_x))
    h = mlp_forward(hidden_spec, tmp, enc)
    target = np.linalg.norm(probe, axis=-1) - cfg.init_radius
    design = np.stack([h.sum(axis=1), np.ones(len(h))], axis=1)
    (scale, offset), *_ = np.linalg.lstsq(design, target, rcond=None)
    arrays[last_w][:, 0] = scale
    arrays[last_b][0] = offset

    arrays.update(init_uniform(color_spec, rng))
    arrays["beta"] = np.array([math.log(1.0 / cfg.inv_beta_init) / cfg.beta_scale])
    return ForegroundField(cfg, sdf_spec, color_spec, ParamSet(arrays))


def make_background(cfg: FieldConfig, rng: np.random.Generator) -> BackgroundField:
    density_spec, color_spec = background_specs(cfg)
    arrays = init_uniform(density_spec, rng)
    arrays.update(init_uniform(color_spec, rng))
    return BackgroundField(cfg, density_spec, color_spec, ParamSet(arrays))


# ---------------------------------------------------------------- evaluation


def _params(field, p):
    return field.params.constants() if p is None else p


def foreground_forward(field: ForegroundField, x: np.ndarray, d: np.ndarray, p: Mapping[str, Tensor] | None = None):
    """Tape evaluation: returns ``(sdf, normal, rgb)`` Tensors of shapes (N,), (N, 3), (N, 3)."""
    p = _params(field, p)
    x = np.asarray(x, dtype=np.float64)
    enc = positional_encode(x, field.pe_x)
    enc_jac = positional_encode_jacobian(x, field.pe_x)
    y, J = mlp_forward_jac(field.sdf_spec, p, enc, enc_jac, slice(0, 1))
    sdf = T.reshape(y[:, 0:1], (len(x),))
    feature = y[:, 1:]
    normal = T.reshape(J, (len(x), 3))
    color_in = T.concat([T.constant(x), T.constant(positional_encode(d, field.pe_d)), normal, feature], axis=-1)
    rgb = mlp_forward(field.color_spec, p, color_in)
    return sdf, normal, rgb


def foreground_beta(field: ForegroundField, p: Mapping[str, Tensor] | None = None) -> Tensor:
    p = _params(field, p)
    return T.exp(p["beta"] * field.cfg.beta_scale)


def foreground_sdf(field: ForegroundField, x: np.ndarray, chunk: int = 65536) -> np.ndarray:
    """SDF values only (no normals, no tape)."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    out = np.empty(len(x))
    for start in range(0, len(x), chunk):
        sl = slice(start, start + chunk)
        y = mlp_forward(field.sdf_spec, field.params, positional_encode(x[sl], field.pe_x))
        out[sl] = y[:, 0]
    return out


def _check_unit(d: np.ndarray):
    nrm = np.linalg.norm(d, axis=-1)
    if np.any(np.abs(nrm - 1.0) > 1e-6):
        raise ValueError("viewing directions must be unit vectors")


def foreground_eval(field: ForegroundField, x, d):
    """``(sdf, rgb, normal)`` as arrays; the normal is the exact input gradient of the SDF."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    d = np.atleast_2d(np.asarray(d, dtype=np.float64))
    _check_unit(d)
    s, n, c = foreground_forward(field, x, np.broadcast_to(d, x.shape))
    return s.value, c.value, n.value


def sdf_to_opaque_density(s, ds_dt, beta: float) -> np.ndarray:
    """``max(-dPhi/dt / Phi, 0)`` with ``Phi(s) = sigmoid(beta s)``.

    Using ``Phi' = beta Phi (1 - Phi)`` this is ``beta sigmoid(-beta s) max(-ds/dt, 0)``.
    """
    s = np.asarray(s, dtype=np.float64)
    ds_dt = np.asarray(ds_dt, dtype=np.float64)
    if s.shape != ds_dt.shape:
        raise ValueError("sdf and ds/dt sequences must have the same length")
    if not beta > 0:
        raise ValueError("beta must be positive")
    return beta * T.np_sigmoid(-beta * s) * np.maximum(-ds_dt, 0.0)


def opaque_density(s: Tensor, ds_dt: Tensor, beta: Tensor) -> Tensor:
    """Tape version of :func:`sdf_to_opaque_density`."""
    return beta * T.sigmoid(-(s * beta)) * T.relu(-ds_dt)


def invert_sphere_param(x) -> np.ndarray:
    """``(x / r, 1 / r)`` for points with ``r = |x| >= 1``."""
    x = np.asarray(x, dtype=np.float64)
    r = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(r < 1.0 - 1e-12):
        raise DomainError("inverted sphere parameterization needs |x| >= 1")
    return np.concatenate([x / r, 1.0 / r], axis=-1)


def background_input(x: np.ndarray) -> np.ndarray:
    """Inside the unit sphere points pass as ``(x, 1)``; outside they are inverted."""
    x = np.asarray(x, dtype=np.float64)
    r = np.linalg.norm(x, axis=-1, keepdims=True)
    rr = np.maximum(r, 1.0)
    return np.concatenate([x / rr, 1.0 / rr], axis=-1)


def background_forward(field: BackgroundField, x4: np.ndarray, d: np.ndarray, p: Mapping[str, Tensor] | None = None):
    """Tape evaluation on 4-D inputs: returns ``(sigma, rgb)``."""
    p = _params(field, p)
    enc = positional_encode(x4, field.pe_x)
    y = mlp_forward(field.density_spec, p, enc)
    sigma = T.reshape(T.softplus(y[:, 0:1]), (len(x4),))
    color_in = T.concat([y[:, 1:], T.constant(positional_encode(d, field.pe_d))], axis=-1)
    rgb = mlp_forward(field.color_spec, p, color_in)
    return sigma, rgb


def background_eval(field: BackgroundField, x, d):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    d = np.atleast_2d(np.asarray(d, dtype=np.float64))
    _check_unit(d)
    sigma, rgb = background_forward(field, background_input(x), np.broadcast_to(d, x.shape))
    return sigma.value, rgb.value
