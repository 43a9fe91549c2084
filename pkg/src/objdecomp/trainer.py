"""Two-stage optimization of the foreground/background fields and decomposed outputs."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .diffcore import io as ckio
from .diffcore import tape as T
from .diffcore.nn import ParamSet
from .diffcore.optim import AdamState, adam_step, lr_schedule
from .diffcore.tape import NumericError
from .fields import (
    BackgroundField,
    FieldConfig,
    ForegroundField,
    SphereAnnotation,
    background_specs,
    foreground_specs,
    make_background,
    make_foreground,
)
from .geometry import TriangleMesh, marching_cubes, sample_sdf_grid
from .rendering import Camera, RenderConfig, SamplingConfig, generate_rays, render_image, render_rays
from .scenes import SyntheticDataset
from .supervision import (
    FgRegParams,
    LossWeights,
    binary_mask_loss,
    cluster_mask_loss,
    color_loss,
    eikonal_loss,
    fg_reg_loss,
    total_loss,
)

log = logging.getLogger(__name__)

STRATEGIES = ("s0", "s1", "s2", "s3")
CHECKPOINT_VERSION = 1


class TrainConfigError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    """Non-finite loss or gradient; carries the last good checkpoint and a diagnostic."""

    def __init__(self, message: str, checkpoint: "Checkpoint", term: str | None, diagnostics_path: Path | None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.term = term
        self.diagnostics_path = diagnostics_path


@dataclass(frozen=True)
class TrainConfig:
    iters: int = 7000
    stage2_start: int = 5000
    rays: int = 512
    weights: LossWeights = LossWeights()
    fg_reg: FgRegParams = FgRegParams()
    sampling: SamplingConfig = SamplingConfig()
    fields: FieldConfig = FieldConfig()
    warmup_iters: int = 175
    lr_max: float = 5e-4
    lr_min: float = 2.5e-5
    seed: int = 0
    fgmask_mode: str = "composed"
    strategy: str = "s3"
    cls_average: bool = False
    log_every: int = 10

    def __post_init__(self):
        if self.iters < 0 or self.rays < 1:
            raise TrainConfigError("iters must be >= 0 and rays >= 1")
        if not 0 <= self.stage2_start:
            raise TrainConfigError("stage2_start must be >= 0")
        if self.strategy not in STRATEGIES:
            raise TrainConfigError(f"unknown strategy {self.strategy!r}")
        if self.warmup_iters < 0 or self.log_every < 1:
            raise TrainConfigError("warmup_iters must be >= 0 and log_every >= 1")
        RenderConfig(self.sampling, self.fgmask_mode)

    @property
    def render(self) -> RenderConfig:
        return RenderConfig(self.sampling, self.fgmask_mode)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        nested = {"weights": LossWeights, "fg_reg": FgRegParams, "sampling": SamplingConfig, "fields": FieldConfig}
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise TrainConfigError(f"unknown train key(s): {', '.join(unknown)}")
        kw = {}
        for k, v in d.items():
            if k in nested:
                sub = {f.name for f in fields(nested[k])}
                bad = sorted(set(v) - sub)
                if bad:
                    raise TrainConfigError(f"unknown {k} key(s): {', '.join(bad)}")
                v = nested[k](**v)
            kw[k] = v
        return cls(**kw)

    def hash(self) -> str:
        """Identity of everything that shapes the optimization path except its length."""
        d = self.to_dict()
        for k in ("iters", "log_every"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def ablation_mode(cfg: TrainConfig, mode: str) -> TrainConfig:
    """Training strategy: s0 no mask losses, s1 binary only, s2 cluster from scratch, s3 staged."""
    if mode not in STRATEGIES:
        raise TrainConfigError(f"unknown strategy {mode!r}")
    return replace(cfg, strategy=mode)


def effective_weights(cfg: TrainConfig, iteration: int) -> tuple[LossWeights, str]:
    """Loss weights and stage in force at ``iteration`` under the configured strategy."""
    w = cfg.weights
    stage = "stage2" if iteration >= cfg.stage2_start else "stage1"
    if cfg.strategy == "s0":
        return replace(w, seg=0.0, cls=0.0), stage
    if cfg.strategy == "s1":
        return replace(w, cls=0.0), stage
    if cfg.strategy == "s2":
        return replace(w, seg=0.0), "stage2"
    return w, stage


# ---------------------------------------------------------------- checkpoint


@dataclass
class Checkpoint:
    fg: ForegroundField
    bg: BackgroundField
    adam_fg: AdamState
    adam_bg: AdamState
    iteration: int
    config: TrainConfig

    @property
    def config_hash(self) -> str:
        return self.config.hash()

    @property
    def stage(self) -> str:
        return effective_weights(self.config, self.iteration)[1]

    def save(self, path) -> Path:
        arrays = {}
        arrays.update(ckio.pack_params("fg", self.fg.params))
        arrays.update(ckio.pack_params("bg", self.bg.params))
        a_fg, m_fg = ckio.pack_adam("adam_fg", self.adam_fg)
        a_bg, m_bg = ckio.pack_adam("adam_bg", self.adam_bg)
        arrays.update(a_fg)
        arrays.update(a_bg)
        meta = {
            "version": CHECKPOINT_VERSION,
            "iteration": self.iteration,
            "stage": self.stage,
            "config": self.config.to_dict(),
            "config_hash": self.config_hash,
            "adam_fg": m_fg,
            "adam_bg": m_bg,
            "specs": {
                "sdf": self.fg.sdf_spec.to_dict(),
                "fg_color": self.fg.color_spec.to_dict(),
                "density": self.bg.density_spec.to_dict(),
                "bg_color": self.bg.color_spec.to_dict(),
            },
        }
        return ckio.save_arrays(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        arrays, meta = ckio.load_arrays(path)
        if meta.get("version", 0) > CHECKPOINT_VERSION:
            raise IOError(f"{path}: checkpoint version {meta.get('version')} is newer than supported")
        cfg = TrainConfig.from_dict(meta["config"])
        sdf_spec, fg_color = foreground_specs(cfg.fields)
        dens_spec, bg_color = background_specs(cfg.fields)
        fg = ForegroundField(cfg.fields, sdf_spec, fg_color, ckio.unpack_params("fg", arrays))
        bg = BackgroundField(cfg.fields, dens_spec, bg_color, ckio.unpack_params("bg", arrays))
        return cls(
            fg, bg,
            ckio.unpack_adam("adam_fg", arrays, meta["adam_fg"]),
            ckio.unpack_adam("adam_bg", arrays, meta["adam_bg"]),
            int(meta["iteration"]), cfg,
        )


def init_checkpoint(cfg: TrainConfig) -> Checkpoint:
    rng = np.random.default_rng(cfg.seed)
    fg = make_foreground(cfg.fields, rng)
    bg = make_background(cfg.fields, rng)
    return Checkpoint(fg, bg, AdamState.zeros_like(fg.params), AdamState.zeros_like(bg.params), 0, cfg)


# ---------------------------------------------------------------- training


def _iteration_seed(seed: int, iteration: int) -> int:
    return int(np.random.SeedSequence([seed, iteration]).generate_state(1)[0])


def _batch(ds: SyntheticDataset, cfg: TrainConfig, iteration: int, valid: Sequence[np.ndarray] | None):
    rng = np.random.default_rng([cfg.seed, iteration])
    view = int(rng.choice(ds.train_idx))
    h, w = ds.image_shape
    allowed = np.arange(h * w) if valid is None else np.flatnonzero(np.asarray(valid[view]).reshape(-1))
    pix = rng.choice(allowed, size=min(cfg.rays, len(allowed)), replace=False)
    pix.sort()
    uv = np.stack([pix % w + 0.5, pix // w + 0.5], axis=-1)
    rays = generate_rays(ds.cameras[view], uv, ds.sphere)
    gt = ds.images[view].reshape(-1, 3)[pix].astype(np.float64) / 255.0
    coarse = ds.masks[view].coarse.reshape(-1)[pix]
    labels = ds.masks[view].clusters.reshape(-1)[pix]
    return view, pix, rays, gt, coarse, labels


def loss_parts(result, gt, coarse, labels, cfg: TrainConfig) -> dict:
    parts = {
        "color": color_loss(result.color, gt),
        "eik": eikonal_loss(result.extras["normals"]) if result.extras.get("normals") is not None else T.constant(0.0),
        "fg": fg_reg_loss(result.fg_weight, cfg.fg_reg),
        "seg": binary_mask_loss(result.fg_weight, coarse),
        "cls": cluster_mask_loss(result.fg_weight, labels, average=cfg.cls_average),
    }
    return parts


def train(
    ds: SyntheticDataset,
    cfg: TrainConfig,
    resume: Checkpoint | None = None,
    out_dir: str | Path | None = None,
    valid_masks: Sequence[np.ndarray] | None = None,
    callback: Callable[[dict], None] | None = None,
) -> tuple[Checkpoint, list[dict]]:
    """Run the optimization loop up to ``cfg.iters`` iterations.

    Writes ``metrics.jsonl``, ``ckpt_stage1.npz`` (at the stage boundary) and
    ``ckpt.npz`` into ``out_dir`` when given.
    """
    if ds.masks is None:
        raise TrainConfigError("the dataset has no coarse/cluster masks; run mask generation first")
    ckpt = resume if resume is not None else init_checkpoint(cfg)
    if resume is not None and resume.config_hash != cfg.hash():
        raise TrainConfigError("checkpoint config hash does not match the training config")
    ckpt = replace(ckpt, config=cfg)
    out = Path(out_dir) if out_dir is not None else None
    metrics_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_file = open(out / "metrics.jsonl", "a" if resume is not None else "w")
    records: list[dict] = []
    fg, bg = ckpt.fg, ckpt.bg
    adam_fg, adam_bg = ckpt.adam_fg, ckpt.adam_bg
    render_cfg = cfg.render
    n_pix = int(np.prod(ds.image_shape))
    try:
        for it in range(ckpt.iteration, cfg.iters):
            if out is not None and it == cfg.stage2_start and it > 0:
                Checkpoint(fg, bg, adam_fg, adam_bg, it, cfg).save(out / "ckpt_stage1.npz")
            weights, stage = effective_weights(cfg, it)
            lr = lr_schedule(it, cfg.warmup_iters, max(cfg.iters, cfg.warmup_iters + 1), cfg.lr_max, cfg.lr_min)
            view, pix, rays, gt, coarse, labels = _batch(ds, cfg, it, valid_masks)
            p_fg, p_bg = fg.params.tensors(), bg.params.tensors()
            try:
                result = render_rays(rays, fg, bg, render_cfg, seed=_iteration_seed(cfg.seed, it),
                                     ray_ids=view * n_pix + pix, p_fg=p_fg, p_bg=p_bg)
                parts = loss_parts(result, gt, coarse, labels, cfg)
                total = total_loss(parts, weights, stage)
                grads = T.gradient(total, {**{"fg/" + k: v for k, v in p_fg.items()},
                                           **{"bg/" + k: v for k, v in p_bg.items()}})
                g_fg = {k: grads["fg/" + k] for k in fg.params}
                g_bg = {k: grads["bg/" + k] for k in bg.params}
                new_fg, adam_fg_n = adam_step(fg.params, g_fg, adam_fg, lr)
                new_bg, adam_bg_n = adam_step(bg.params, g_bg, adam_bg, lr)
            except NumericError as err:
                last = Checkpoint(fg, bg, adam_fg, adam_bg, it, cfg)
                diag = None
                if out is not None:
                    last.save(out / "ckpt.npz")
                    diag = out / "diagnostics.json"
                    diag.write_text(json.dumps({"iteration": it, "term": err.name, "message": str(err)}, indent=2) + "\n")
                raise TrainingAborted(f"non-finite value at iteration {it}: {err}", last, err.name, diag) from err
            fg, bg = fg.with_params(new_fg), bg.with_params(new_bg)
            adam_fg, adam_bg = adam_fg_n, adam_bg_n
            if it % cfg.log_every == 0 or it == cfg.iters - 1:
                gamma_cls = weights.cls if stage == "stage2" else 0.0
                rec = {
                    "iter": it,
                    "lr": lr,
                    "stage": stage,
                    **{f"l_{k}": float(v.value) for k, v in parts.items()},
                    "c_cls": gamma_cls * float(parts["cls"].value),
                    "total": float(total.value),
                    "beta": fg.beta,
                }
                records.append(rec)
                if metrics_file is not None:
                    metrics_file.write(json.dumps(rec) + "\n")
                if callback is not None:
                    callback(rec)
    finally:
        if metrics_file is not None:
            metrics_file.close()
    final = Checkpoint(fg, bg, adam_fg, adam_bg, max(cfg.iters, ckpt.iteration), cfg)
    if out is not None:
        final.save(out / "ckpt.npz")
    return final, records


# ---------------------------------------------------------------- outputs


def render_views(ckpt: Checkpoint, cameras: Sequence[Camera], sphere: SphereAnnotation,
                 render_cfg: RenderConfig | None = None, background_only: bool = True) -> list[dict]:
    """Full-frame composed color, W_f and W maps, plus the background-only color."""
    cfg = render_cfg or ckpt.config.render
    out = []
    for cam in cameras:
        view = render_image(cam, ckpt.fg, ckpt.bg, sphere, cfg)
        if background_only:
            view["background"] = render_image(cam, ckpt.fg, ckpt.bg, sphere, cfg, ablate_fg=True)["color"]
        out.append(view)
    return out


def extract_object_mesh(ckpt: Checkpoint, n: int = 128) -> TriangleMesh:
    """Marching cubes on the foreground SDF, restricted to the unit sphere (normalized units)."""
    from .fields import foreground_sdf

    grid = sample_sdf_grid(lambda x: np.maximum(foreground_sdf(ckpt.fg, x), np.linalg.norm(x, axis=-1) - 1.0), n)
    mesh = marching_cubes(grid)
    if mesh.is_empty:
        log.warning("foreground SDF has no zero crossing; mesh is empty")
    return mesh


def predicted_masks(views: Sequence[dict], threshold: float = 0.5) -> list[np.ndarray]:
    return [v["fg_weight"] > threshold for v in views]


def evaluate(ckpt: Checkpoint, ds: SyntheticDataset, views: Sequence[int] | None = None,
             mesh_n: int | None = 64, n_points: int = 20000, render_cfg: RenderConfig | None = None) -> dict:
    """Test-view foreground mIoU and, optionally, object-mesh Chamfer distance."""
    from .geometry import chamfer_distance, mean_iou, sample_mesh_points
    from .scenes import object_surface_points

    idx = list(ds.test_idx if views is None else views)
    rendered = render_views(ckpt, [ds.cameras[i] for i in idx], ds.sphere, render_cfg, background_only=False)
    m, per_view = mean_iou(predicted_masks(rendered), [ds.masks_gt[i] for i in idx])
    report = {"miou": m, "per_view": [{"view": i, "iou": v} for i, v in zip(idx, per_view)], "cd": None}
    if mesh_n:
        mesh = extract_object_mesh(ckpt, mesh_n)
        if not mesh.is_empty:
            pred = sample_mesh_points(mesh, n_points, seed=0)
            ref = ds.sphere.normalize(object_surface_points(ds.spec, n_points, seed=1))
            report["cd"] = chamfer_distance(pred, ref)
    return report
