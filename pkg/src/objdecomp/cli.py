"""Command-line entry point: gen-scene, make-masks, train, render, mesh, eval, report.

Exit codes: 0 success, 2 configuration error, 3 missing input, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .config import ConfigFileError, PRESETS, dump_config, load_config
from .diffcore.nn import ConfigError
from .fields import SphereAnnotation
from .geometry import mean_iou, write_metrics, write_obj
from .maskgen import DescriptorFormatError
from .scenes import (
    DatasetIOError,
    DatasetVersionError,
    SceneConfigError,
    build_masks,
    generate_scene,
    load_dataset,
    load_manifest,
    save_dataset,
    save_masks,
)
from .trainer import (
    Checkpoint,
    TrainConfigError,
    TrainingAborted,
    evaluate,
    extract_object_mesh,
    render_views,
    train,
)

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("objdecomp")


def _add_config(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="YAML run configuration (unknown keys are rejected)")
    p.add_argument("--preset", choices=sorted(PRESETS), default=None,
                   help="training preset applied before the config file's train section")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="objdecomp", description="Decomposed object reconstruction with "
                                     "compositional foreground/background neural fields")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="render a synthetic dataset")
    _add_config(p)
    p.add_argument("--out", required=True, help="dataset directory to write")
    p.add_argument("--seed", type=int, default=None, help="override scene.seed")
    p.add_argument("--straddle", action="store_true", help="enable the straddling shared-appearance class")

    p = sub.add_parser("make-masks", help="coarse and cluster masks from descriptor files")
    _add_config(p)
    p.add_argument("dataset", help="dataset directory")
    p.add_argument("--k", type=int, default=None, help="maximum cluster count (default 16)")
    p.add_argument("--seed", type=int, default=None, help="K-means seed")
    p.add_argument("--vote-threshold", type=float, default=None, help="saliency vote threshold")
    p.add_argument("--seg-noise", type=float, default=None, help="fraction of coarse-mask pixels to flip")
    p.add_argument("--cls-noise", type=float, default=None, help="fraction of cluster labels to reassign")
    p.add_argument("--noise-seed", type=int, default=None, help="seed of the injected noise")
    p.add_argument("--erase-fg", type=float, default=None, help="fraction of coarse foreground pixels to clear")

    p = sub.add_parser("train", help="optimize both fields")
    _add_config(p)
    p.add_argument("dataset", help="dataset directory (with masks)")
    p.add_argument("--out", required=True, help="run directory for checkpoints and metrics.jsonl")
    p.add_argument("--iters", type=int, default=None, help="override train.iters")
    p.add_argument("--stage2-start", type=int, default=None, help="override train.stage2_start")
    p.add_argument("--strategy", choices=["s0", "s1", "s2", "s3"], default=None, help="training strategy")
    p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--sphere-scale", type=float, default=1.0, help="scale the sphere annotation radius")
    p.add_argument("--sphere-offset", type=float, nargs=3, default=None, metavar=("DX", "DY", "DZ"),
                   help="shift the sphere annotation center (scene units)")
    p.add_argument("--deterministic", action="store_true",
                   help="single-worker, fixed-order reductions (the only mode on this build; accepted for scripts)")

    p = sub.add_parser("render", help="render composed, foreground-weight and background-only images")
    p.add_argument("dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--views", default="test", help="'test', 'train', 'all' or a comma list of view ids")

    p = sub.add_parser("mesh", help="extract the object mesh from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="OBJ path")
    p.add_argument("--n", type=int, default=128, help="grid resolution per axis")
    p.add_argument("--dataset", default=None, help="dataset whose sphere annotation maps back to scene units")

    p = sub.add_parser("eval", help="foreground mIoU (and object Chamfer distance) on test views")
    p.add_argument("dataset")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt", help="checkpoint to render and evaluate")
    src.add_argument("--pred-masks", help="directory of ####.png predicted masks (nonzero = foreground)")
    p.add_argument("--out", default=None, help="metrics JSON path")
    p.add_argument("--mesh-n", type=int, default=128, help="marching-cubes resolution, 0 skips the mesh")
    p.add_argument("--views", default="test")
    p.add_argument("--two-class", action="store_true", help="average foreground and background IoU")

    p = sub.add_parser("config", help="print the effective configuration as YAML")
    _add_config(p)

    p = sub.add_parser("report", help="figures and a CSV summary of one or more runs")
    p.add_argument("runs", nargs="+", help="run directories (metrics.jsonl, optional eval.json)")
    p.add_argument("--out", required=True, help="output directory for figures and summary.csv")
    p.add_argument("--dataset", default=None, help="render W_f panels of each run's checkpoint on this dataset")
    p.add_argument("--views", default="test")
    return parser


def _views(spec: str, manifest: dict) -> list[int]:
    if spec == "test":
        return list(manifest["test"])
    if spec == "train":
        return list(manifest["train"])
    if spec == "all":
        return list(range(manifest["n_views"]))
    ids = [int(t) for t in spec.split(",") if t.strip()]
    bad = [i for i in ids if not 0 <= i < manifest["n_views"]]
    if bad:
        raise ConfigFileError(f"view id {bad[0]} out of range")
    return ids


def cmd_gen_scene(args) -> int:
    cfg = load_config(args.config, args.preset)
    spec = cfg.scene
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    if args.straddle:
        spec = replace(spec, straddle=True)
    ds = generate_scene(spec)
    save_dataset(ds, args.out)
    print(f"wrote {ds.n_views} views to {args.out}")
    return EXIT_OK


def cmd_make_masks(args) -> int:
    cfg = load_config(args.config, args.preset).maskgen
    over = {k: getattr(args, k) for k in ("k", "seed", "vote_threshold", "seg_noise", "cls_noise",
                                           "noise_seed", "erase_fg") if getattr(args, k) is not None}
    cfg = replace(cfg, **over)
    ds = load_dataset(args.dataset)
    ds, statuses = build_masks(ds, cfg.k, cfg.seed, cfg.vote_threshold, cfg.seg_noise, cfg.cls_noise,
                               cfg.noise_seed, cfg.erase_fg)
    save_masks(args.dataset, ds.masks, ds.mask_params)
    empty = [i for i, s in enumerate(statuses) if s != "ok"]
    if empty:
        log.warning("no salient cluster in view(s) %s", empty)
    print(f"wrote masks for {len(ds.masks)} views")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.preset).train
    over = {"iters": args.iters, "stage2_start": args.stage2_start, "strategy": args.strategy, "seed": args.seed}
    cfg = replace(cfg, **{k: v for k, v in over.items() if v is not None})
    ds = load_dataset(args.dataset, require_masks=True)
    if args.sphere_scale != 1.0 or args.sphere_offset is not None:
        center = np.asarray(ds.spec.sphere_center) + np.asarray(args.sphere_offset or (0.0, 0.0, 0.0))
        ds = ds.with_spec(sphere_radius=ds.spec.sphere_radius * args.sphere_scale, sphere_center=tuple(center.tolist()))
    resume = Checkpoint.load(args.resume) if args.resume else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sphere.json").write_text(json.dumps({"center": list(map(float, ds.sphere.center)),
                                                 "radius": ds.sphere.radius}) + "\n")
    try:
        ckpt, records = train(ds, cfg, resume=resume, out_dir=out)
    except TrainingAborted as err:
        print(f"training aborted: {err}; diagnostics in {err.diagnostics_path}", file=sys.stderr)
        return EXIT_NUMERIC
    last = records[-1] if records else {"iter": ckpt.iteration}
    print(json.dumps({"iteration": ckpt.iteration, **{k: v for k, v in last.items() if k != "iter"}}))
    return EXIT_OK


def _run_sphere(ckpt_path: Path, ds) -> SphereAnnotation:
    """Sphere annotation a run was trained with (falls back to the dataset's)."""
    meta = ckpt_path.parent / "sphere.json"
    if meta.exists():
        d = json.loads(meta.read_text())
        return SphereAnnotation(np.asarray(d["center"], dtype=np.float64), float(d["radius"]))
    return ds.sphere


def _save_png(path: Path, arr: np.ndarray, bits: int = 8) -> None:
    if bits == 16:
        Image.fromarray(np.round(np.clip(arr, 0, 1) * 65535).astype(np.uint16)).save(path)
    else:
        Image.fromarray(np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)).save(path)


def cmd_render(args) -> int:
    manifest = load_manifest(args.dataset)
    ds = load_dataset(args.dataset)
    ckpt_path = Path(args.ckpt)
    if not ckpt_path.exists():
        raise DatasetIOError(f"missing checkpoint: {ckpt_path}")
    ckpt = Checkpoint.load(ckpt_path)
    ids = _views(args.views, manifest)
    out = Path(args.out)
    for sub in ("color", "fg_weight", "background"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    views = render_views(ckpt, [ds.cameras[i] for i in ids], _run_sphere(ckpt_path, ds))
    for i, v in zip(ids, views):
        _save_png(out / "color" / f"{i:04d}.png", v["color"])
        _save_png(out / "background" / f"{i:04d}.png", v["background"])
        _save_png(out / "fg_weight" / f"{i:04d}.png", v["fg_weight"], bits=16)
        np.save(out / "fg_weight" / f"{i:04d}.npy", v["fg_weight"])
    print(f"rendered {len(ids)} views to {out}")
    return EXIT_OK


def cmd_mesh(args) -> int:
    ckpt_path = Path(args.ckpt)
    if not ckpt_path.exists():
        raise DatasetIOError(f"missing checkpoint: {ckpt_path}")
    ckpt = Checkpoint.load(ckpt_path)
    sphere = SphereAnnotation()
    if args.dataset:
        sphere = _run_sphere(ckpt_path, load_dataset(args.dataset))
    mesh = extract_object_mesh(ckpt, args.n)
    center = " ".join(f"{c:.9g}" for c in np.asarray(sphere.center, dtype=np.float64))
    write_obj(args.out, mesh, [
        "normalized coordinates: scene = vertex * radius + center",
        f"radius {sphere.radius:.9g}",
        f"center {center}",
    ])
    if mesh.is_empty:
        print("warning: foreground SDF has no zero crossing; wrote an empty mesh", file=sys.stderr)
    print(f"wrote {len(mesh.vertices)} vertices, {len(mesh.faces)} faces to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    manifest = load_manifest(args.dataset)
    ds = load_dataset(args.dataset)
    ids = _views(args.views, manifest)
    name = Path(args.dataset).name
    if args.pred_masks:
        preds = []
        for i in ids:
            p = Path(args.pred_masks) / f"{i:04d}.png"
            if not p.exists():
                raise DatasetIOError(f"missing predicted mask: {p}")
            with Image.open(p) as img:
                preds.append(np.array(img) > 0)
        m, per_view = mean_iou(preds, [ds.masks_gt[i] for i in ids], args.two_class)
        report = {"miou": m, "cd": None, "per_view": [{"view": i, "iou": v} for i, v in zip(ids, per_view)]}
    else:
        ckpt_path = Path(args.ckpt)
        if not ckpt_path.exists():
            raise DatasetIOError(f"missing checkpoint: {ckpt_path}")
        ckpt = Checkpoint.load(ckpt_path)
        ds = replace(ds, spec=replace(ds.spec, sphere_center=tuple(map(float, _run_sphere(ckpt_path, ds).center)),
                                      sphere_radius=_run_sphere(ckpt_path, ds).radius))
        report = evaluate(ckpt, ds, ids, mesh_n=args.mesh_n or None)
    if args.out:
        write_metrics(args.out, name, report["miou"], report["cd"], report["per_view"])
    print(f"miou {report['miou']:.6f}")
    if report["cd"] is not None:
        print(f"cd {report['cd']:.6f}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import write_report

    paths = write_report([Path(r) for r in args.runs], Path(args.out), args.dataset, args.views)
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_config(args) -> int:
    print(dump_config(load_config(args.config, args.preset)), end="")
    return EXIT_OK


COMMANDS = {
    "config": cmd_config,
    "gen-scene": cmd_gen_scene,
    "make-masks": cmd_make_masks,
    "train": cmd_train,
    "render": cmd_render,
    "mesh": cmd_mesh,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigFileError, SceneConfigError, TrainConfigError, ConfigError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetIOError, DescriptorFormatError, DatasetVersionError, FileNotFoundError) as err:
        print(f"missing input: {err}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
