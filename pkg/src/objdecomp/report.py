"""Run summaries: loss-curve and mask figures plus a delimited summary table."""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

LOSS_KEYS = ("l_color", "l_eik", "l_fg", "l_seg", "l_cls", "total")
SUMMARY_FIELDS = ("run", "iters", "strategy", "final_total", "final_color", "miou", "cd")


def read_metrics(run: Path) -> list[dict]:
    path = Path(run) / "metrics.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"missing metrics log: {path}")
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def _strategy(run: Path) -> str:
    ckpt = Path(run) / "ckpt.npz"
    if not ckpt.exists():
        return ""
    from .diffcore.io import load_arrays

    _, meta = load_arrays(ckpt)
    return meta.get("config", {}).get("strategy", "")


def plot_losses(records: list[dict], path: Path, title: str) -> Path:
    it = np.array([r["iter"] for r in records])
    fig, axes = plt.subplots(2, 3, figsize=(10, 5.5), sharex=True)
    for ax, key in zip(axes.ravel(), LOSS_KEYS):
        ax.plot(it, [r[key] for r in records], lw=0.8)
        ax.set_title(key, fontsize=9)
        ax.set_yscale("log" if key in ("l_color", "l_eik", "total") else "linear")
        ax.grid(alpha=0.3)
    stage2 = next((r["iter"] for r in records if r.get("stage") == "stage2"), None)
    if stage2 is not None and stage2 > 0:
        for ax in axes.ravel():
            ax.axvline(stage2, color="k", ls=":", lw=0.8)
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_mask_panels(run: Path, dataset: str, views: str, path: Path) -> Path:
    """Rows per view: GT image, composed render, W_f, background-only render, GT mask."""
    from .cli import _run_sphere, _views
    from .scenes import load_dataset, load_manifest
    from .trainer import Checkpoint, render_views

    manifest = load_manifest(dataset)
    ds = load_dataset(dataset)
    ids = _views(views, manifest)[:4]
    ckpt_path = Path(run) / "ckpt.npz"
    ckpt = Checkpoint.load(ckpt_path)
    rendered = render_views(ckpt, [ds.cameras[i] for i in ids], _run_sphere(ckpt_path, ds))
    cols = ("image", "render", "W_f", "background only", "GT mask")
    fig, axes = plt.subplots(len(ids), len(cols), figsize=(2.0 * len(cols), 2.0 * len(ids)), squeeze=False)
    for row, (i, v) in enumerate(zip(ids, rendered)):
        panels = (ds.images[i], np.clip(v["color"], 0, 1), v["fg_weight"], np.clip(v["background"], 0, 1), ds.masks_gt[i])
        for col, img in enumerate(panels):
            ax = axes[row, col]
            ax.imshow(img, cmap="gray" if np.ndim(img) == 2 else None, vmin=0, vmax=1 if np.ndim(img) == 2 else None)
            ax.set_xticks([])
            ax.set_yticks([])
            if row == 0:
                ax.set_title(cols[col], fontsize=9)
        axes[row, 0].set_ylabel(f"view {i}", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def write_report(runs: Sequence[Path], out: Path, dataset: str | None = None, views: str = "test") -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    written = []
    rows = []
    for run in runs:
        records = read_metrics(run)
        name = Path(run).name
        if records:
            written.append(plot_losses(records, out / f"{name}_losses.png", name))
        ev = Path(run) / "eval.json"
        ev = json.loads(ev.read_text()) if ev.exists() else {}
        last = records[-1] if records else {}
        rows.append({
            "run": name,
            "iters": last.get("iter", -1) + 1,
            "strategy": _strategy(run),
            "final_total": last.get("total", ""),
            "final_color": last.get("l_color", ""),
            "miou": ev.get("miou", ""),
            "cd": ev.get("cd", ""),
        })
        if dataset is not None and (Path(run) / "ckpt.npz").exists():
            written.append(plot_mask_panels(run, dataset, views, out / f"{name}_masks.png"))
    csv_path = out / "summary.csv"
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=SUMMARY_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    written.append(csv_path)
    return written
