"""Loss terms: color, Eikonal, foreground regularization, binary and cluster mask losses."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .diffcore import tape as T
from .diffcore.tape import NumericError, Tensor

EPS = 1e-6
UNLABELED = 255
MAX_CLUSTERS = 16


@dataclass(frozen=True)
class LossWeights:
    color: float = 1.0
    eik: float = 0.1
    fg: float = 0.01
    seg: float = 0.1
    cls: float = 0.1

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v >= 0:
                raise ValueError(f"loss weight {k} must be >= 0, got {v}")


@dataclass(frozen=True)
class FgRegParams:
    beta_r: float = 1.0
    w_th: float = 0.5
    tau: float = 0.01

    def __post_init__(self):
        if not self.beta_r > 0:
            raise ValueError("beta_r must be positive")
        if not 0.0 < self.w_th < 1.0:
            raise ValueError("w_th must lie in (0, 1)")
        if not self.tau > 0:
            raise ValueError("tau must be positive")


@dataclass
class MaskSet:
    """Coarse binary mask and cluster label map of one view."""

    coarse: np.ndarray  # (H, W) bool
    clusters: np.ndarray  # (H, W) uint8, UNLABELED marks no label

    def __post_init__(self):
        self.coarse = np.asarray(self.coarse, dtype=bool)
        self.clusters = np.asarray(self.clusters, dtype=np.uint8)
        if self.coarse.shape != self.clusters.shape:
            raise ValueError("coarse mask and cluster map must share image dimensions")
        bad = (self.clusters >= MAX_CLUSTERS) & (self.clusters != UNLABELED)
        if bad.any():
            raise ValueError("cluster labels must be < 16 or the sentinel 255")


def color_loss(pred, gt) -> Tensor:
    """Mean over rays of the squared L2 color error."""
    pred = T.as_tensor(pred)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and target {gt.shape} differ")
    return T.mean(T.tsum(T.square(pred - gt), axis=-1))


def eikonal_loss(normals) -> Tensor:
    normals = T.as_tensor(normals)
    return T.mean(T.square(T.norm(normals, axis=-1) - 1.0))


def fg_reg_loss(w_f, params: FgRegParams = FgRegParams(), hard: bool = False) -> Tensor:
    """``-log(beta_r / B * sum_i 1[W_f,i > W_th])`` with a sigmoid surrogate for the indicator.

    ``hard=True`` evaluates the true indicator (reporting only, no gradient).
    """
    w_f = T.as_tensor(w_f)
    if w_f.value.size == 0:
        raise ValueError("fg_reg_loss needs a nonempty batch")
    if hard:
        frac = float(np.mean(w_f.value > params.w_th))
        return T.constant(-math.log(max(params.beta_r * frac, EPS)))
    ind = T.sigmoid((w_f - params.w_th) * (1.0 / params.tau))
    frac = T.mean(ind) * params.beta_r
    return -T.log(T.clip(frac, EPS, math.inf))


def binary_mask_loss(w_f, mask) -> Tensor:
    """Mean per-pixel binary cross entropy of W_f against the coarse mask."""
    w = T.clip(T.as_tensor(w_f), EPS, 1.0 - EPS)
    m = np.asarray(mask, dtype=np.float64)
    return -T.mean(T.log(w) * m + T.log(1.0 - w) * (1.0 - m))


def _one_hot(labels: np.ndarray):
    labels = np.asarray(labels).reshape(-1)
    valid = labels != UNLABELED
    present = np.unique(labels[valid])
    onehot = (labels[:, None] == present[None, :]).astype(np.float64)
    return onehot, present


def cluster_means(w_f, labels) -> tuple[Tensor, np.ndarray]:
    """Mean W_f per cluster present in the batch (sentinel rays excluded)."""
    w = T.as_tensor(w_f)
    onehot, present = _one_hot(labels)
    counts = onehot.sum(axis=0)
    sums = T.reshape(w, (1, -1)) @ onehot
    return T.reshape(sums, (-1,)) * (1.0 / np.maximum(counts, 1.0)), present


def cluster_mask_loss(w_f, labels, average: bool = False) -> Tensor:
    """Sum over present clusters of the binary entropy of the cluster-mean W_f."""
    g, present = cluster_means(w_f, labels)
    if len(present) == 0:
        return T.constant(0.0)
    g = T.clip(g, EPS, 1.0 - EPS)
    ent = -(g * T.log(g) + (1.0 - g) * T.log(1.0 - g))
    return T.mean(ent) if average else T.tsum(ent)


STAGES = ("stage1", "stage2")


def total_loss(parts: dict, w: LossWeights, stage: str) -> Tensor:
    """Weighted sum of the five parts; the cluster term is gated off in stage 1."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    gamma = {"color": w.color, "eik": w.eik, "fg": w.fg, "seg": w.seg,
             "cls": w.cls if stage == "stage2" else 0.0}
    total = T.constant(0.0)
    for name in ("color", "eik", "fg", "seg", "cls"):
        part = T.as_tensor(parts[name])
        if not np.all(np.isfinite(part.value)):
            raise NumericError(f"loss part {name!r} is not finite", name)
        if gamma[name] == 0.0:
            continue
        total = total + part * gamma[name]
    return total
