"""Coarse binary masks and cluster label maps from per-pixel descriptor maps.

Descriptor file layout (little endian)::

    offset  size  field
    0       4     magic b"ODDM"
    4       4     int32 format version (1)
    8       4     int32 H
    12      4     int32 W
    16      4     int32 D
    20      4     int32 view id
    24      4     int32 reference view id
    28      4*H*W*D   float32 descriptors, row-major (H, W, D)
    ...     4*H*W     float32 saliency, row-major (H, W)
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .supervision import MAX_CLUSTERS, UNLABELED, MaskSet

log = logging.getLogger(__name__)

MAGIC = b"ODDM"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4s6i")


class DescriptorFormatError(IOError):
    pass


@dataclass
class DescriptorMap:
    descriptors: np.ndarray  # (H, W, D)
    saliency: np.ndarray  # (H, W) in [0, 1]
    view_id: int = 0
    ref_id: int = 0

    def __post_init__(self):
        self.descriptors = np.asarray(self.descriptors, dtype=np.float64)
        self.saliency = np.asarray(self.saliency, dtype=np.float64)
        if self.descriptors.ndim != 3 or self.descriptors.shape[:2] != self.saliency.shape:
            raise ValueError("descriptor grid must be (H, W, D) with an (H, W) saliency grid")
        if self.saliency.min(initial=0.0) < 0.0 or self.saliency.max(initial=0.0) > 1.0:
            raise ValueError("saliency must lie in [0, 1]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.saliency.shape

    @property
    def dim(self) -> int:
        return self.descriptors.shape[-1]


def write_descriptor_map(path, dm: DescriptorMap) -> None:
    h, w = dm.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, h, w, dm.dim, dm.view_id, dm.ref_id))
        f.write(dm.descriptors.astype("<f4").tobytes())
        f.write(dm.saliency.astype("<f4").tobytes())


def read_descriptor_map(path) -> DescriptorMap:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DescriptorFormatError(f"{path}: truncated header")
    magic, version, h, w, d, view_id, ref_id = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DescriptorFormatError(f"{path}: bad magic {magic!r}")
    if version > FORMAT_VERSION:
        raise DescriptorFormatError(f"{path}: format version {version} is newer than supported {FORMAT_VERSION}")
    n_desc, n_sal = h * w * d, h * w
    if len(raw) != _HEADER.size + 4 * (n_desc + n_sal):
        raise DescriptorFormatError(f"{path}: payload size does not match header")
    body = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    return DescriptorMap(body[:n_desc].reshape(h, w, d), body[n_desc:].reshape(h, w), view_id, ref_id)


# ---------------------------------------------------------------- K-means


@dataclass
class ClusterModel:
    centroids: np.ndarray  # (K, D)
    objective: list[float] = field(default_factory=list)  # per Lloyd iteration
    n_iter: int = 0

    @property
    def k(self) -> int:
        return len(self.centroids)


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    closest = ((x - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = closest.sum()
        idx = rng.integers(len(x)) if total <= 0 else rng.choice(len(x), p=closest / total)
        centers.append(x[idx])
        closest = np.minimum(closest, ((x - x[idx]) ** 2).sum(1))
    return np.array(centers)


def kmeans(x: np.ndarray, k: int, seed: int = 0, max_iter: int = 100) -> tuple[ClusterModel, np.ndarray]:
    """Lloyd iterations from k-means++ seeds. Empty clusters restart at the farthest point."""
    x = np.asarray(x, dtype=np.float64)
    if k < 1:
        raise ValueError("K must be >= 1")
    k = min(k, len(x))
    rng = np.random.default_rng(seed)
    c = _kmeans_pp(x, k, rng)
    labels = None
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(x, c)
        new = d.argmin(1)
        counts = np.bincount(new, minlength=k)
        for j in np.nonzero(counts == 0)[0]:
            # farthest point among clusters that can spare one
            cost = np.where(counts[new] > 1, d[np.arange(len(x)), new], -1.0)
            far = int(cost.argmax())
            counts[new[far]] -= 1
            counts[j] += 1
            new[far] = j
            d[far, j] = 0.0
        history.append(float(d[np.arange(len(x)), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        sums = np.zeros_like(c)
        np.add.at(sums, labels, x)
        c = sums / np.maximum(counts, 1)[:, None]
    return ClusterModel(c, history, it), labels


def kmeans_cluster(pair: tuple[DescriptorMap, DescriptorMap], k: int = MAX_CLUSTERS, seed: int = 0,
                   max_iter: int = 100) -> tuple[ClusterModel, np.ndarray, np.ndarray]:
    """Cluster the union of both images' descriptors; return per-image label maps."""
    a, b = pair
    if a.dim != b.dim:
        raise ValueError("descriptor dimensions differ between the pair")
    if k > MAX_CLUSTERS:
        raise ValueError(f"at most {MAX_CLUSTERS} clusters are supported")
    xa = a.descriptors.reshape(-1, a.dim)
    xb = b.descriptors.reshape(-1, b.dim)
    model, labels = kmeans(np.concatenate([xa, xb]), k, seed, max_iter)
    return model, labels[: len(xa)].reshape(a.shape), labels[len(xa) :].reshape(b.shape)


def vote_salient_clusters(labels: tuple[np.ndarray, np.ndarray], saliency: tuple[np.ndarray, np.ndarray],
                          vote_threshold: float = 0.5):
    """A cluster is foreground iff its mean saliency exceeds the threshold in both images.

    Returns ``(mask_a, mask_b, status)`` with status "ok" or "empty".
    """
    la, lb = (np.asarray(v) for v in labels)
    sa, sb = (np.asarray(v, dtype=np.float64) for v in saliency)
    if la.shape != sa.shape or lb.shape != sb.shape:
        raise ValueError("labels and saliency are not aligned")
    chosen = []
    for c in np.union1d(np.unique(la), np.unique(lb)):
        in_a, in_b = la == c, lb == c
        if not (in_a.any() and in_b.any()):
            continue
        if sa[in_a].mean() > vote_threshold and sb[in_b].mean() > vote_threshold:
            chosen.append(c)
    mask_a, mask_b = np.isin(la, chosen), np.isin(lb, chosen)
    status = "ok" if chosen else "empty"
    if not chosen:
        log.warning("no cluster passed the saliency vote")
    return mask_a, mask_b, status


def make_mask_set(view: DescriptorMap, ref: DescriptorMap, k: int = MAX_CLUSTERS, seed: int = 0,
                  vote_threshold: float = 0.5) -> tuple[MaskSet, str]:
    """Coarse mask and cluster map for one view paired with its reference view."""
    _, lv, lr = kmeans_cluster((view, ref), k, seed)
    mv, _, status = vote_salient_clusters((lv, lr), (view.saliency, ref.saliency), vote_threshold)
    return MaskSet(mv, lv.astype(np.uint8)), status


# ---------------------------------------------------------------- noise


def inject_mask_noise(masks: MaskSet, seg_rate: float = 0.0, cls_rate: float = 0.0, seed: int = 0,
                      n_labels: int | None = None) -> MaskSet:
    """Flip ``seg_rate`` of binary-mask pixels and reassign ``cls_rate`` of cluster labels.

    Flipped pixels are drawn uniformly without replacement, so the flipped count is
    exactly ``round(seg_rate * H * W)``. Reassigned labels move to a uniformly random
    other label among ``range(n_labels)`` (default: the labels present in the map).
    """
    for name, r in (("seg_rate", seg_rate), ("cls_rate", cls_rate)):
        if not 0.0 <= r <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    coarse = masks.coarse.copy().reshape(-1)
    n_flip = int(round(seg_rate * coarse.size))
    if n_flip:
        idx = rng.choice(coarse.size, n_flip, replace=False)
        coarse[idx] = ~coarse[idx]

    clusters = masks.clusters.copy().reshape(-1)
    labeled = np.nonzero(clusters != UNLABELED)[0]
    palette = np.unique(clusters[labeled]) if n_labels is None else np.arange(n_labels, dtype=np.uint8)
    n_move = int(round(cls_rate * len(labeled)))
    if n_move and len(palette) > 1:
        idx = rng.choice(labeled, n_move, replace=False)
        pos = np.searchsorted(palette, clusters[idx])
        # uniform over the other labels: shift by 1..len-1 positions
        shift = rng.integers(1, len(palette), size=n_move)
        clusters[idx] = palette[(pos + shift) % len(palette)]
    return MaskSet(coarse.reshape(masks.coarse.shape), clusters.reshape(masks.clusters.shape))


def erase_foreground(mask: np.ndarray, fraction: float, seed: int = 0) -> np.ndarray:
    """Weaken a coarse mask by clearing ``fraction`` of its foreground pixels at random."""
    rng = np.random.default_rng(seed)
    out = np.asarray(mask, dtype=bool).copy().reshape(-1)
    fg = np.nonzero(out)[0]
    n = int(round(fraction * len(fg)))
    if n:
        out[rng.choice(fg, n, replace=False)] = False
    return out.reshape(np.shape(mask))
