"""The six-step inference and evaluation protocol, plus linear probing.

Steps: fit class-count centroids on head outputs (spherical k-means),
bilinearly upsample per-image outputs to image resolution, label each
pixel by nearest centroid, refine with the dense CRF, align predicted
clusters to true classes with Hungarian matching on the pooled confusion
matrix, then report mIoU and pixel accuracy.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .crf import CrfParams, crf_refine
from .errors import (
    ArtifactIOError,
    BadMagicError,
    DimensionError,
    TruncatedPayloadError,
    ValidationError,
)
from .feature_io import IGNORE_LABEL, LabelMap, class_palette
from .kmeans import spherical_kmeans
from .rng import RngStream
from .tensor_math import AdamState, adam_step, bilinear_upsample, check_finite

log = logging.getLogger(__name__)

LABELFILE_MAGIC = b"CAUL"
LABELFILE_VERSION = 1


@dataclass
class ClusterProbe:
    """Unit-norm class centroids fitted on head outputs."""

    centroids: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=np.float32)
        if c.ndim != 2 or c.shape[0] < 2:
            raise ValidationError("probe needs >= 2 centroid rows")
        norms = np.linalg.norm(c.astype(np.float64), axis=1)
        if np.abs(norms - 1.0).max() > 1e-4:
            raise ValidationError("probe centroids must be unit rows")
        self.centroids = c

    @property
    def n_classes(self) -> int:
        return self.centroids.shape[0]


def fit_cluster_probe(outputs: np.ndarray, n_classes: int, iters: int = 50,
                      rng: RngStream | None = None,
                      n_init: int = 3) -> ClusterProbe:
    """Spherical k-means over pooled head outputs with restarts,
    deterministic per seed."""
    rng = rng or RngStream(0, "probe")
    pooled = np.asarray(outputs, dtype=np.float32)
    if pooled.ndim != 2:
        raise DimensionError("head outputs must be pooled to rows x r")
    if n_classes < 2:
        raise ValidationError("need >= 2 classes")
    if pooled.shape[0] < n_classes:
        raise ValidationError(
            f"need at least {n_classes} pooled rows, got {pooled.shape[0]}"
        )
    centroids, _, _ = spherical_kmeans(pooled, n_classes, iters, rng, n_init=n_init)
    return ClusterProbe(centroids=centroids)


def predict_labels(y_grid: np.ndarray, probe: ClusterProbe, img_h: int,
                   img_w: int) -> LabelMap:
    """Upsample a h x w x r output grid and label pixels by nearest centroid."""
    g = np.asarray(y_grid)
    if g.ndim != 3:
        raise DimensionError("head output grid must be h x w x r")
    up = bilinear_upsample(g, img_h, img_w).astype(np.float64)
    flat = up.reshape(-1, up.shape[2])
    norms = np.maximum(np.linalg.norm(flat, axis=1, keepdims=True), 1e-12)
    sim = (flat / norms) @ probe.centroids.astype(np.float64).T
    labels = np.argmax(sim, axis=1).astype(np.uint16)
    return LabelMap(img_h, img_w, labels.reshape(img_h, img_w))


def hungarian_match(confusion: np.ndarray) -> np.ndarray:
    """Permutation sigma maximizing sum_i confusion[i, sigma(i)].

    Kuhn-Munkres with potentials, O(n^3). Input must be square.
    """
    a = np.asarray(confusion, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"confusion must be square, got {a.shape}")
    check_finite(a, "confusion")
    n = a.shape[0]
    cost = a.max() - a  # maximize -> minimize

    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=np.int64)  # match[j] = row assigned to column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    perm = np.zeros(n, dtype=np.int64)
    for j in range(1, n + 1):
        if match[j]:
            perm[match[j] - 1] = j - 1
    return perm


@dataclass
class ConfusionMatrix:
    """Pooled (predicted cluster x true class) pixel counts."""

    counts: np.ndarray
    ignored_pixels: int = 0

    @classmethod
    def empty(cls, n_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((n_classes, n_classes), dtype=np.int64), 0)

    def add(self, pred: LabelMap, gt: LabelMap) -> None:
        if (pred.height, pred.width) != (gt.height, gt.width):
            raise DimensionError("prediction and ground truth sizes differ")
        p = pred.values.reshape(-1).astype(np.int64)
        g = gt.values.reshape(-1).astype(np.int64)
        keep = g != IGNORE_LABEL
        self.ignored_pixels += int((~keep).sum())
        p = p[keep]
        g = g[keep]
        n = self.counts.shape[0]
        if p.size and (p.max() >= n or g.max() >= n):
            raise ValidationError("label out of range for confusion matrix")
        np.add.at(self.counts, (p, g), 1)


@dataclass
class EvalReport:
    miou: float
    pacc: float
    per_class_iou: list
    permutation: list
    n_pixels: int

    def to_json(self) -> str:
        doc = {
            "mIoU": self.miou,
            "pAcc": self.pacc,
            "per_class_iou": self.per_class_iou,
            "matched_permutation": self.permutation,
            "n_pixels": self.n_pixels,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def to_tsv(self) -> str:
        lines = ["metric\tvalue", f"mIoU\t{self.miou:.6f}", f"pAcc\t{self.pacc:.6f}"]
        for i, iou in enumerate(self.per_class_iou):
            val = "excluded" if iou is None else f"{iou:.6f}"
            lines.append(f"iou_class_{i}\t{val}")
        lines.append(f"n_pixels\t{self.n_pixels}")
        return "\n".join(lines) + "\n"


def metrics_from_confusion(counts: np.ndarray,
                           permutation: np.ndarray | None = None) -> EvalReport:
    """mIoU / pAcc from a pooled confusion matrix.

    With a permutation, predicted cluster i is read as class perm[i]
    (Hungarian alignment); without one, rows already are class labels.
    Classes absent from both prediction and ground truth are excluded
    from the mIoU mean.
    """
    counts = np.asarray(counts, dtype=np.int64)
    n = counts.shape[0]
    if permutation is None:
        aligned = counts
    else:
        perm = np.asarray(permutation, dtype=np.int64)
        inv = np.empty(n, dtype=np.int64)
        inv[perm] = np.arange(n)
        aligned = counts[inv]  # row c now holds the cluster mapped to class c
    total = int(counts.sum())
    tp = np.diag(aligned).astype(np.float64)
    fp = aligned.sum(axis=1) - tp
    fn = aligned.sum(axis=0) - tp
    union = tp + fp + fn
    per_class = [
        (float(tp[i] / union[i]) if union[i] > 0 else None) for i in range(n)
    ]
    present = [v for v in per_class if v is not None]
    miou = float(np.mean(present)) if present else 0.0
    pacc = float(tp.sum() / total) if total else 0.0
    return EvalReport(
        miou=miou,
        pacc=pacc,
        per_class_iou=per_class,
        permutation=(list(range(n)) if permutation is None
                     else [int(x) for x in permutation]),
        n_pixels=total,
    )


def evaluate(pred_maps: list[LabelMap], gt_maps: list[LabelMap],
             n_classes: int) -> EvalReport:
    """Pool confusion over images, align with Hungarian, report metrics."""
    if len(pred_maps) != len(gt_maps) or not pred_maps:
        raise ValidationError("need matching, non-empty prediction/GT lists")
    confusion = ConfusionMatrix.empty(n_classes)
    for pred, gt in zip(pred_maps, gt_maps):
        confusion.add(pred, gt)
    perm = hungarian_match(confusion.counts)
    return metrics_from_confusion(confusion.counts, perm)


# ---------------------------------------------------------------------------
# Linear probing


@dataclass
class LinearProbeConfig:
    lr: float = 1e-3
    epochs: int = 200
    seed: int = 0


def softmax_xent(w: np.ndarray, b: np.ndarray, x: np.ndarray,
                 labels: np.ndarray):
    """Mean cross-entropy of a linear softmax classifier and its gradients.

    Returns (loss, grad_w, grad_b). Rows with IGNORE labels must be
    filtered by the caller.
    """
    logits = x @ w + b
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    n = x.shape[0]
    idx = np.arange(n)
    loss = float(-np.mean(np.log(np.maximum(probs[idx, labels], 1e-300))))
    d_logits = probs.copy()
    d_logits[idx, labels] -= 1.0
    d_logits /= n
    return loss, x.T @ d_logits, d_logits.sum(axis=0)


def linear_probe(train_outputs: np.ndarray, train_labels: np.ndarray,
                 eval_outputs: np.ndarray, eval_labels: np.ndarray,
                 n_classes: int,
                 config: LinearProbeConfig | None = None) -> EvalReport:
    """Multinomial logistic regression on frozen head outputs.

    Trains a single linear layer with Adam on patch-level labels and
    scores the eval split through the shared metric path, without
    Hungarian alignment (classes are supervised here). Classes absent
    from the training labels are excluded from the mean with a warning.
    """
    config = config or LinearProbeConfig()
    x = np.asarray(train_outputs, dtype=np.float64)
    y = np.asarray(train_labels).reshape(-1).astype(np.int64)
    keep = y != IGNORE_LABEL
    x, y = x[keep], y[keep]
    if x.size == 0:
        raise ValidationError("no labeled training patches")
    missing = sorted(set(range(n_classes)) - set(int(v) for v in np.unique(y)))
    if missing:
        log.warning("classes absent from probe training labels: %s", missing)

    w = np.zeros((x.shape[1], n_classes), dtype=np.float32)
    b = np.zeros(n_classes, dtype=np.float32)
    sw = AdamState.for_params(w)
    sb = AdamState.for_params(b)
    for _ in range(config.epochs):
        _, gw, gb = softmax_xent(w.astype(np.float64), b.astype(np.float64), x, y)
        w, sw = adam_step(w, gw, sw, config.lr)
        b, sb = adam_step(b, gb, sb, config.lr)

    ex = np.asarray(eval_outputs, dtype=np.float64)
    ey = np.asarray(eval_labels).reshape(-1).astype(np.int64)
    keep = ey != IGNORE_LABEL
    ex, ey = ex[keep], ey[keep]
    pred = np.argmax(ex @ w.astype(np.float64) + b.astype(np.float64), axis=1)
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (pred, ey), 1)
    for cls in missing:
        counts[cls, :] = 0
        counts[:, cls] = 0
    return metrics_from_confusion(counts)


# ---------------------------------------------------------------------------
# Prediction artifacts


def write_label_file(labels: LabelMap, path) -> None:
    parts = [
        LABELFILE_MAGIC,
        struct.pack("<III", LABELFILE_VERSION, labels.height, labels.width),
        np.ascontiguousarray(labels.values, dtype="<u2").tobytes(),
    ]
    Path(path).write_bytes(b"".join(parts))


def read_label_file(path) -> LabelMap:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise ArtifactIOError(f"cannot read {path}: {exc}") from exc
    if buf[:4] != LABELFILE_MAGIC:
        raise BadMagicError(f"{path}: bad magic {buf[:4]!r}")
    try:
        version, h, w = struct.unpack_from("<III", buf, 4)
    except struct.error as exc:
        raise TruncatedPayloadError(f"{path}: truncated header") from exc
    off = 4 + struct.calcsize("<III")
    if len(buf) - off < h * w * 2:
        raise TruncatedPayloadError(f"{path}: truncated label payload")
    values = np.frombuffer(buf, dtype="<u2", count=h * w, offset=off)
    return LabelMap(h, w, values.reshape(h, w).astype(np.uint16))


def write_label_png(labels: LabelMap, n_classes: int, path) -> None:
    """8-bit palette PNG of a label map, deterministic colors per class."""
    from PIL import Image

    if n_classes > 255:
        raise ValidationError("palette PNG supports at most 255 classes")
    palette = np.zeros((256, 3), dtype=np.uint8)
    palette[:n_classes] = class_palette(n_classes)
    data = labels.values.astype(np.uint8)
    img = Image.fromarray(data, mode="P")
    img.putpalette(palette.reshape(-1).tolist())
    img.save(path)
