"""Dense fully-connected CRF refinement by mean-field inference.

Pairwise potentials follow the usual two-kernel Potts form: an appearance
(bilateral) Gaussian over pixel position and color, plus a smoothness
Gaussian over position only. Message passing is exact O(N^2): the
bilateral kernel is materialized once per image by a numba loop that
reads per-axis position tables and an integer color-distance table (so
entries equal the analytic formula to float32 rounding and runs are
bit-reproducible), while the smoothness kernel is applied separably.

Images beyond the configured pixel budget are rejected; tile them
upstream rather than silently approximating.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .errors import DimensionError, ValidationError
from .feature_io import LabelMap

__all__ = ["CrfParams", "crf_refine", "mean_field"]

DEFAULT_STEPS = 10
# 3 * 255^2 is the largest possible squared RGB distance.
_MAX_COLOR_DIST = 3 * 255 * 255
# Kernel weights and marginals below this are flushed to exact zero:
# subnormal float32 values otherwise make the dense products pathologically
# slow on x86 (no FTZ in numpy/BLAS) without affecting the result.
_FLUSH = 1e-30


@dataclass
class CrfParams:
    """Potts dense-CRF parameters (canonical defaults, all exposed)."""

    appearance_weight: float = 10.0
    spatial_std: float = 80.0
    color_std: float = 13.0
    smoothness_weight: float = 3.0
    smoothness_std: float = 3.0
    steps: int = DEFAULT_STEPS
    confidence: float = 0.9
    max_pixels: int = 20000

    def validate(self) -> None:
        if self.appearance_weight < 0 or self.smoothness_weight < 0:
            raise ValidationError("kernel weights must be >= 0")
        if min(self.spatial_std, self.color_std, self.smoothness_std) <= 0:
            raise ValidationError("kernel stds must be > 0")
        if self.steps < 1:
            raise ValidationError("steps must be >= 1")
        if not 0.5 < self.confidence < 1.0:
            raise ValidationError("unary confidence must be in (0.5, 1)")


@njit(parallel=True, cache=True)
def _bilateral_kernel(ys, xs, rgb, ytab, xtab, color_tab, out):  # pragma: no cover
    n = ys.shape[0]
    cd_max = color_tab.shape[0] - 1
    for i in prange(n):
        yi = ys[i]
        xi = xs[i]
        ri = rgb[i, 0]
        gi = rgb[i, 1]
        bi = rgb[i, 2]
        for j in range(n):
            dy = ys[j] - yi
            if dy < 0:
                dy = -dy
            dx = xs[j] - xi
            if dx < 0:
                dx = -dx
            dr = rgb[j, 0] - ri
            dg = rgb[j, 1] - gi
            db = rgb[j, 2] - bi
            cd = dr * dr + dg * dg + db * db
            if cd > cd_max:
                out[i, j] = 0.0
            else:
                v = ytab[dy] * xtab[dx] * color_tab[cd]
                out[i, j] = v if v > 1e-30 else 0.0
        out[i, i] = 0.0


def _build_bilateral(rgb: np.ndarray, h: int, w: int, params: CrfParams) -> np.ndarray:
    inv2a = 1.0 / (2.0 * params.spatial_std ** 2)
    inv2b = 1.0 / (2.0 * params.color_std ** 2)
    ytab = np.exp(-(np.arange(h, dtype=np.float64) ** 2) * inv2a).astype(np.float32)
    xtab = np.exp(-(np.arange(w, dtype=np.float64) ** 2) * inv2a).astype(np.float32)
    # Color distances past the flush horizon are exactly zero; clipping the
    # table there keeps it cache-resident.
    cd_cut = min(_MAX_COLOR_DIST, int(np.log(1.0 / _FLUSH) / inv2b) + 1)
    color_tab = np.exp(
        -np.arange(cd_cut + 1, dtype=np.float64) * inv2b
    ).astype(np.float32)
    for tab in (ytab, xtab, color_tab):
        tab[tab < _FLUSH] = 0.0
    ys, xs = np.divmod(np.arange(h * w, dtype=np.int32), np.int32(w))
    flat = np.ascontiguousarray(rgb.reshape(-1, 3).astype(np.int32))
    out = np.empty((h * w, h * w), dtype=np.float32)
    _bilateral_kernel(ys.astype(np.int32), xs.astype(np.int32), flat,
                      ytab, xtab, color_tab, out)
    return out


def _axis_gaussian(n: int, std: float) -> np.ndarray:
    idx = np.arange(n, dtype=np.float64)
    return np.exp(-((idx[:, None] - idx[None, :]) ** 2) / (2.0 * std ** 2))


def _smoothness_message(q: np.ndarray, h: int, w: int, gy: np.ndarray,
                        gx: np.ndarray) -> np.ndarray:
    """(Gy x Gx) q minus the self term, per label channel."""
    n_labels = q.shape[1]
    grid = q.reshape(h, w, n_labels)
    tmp = (gy @ grid.reshape(h, w * n_labels)).reshape(h, w, n_labels)
    full = np.tensordot(tmp, gx, axes=(1, 1)).transpose(0, 2, 1)
    return full.reshape(h * w, n_labels) - q


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def mean_field(unary: np.ndarray, rgb: np.ndarray, h: int, w: int,
               params: CrfParams, return_history: bool = False):
    """Run `params.steps` mean-field updates against unary energies.

    unary is (h*w, n_labels) float energy (lower = preferred). Returns the
    final marginals, or the list of per-step marginals when
    `return_history` (entry 0 is the initialization).
    """
    params.validate()
    u = np.asarray(unary, dtype=np.float64)
    if u.ndim != 2 or u.shape[0] != h * w:
        raise DimensionError(f"unary shape {u.shape} != ({h * w}, n_labels)")
    if u.shape[1] < 2:
        raise ValidationError("need at least two labels")
    if rgb.shape[:2] != (h, w) or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise DimensionError("rgb must be h x w x 3 uint8")

    bilateral = None
    if params.appearance_weight > 0:
        bilateral = _build_bilateral(rgb, h, w, params)
    gy = gx = None
    if params.smoothness_weight > 0:
        gy = _axis_gaussian(h, params.smoothness_std)
        gx = _axis_gaussian(w, params.smoothness_std)

    q = _softmax_rows(-u)
    history = [q.copy()]
    for _ in range(params.steps):
        msg = np.zeros_like(q)
        if bilateral is not None:
            q32 = q.astype(np.float32)
            q32[q32 < _FLUSH] = 0.0
            msg += params.appearance_weight * (bilateral @ q32).astype(np.float64)
        if gy is not None:
            msg += params.smoothness_weight * _smoothness_message(q, h, w, gy, gx)
        q = _softmax_rows(msg - u)
        if return_history:
            history.append(q.copy())
    return history if return_history else q


def unary_from_labels(labels: np.ndarray, n_classes: int, confidence: float) -> np.ndarray:
    """Energies for a one-hot prediction softened to `confidence`."""
    flat = np.asarray(labels).reshape(-1).astype(np.int64)
    if flat.min() < 0 or flat.max() >= n_classes:
        raise ValidationError("label out of range for unary construction")
    probs = np.full((flat.size, n_classes), (1.0 - confidence) / (n_classes - 1))
    probs[np.arange(flat.size), flat] = confidence
    return -np.log(probs)


def crf_refine(rgb: np.ndarray, labels: LabelMap, n_classes: int,
               params: CrfParams | None = None) -> LabelMap:
    """Sharpen a predicted label map toward image edges.

    Unaries come from the labels softened by `params.confidence`; the
    output is the per-pixel argmax after the final mean-field step.
    """
    params = params or CrfParams()
    params.validate()
    if n_classes < 2:
        raise ValidationError("CRF needs at least two classes")
    h, w = labels.height, labels.width
    if rgb.shape[:2] != (h, w):
        raise DimensionError(
            f"rgb {rgb.shape[:2]} and labels ({h}, {w}) disagree"
        )
    if h * w > params.max_pixels:
        raise ValidationError(
            f"image has {h * w} pixels, over the dense-CRF budget of "
            f"{params.max_pixels}; tile the image or raise max_pixels"
        )
    labels.validate(n_classes)
    unary = unary_from_labels(labels.values, n_classes, params.confidence)
    q = mean_field(unary, rgb, h, w, params)
    out = np.argmax(q, axis=1).astype(np.uint16).reshape(h, w)
    return LabelMap(h, w, out)
