"""Dense matrix primitives, Adam, and seeded sampling helpers.

Arrays are stored as row-major float32; dot products and reductions
accumulate in float64 before results are cast back down. Operations are
functional: inputs are never mutated, updated copies are returned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NumericError, ValidationError
from .rng import RngStream

__all__ = [
    "AdamState",
    "adam_step",
    "as_f32_matrix",
    "bilinear_upsample",
    "check_finite",
    "cosine_matrix",
    "sample_without_replacement",
    "unit_rows",
]


def check_finite(a: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{name} contains non-finite entries")


def as_f32_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and return a finite 2-D float32 array."""
    out = np.asarray(a, dtype=np.float32)
    if out.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {out.shape}")
    check_finite(out, name)
    return out


def unit_rows(a: np.ndarray, name: str = "matrix", eps: float = 1e-12) -> np.ndarray:
    """Row-normalize in float64; zero rows are rejected by index."""
    a64 = np.asarray(a, dtype=np.float64)
    norms = np.linalg.norm(a64, axis=1)
    bad = np.where(norms <= eps)[0]
    if bad.size:
        raise NumericError(f"{name} row {int(bad[0])} has near-zero norm")
    return a64 / norms[:, None]


def cosine_matrix(a, b, clamp_nonneg: bool = False) -> np.ndarray:
    """Pairwise cosine of the rows of `a` (n x c) against `b` (m x c).

    Entry (i, j) = cos(a_i, b_j), clipped into [-1, 1] (or [0, 1] when
    `clamp_nonneg`). Rows with norm <= 1e-12 raise NumericError naming
    the offending row.
    """
    a = as_f32_matrix(a, "a")
    b = as_f32_matrix(b, "b")
    if a.shape[1] != b.shape[1]:
        raise DimensionError(
            f"feature dims differ: a has {a.shape[1]}, b has {b.shape[1]}"
        )
    an = unit_rows(a, "a")
    bn = unit_rows(b, "b")
    cos = an @ bn.T
    lo = 0.0 if clamp_nonneg else -1.0
    np.clip(cos, lo, 1.0, out=cos)
    return cos.astype(np.float32)


@dataclass
class AdamState:
    """Optimizer state for one parameter tensor.

    Moments are kept in float64 so long trajectories stay faithful to the
    reference recurrence; `step_count` increments by exactly one per step.
    """

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: np.ndarray, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        shape = np.asarray(params).shape
        return cls(
            first_moment=np.zeros(shape, dtype=np.float64),
            second_moment=np.zeros(shape, dtype=np.float64),
            step_count=0,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState,
              lr: float) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam descent step.

    The library always descends; gradient-ascent callers negate their
    gradients first. Returns (updated params as float32, updated state).
    """
    p = np.asarray(params, dtype=np.float64)
    g = np.asarray(grads, dtype=np.float64)
    if p.shape != g.shape:
        raise DimensionError(f"param shape {p.shape} != grad shape {g.shape}")
    if p.shape != state.first_moment.shape:
        raise DimensionError(
            f"state shape {state.first_moment.shape} != param shape {p.shape}"
        )
    if lr == 0 or not np.isfinite(lr):
        raise ValidationError(f"lr must be finite and non-zero, got {lr}")
    check_finite(g, "grads")

    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * g
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    p = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)

    new_state = AdamState(
        first_moment=m,
        second_moment=v,
        step_count=t,
        beta1=state.beta1,
        beta2=state.beta2,
        eps=state.eps,
    )
    return p.astype(np.float32), new_state


def sample_without_replacement(n: int, k: int, rng: RngStream) -> np.ndarray:
    """k distinct indices in [0, n), uniform over subsets, seeded."""
    n = int(n)
    k = int(k)
    if n < 0 or k < 0 or k > n:
        raise ValidationError(f"need 0 <= k <= n, got n={n}, k={k}")
    if k == 0:
        return np.empty(0, dtype=np.int64)
    return rng.choice(n, size=k, replace=False).astype(np.int64)


def bilinear_upsample(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Channelwise bilinear upsampling with the align-corners convention.

    Corner samples map exactly onto corner pixels; constant inputs stay
    constant. Downscaling is rejected.
    """
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 3:
        raise DimensionError(f"grid must be h x w x d, got shape {g.shape}")
    h, w, _ = g.shape
    if out_h < h or out_w < w:
        raise ValidationError(
            f"downscaling requested: {h}x{w} -> {out_h}x{out_w}"
        )
    check_finite(g, "grid")

    def axis_coords(n_in, n_out):
        if n_in == 1 or n_out == 1:
            return np.zeros(n_out, dtype=np.float64)
        return np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)

    ys = axis_coords(h, out_h)
    xs = axis_coords(w, out_w)
    y0 = np.minimum(ys.astype(np.int64), h - 1)
    x0 = np.minimum(xs.astype(np.int64), w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]

    rows0 = g[y0]
    rows1 = g[y1]
    interp_rows = rows0 * (1.0 - fy) + rows1 * fy
    left = interp_rows[:, x0, :]
    right = interp_rows[:, x1, :]
    out = left * (1.0 - fx) + right * fx
    return out.astype(np.float32)
