"""Two-layer MLP segmentation head, its EMA teacher, and checkpoints.

Forward: y = relu(t W1 + b1) W2 + b2, with a linear projection p = y Wp + bp
that exists only for the training loss; inference consumes y and never
touches the projection parameters. Backward is hand-derived reverse mode.

Checkpoint format (.causehead, little-endian):

    magic "CAUH" | u32 version | u32 c | u32 r | f32 ema_rate
    f32 student tensors (w1 b1 w2 b2 wp bp) | f32 teacher tensors (same order)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ArtifactIOError,
    BadMagicError,
    DimensionError,
    TruncatedPayloadError,
    ValidationError,
    VersionMismatchError,
)
from .rng import RngStream
from .tensor_math import check_finite

__all__ = [
    "ForwardCache",
    "HeadGrads",
    "MlpHead",
    "TeacherHead",
    "ema_update",
    "head_backward",
    "head_forward",
    "init_head",
    "load_head",
    "save_head",
]

HEAD_MAGIC = b"CAUH"
HEAD_VERSION = 1
DEFAULT_OUT_DIM = 90

_PARAM_ORDER = ("w1", "b1", "w2", "b2", "wp", "bp")


@dataclass
class MlpHead:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    wp: np.ndarray
    bp: np.ndarray

    @property
    def c(self) -> int:
        return self.w1.shape[0]

    @property
    def r(self) -> int:
        return self.w2.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _PARAM_ORDER}

    def copy(self) -> "MlpHead":
        return MlpHead(**{k: v.copy() for k, v in self.params().items()})

    def validate(self) -> None:
        c, r = self.c, self.r
        shapes = {
            "w1": (c, c), "b1": (c,), "w2": (c, r), "b2": (r,),
            "wp": (r, r), "bp": (r,),
        }
        for name, want in shapes.items():
            arr = getattr(self, name)
            if arr.shape != want:
                raise DimensionError(f"head tensor {name} has shape {arr.shape}, want {want}")
            check_finite(arr, f"head tensor {name}")


@dataclass
class TeacherHead:
    """EMA copy of the student; never receives gradient updates."""

    params: MlpHead
    ema_rate: float = 0.99


@dataclass
class ForwardCache:
    """Intermediates needed by the backward pass (float64)."""

    head: MlpHead
    t: np.ndarray
    pre1: np.ndarray
    hidden: np.ndarray
    y: np.ndarray
    projected: np.ndarray | None
    mode: str


@dataclass
class HeadGrads:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    wp: np.ndarray
    bp: np.ndarray
    t: np.ndarray

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _PARAM_ORDER}


def init_head(c: int, r: int, rng: RngStream) -> MlpHead:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, deterministic per seed."""
    if c < 1 or r < 1:
        raise ValidationError(f"dims must be >= 1, got c={c}, r={r}")

    def uniform(fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(np.float32)

    return MlpHead(
        w1=uniform(c, (c, c)),
        b1=np.zeros(c, dtype=np.float32),
        w2=uniform(c, (c, r)),
        b2=np.zeros(r, dtype=np.float32),
        wp=uniform(r, (r, r)),
        bp=np.zeros(r, dtype=np.float32),
    )


def head_forward(t: np.ndarray, head: MlpHead, mode: str = "infer"):
    """Run the head; returns (y hw x r float32, ForwardCache).

    mode "train" additionally computes the projection (cache.projected);
    mode "infer" skips it entirely.
    """
    if mode not in ("train", "infer"):
        raise ValidationError(f"unknown mode {mode!r}")
    t64 = np.asarray(t, dtype=np.float64)
    if t64.ndim != 2 or t64.shape[1] != head.c:
        raise DimensionError(f"input shape {t64.shape} incompatible with c={head.c}")
    check_finite(t64, "head input")

    pre1 = t64 @ head.w1.astype(np.float64) + head.b1.astype(np.float64)
    hidden = np.maximum(pre1, 0.0)
    y = hidden @ head.w2.astype(np.float64) + head.b2.astype(np.float64)
    projected = None
    if mode == "train":
        projected = y @ head.wp.astype(np.float64) + head.bp.astype(np.float64)
    cache = ForwardCache(head=head, t=t64, pre1=pre1, hidden=hidden, y=y,
                         projected=projected, mode=mode)
    return y.astype(np.float32), cache


def head_backward(cache: ForwardCache, grad_out: np.ndarray) -> HeadGrads:
    """Exact reverse-mode gradients.

    For a train cache grad_out is the loss gradient at the projection
    output; for an infer cache it applies at y and the projection
    gradients are zero.
    """
    head = cache.head
    g = np.asarray(grad_out, dtype=np.float64)
    want = (cache.t.shape[0], head.r)
    if g.shape != want:
        raise DimensionError(f"grad_out shape {g.shape}, want {want}")
    check_finite(g, "grad_out")

    if cache.mode == "train":
        d_wp = cache.y.T @ g
        d_bp = g.sum(axis=0)
        d_y = g @ head.wp.astype(np.float64).T
    else:
        d_wp = np.zeros_like(head.wp, dtype=np.float64)
        d_bp = np.zeros_like(head.bp, dtype=np.float64)
        d_y = g

    d_w2 = cache.hidden.T @ d_y
    d_b2 = d_y.sum(axis=0)
    d_hidden = d_y @ head.w2.astype(np.float64).T
    d_pre1 = d_hidden * (cache.pre1 > 0.0)
    d_w1 = cache.t.T @ d_pre1
    d_b1 = d_pre1.sum(axis=0)
    d_t = d_pre1 @ head.w1.astype(np.float64).T

    return HeadGrads(
        w1=d_w1.astype(np.float32), b1=d_b1.astype(np.float32),
        w2=d_w2.astype(np.float32), b2=d_b2.astype(np.float32),
        wp=d_wp.astype(np.float32), bp=d_bp.astype(np.float32),
        t=d_t.astype(np.float32),
    )


def ema_update(teacher: TeacherHead, student: MlpHead, ema_rate: float) -> TeacherHead:
    """teacher <- rate * teacher + (1 - rate) * student, elementwise."""
    if not 0.0 <= ema_rate <= 1.0:
        raise ValidationError(f"ema_rate must be in [0, 1], got {ema_rate}")
    rate = np.float32(ema_rate)
    one_minus = np.float32(1.0 - ema_rate)
    merged = {
        name: rate * teacher.params.params()[name] + one_minus * student.params()[name]
        for name in _PARAM_ORDER
    }
    return TeacherHead(params=MlpHead(**merged), ema_rate=ema_rate)


def save_head(student: MlpHead, teacher: TeacherHead, path) -> None:
    student.validate()
    teacher.params.validate()
    if (student.c, student.r) != (teacher.params.c, teacher.params.r):
        raise DimensionError("student and teacher dims disagree")
    parts = [
        HEAD_MAGIC,
        struct.pack("<IIIf", HEAD_VERSION, student.c, student.r, teacher.ema_rate),
    ]
    for head in (student, teacher.params):
        for name in _PARAM_ORDER:
            parts.append(np.ascontiguousarray(head.params()[name], dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_head(path) -> tuple[MlpHead, TeacherHead]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise ArtifactIOError(f"cannot read {path}: {exc}") from exc
    if buf[:4] != HEAD_MAGIC:
        raise BadMagicError(f"{path}: bad magic {buf[:4]!r}")
    try:
        version, c, r, ema_rate = struct.unpack_from("<IIIf", buf, 4)
    except struct.error as exc:
        raise TruncatedPayloadError(f"{path}: truncated header") from exc
    if version != HEAD_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {HEAD_VERSION}")
    off = 4 + struct.calcsize("<IIIf")
    shapes = [(c, c), (c,), (c, r), (r,), (r, r), (r,)]

    def take(shape):
        nonlocal off
        n = int(np.prod(shape))
        if len(buf) - off < n * 4:
            raise TruncatedPayloadError(f"{path}: parameter payload truncated")
        arr = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shape)
        off += n * 4
        return arr.astype(np.float32)

    student = MlpHead(*(take(s) for s in shapes))
    teacher = MlpHead(*(take(s) for s in shapes))
    student.validate()
    teacher.validate()
    return student, TeacherHead(params=teacher, ema_rate=float(ema_rate))
