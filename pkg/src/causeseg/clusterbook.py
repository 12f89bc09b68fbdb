"""Stage 1: the discretized concept codebook.

Prototypes are placed by running gradient ascent on a tanh-scaled,
spectrally relaxed graph-modularity objective over each record's patch
affinity graph, one optimizer step per record for a single pass. A
spherical k-means++ builder is included as the ablation baseline, plus
vector quantization and the prototype distance matrix used downstream.

Codebook file format (.causebook, little-endian):

    magic "CAUB" | u32 version | u32 k | u32 c | f32 tau_mod
    u16 tag_len | builder tag utf-8 | i64 seed
    f32 prototypes (k x c)

The distance matrix is recomputed on load.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ArtifactIOError,
    BadMagicError,
    DegenerateGraphError,
    DimensionError,
    TruncatedPayloadError,
    ValidationError,
    VersionMismatchError,
)
from .feature_io import DatasetManifest, read_feature_file
from .kmeans import spherical_kmeans
from .rng import RngStream
from .tensor_math import (
    AdamState,
    adam_step,
    as_f32_matrix,
    cosine_matrix,
    sample_without_replacement,
    unit_rows,
)

log = logging.getLogger(__name__)

BOOK_MAGIC = b"CAUB"
BOOK_VERSION = 1

DEFAULT_K = 2048
DEFAULT_TAU_MOD = 0.1
DEFAULT_LR = 1e-3


@dataclass(frozen=True)
class Clusterbook:
    """k concept prototypes plus their pairwise (unclamped) cosine matrix."""

    m: np.ndarray
    distances: np.ndarray
    k: int
    tau_mod: float
    builder: str
    seed: int

    def __post_init__(self):
        m = as_f32_matrix(self.m, "prototypes")
        if m.shape[0] != self.k:
            raise DimensionError(f"prototype count {m.shape[0]} != k={self.k}")
        norms = np.linalg.norm(m.astype(np.float64), axis=1)
        if norms.min() < 1e-8:
            raise ValidationError("codebook contains a near-zero prototype row")
        d = np.asarray(self.distances)
        if d.shape != (self.k, self.k):
            raise DimensionError(f"distance matrix shape {d.shape} != ({self.k}, {self.k})")
        if np.abs(d - d.T).max() > 1e-5 or np.abs(np.diag(d) - 1.0).max() > 1e-5:
            raise ValidationError("distance matrix must be symmetric with unit diagonal")

    @property
    def c(self) -> int:
        return self.m.shape[1]


@dataclass
class AffinityStats:
    """Clamped-cosine patch graph: adjacency, degrees, and edge mass."""

    a: np.ndarray
    d: np.ndarray
    e: float

    def validate(self) -> None:
        a = np.asarray(self.a, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DimensionError(f"affinity must be square, got {a.shape}")
        if a.min() < 0 or a.max() > 1 + 1e-6:
            raise ValidationError("affinity entries must lie in [0, 1]")
        if np.abs(np.diag(a)).max() > 1e-6:
            raise ValidationError("affinity diagonal must be zero")
        if np.abs(a - a.T).max() > 1e-5:
            raise ValidationError("affinity must be symmetric")
        if np.abs(np.asarray(self.d) - a.sum(axis=1)).max() > 1e-5:
            raise ValidationError("degree vector disagrees with affinity row sums")
        if abs(2.0 * self.e - float(np.sum(self.d))) > 1e-4:
            raise ValidationError("edge mass disagrees with degree sum")


@dataclass
class QuantizedAssignment:
    """Per-patch nearest-prototype ids and the quantized feature rows."""

    indices: np.ndarray
    q: np.ndarray


def affinity(t: np.ndarray, zero_diagonal: bool = True) -> AffinityStats:
    """Clamped cosine affinity among patch features, self-loops excluded.

    Raises DegenerateGraphError when no off-diagonal entry is positive
    (e = 0), which would make the modularity normalization undefined.
    """
    t = as_f32_matrix(t, "features")
    if t.shape[0] < 2:
        raise ValidationError("affinity needs at least two feature rows")
    a = cosine_matrix(t, t, clamp_nonneg=True).astype(np.float64)
    a = 0.5 * (a + a.T)
    if zero_diagonal:
        np.fill_diagonal(a, 0.0)
    d = a.sum(axis=1)
    e = 0.5 * float(d.sum())
    if e <= 1e-12:
        raise DegenerateGraphError(
            "affinity graph has no positive edges; features are mutually "
            "orthogonal or opposed"
        )
    return AffinityStats(a=a, d=d, e=e)


def modularity_core(stats: AffinityStats, assign: np.ndarray, tau_mod: float,
                    sharpening: str = "tanh") -> float:
    """Modularity of a (soft) cluster assignment against a fixed graph.

    Uses the hw x hw trace-exchanged arrangement: the co-assignment matrix
    assign @ assign.T is sharpened entrywise (tanh(x / tau), or the hard
    same-argmax indicator for "delta") and contracted against the
    modularity matrix A - d d^T / 2e, normalized by 2e.
    """
    a = np.asarray(assign, dtype=np.float64)
    b = stats.a - np.outer(stats.d, stats.d) / (2.0 * stats.e)
    if sharpening == "tanh":
        co = np.tanh((a @ a.T) / tau_mod)
    elif sharpening == "delta":
        labels = np.argmax(a, axis=1)
        co = (labels[:, None] == labels[None, :]).astype(np.float64)
    else:
        raise ValidationError(f"unknown sharpening {sharpening!r}")
    return float(np.sum(co * b) / (2.0 * stats.e))


def modularity(t: np.ndarray, m: np.ndarray, tau_mod: float = DEFAULT_TAU_MOD) -> float:
    """Objective value for prototypes m on the patch graph of t."""
    stats = affinity(t)
    assign = cosine_matrix(t, m, clamp_nonneg=True)
    return modularity_core(stats, assign, tau_mod)


def _modularity_gradient(stats: AffinityStats, t_hat: np.ndarray, m: np.ndarray,
                         tau_mod: float) -> np.ndarray:
    """Ascent gradient of the tanh-sharpened objective w.r.t. m (float64)."""
    m64 = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m64, axis=1)
    if norms.min() <= 1e-12:
        raise ValidationError("prototype row with near-zero norm")
    m_hat = m64 / norms[:, None]

    z = t_hat @ m_hat.T
    cmat = np.maximum(z, 0.0)
    b = stats.a - np.outer(stats.d, stats.d) / (2.0 * stats.e)
    s = cmat @ cmat.T
    # d/ds tanh(s / tau) = (1 - tanh^2) / tau; the trace contraction makes
    # the co-assignment factor symmetric, hence the single 2 G C term.
    g = (1.0 - np.tanh(s / tau_mod) ** 2) * b / (2.0 * stats.e * tau_mod)
    d_c = 2.0 * (g @ cmat)
    d_z = d_c * (z > 0.0)
    d_mhat = d_z.T @ t_hat
    radial = np.sum(d_mhat * m_hat, axis=1, keepdims=True)
    return (d_mhat - radial * m_hat) / norms[:, None]


def modularity_gradient(t: np.ndarray, m: np.ndarray,
                        tau_mod: float = DEFAULT_TAU_MOD) -> np.ndarray:
    """Ascent direction dH/dM; the clamp contributes zero where cos <= 0."""
    stats = affinity(t)
    t_hat = unit_rows(t, "features")
    return _modularity_gradient(stats, t_hat, m, tau_mod).astype(np.float32)


def _init_prototypes(first: np.ndarray, k: int, rng: RngStream) -> np.ndarray:
    """k unit rows sampled from the first record, Gaussian-padded if short."""
    hw = first.shape[0]
    take = min(k, hw)
    idx = sample_without_replacement(hw, take, rng.child("init-rows"))
    rows = np.asarray(first, dtype=np.float64)[idx]
    if take < k:
        pad = rng.child("init-pad").normal(size=(k - take, first.shape[1]))
        rows = np.vstack([rows, pad])
    return unit_rows(rows, "initial prototypes").astype(np.float32)


def fit_clusterbook(manifest: DatasetManifest, k: int = DEFAULT_K,
                    tau_mod: float = DEFAULT_TAU_MOD, lr: float = DEFAULT_LR,
                    rng: RngStream | None = None, optimizer: str = "adam",
                    weight_decay: float = 0.01) -> Clusterbook:
    """One modularity-ascent pass over the train split, one Adam step per
    record, manifest order. Degenerate records are skipped and counted;
    an all-degenerate dataset raises.
    """
    if k < 2:
        raise ValidationError("k must be >= 2")
    if optimizer not in ("adam", "adamw"):
        raise ValidationError(f"unknown optimizer {optimizer!r}")
    rng = rng or RngStream(0, "clusterbook")
    paths = manifest.record_paths("train")
    if not paths:
        raise ValidationError("manifest has no train records")

    first = read_feature_file(paths[0])
    m = _init_prototypes(first.features, k, rng)
    state = AdamState.for_params(m)
    skipped = 0
    for path in paths:
        record = read_feature_file(path)
        if record.c != m.shape[1]:
            raise DimensionError(
                f"{path}: feature dim {record.c} != codebook dim {m.shape[1]}"
            )
        try:
            stats = affinity(record.features)
        except DegenerateGraphError:
            skipped += 1
            log.warning("skipping degenerate record %s", path)
            continue
        t_hat = unit_rows(record.features, "features")
        grad = _modularity_gradient(stats, t_hat, m, tau_mod)
        if optimizer == "adamw":
            m = m * np.float32(1.0 - lr * weight_decay)
        m, state = adam_step(m, -grad, state, lr)

    if skipped == len(paths):
        raise DegenerateGraphError("every training record was degenerate")
    if skipped:
        log.warning("skipped %d/%d degenerate records", skipped, len(paths))
    return Clusterbook(
        m=m,
        distances=distance_matrix(m),
        k=k,
        tau_mod=tau_mod,
        builder="modularity",
        seed=rng.seed,
    )


def fit_clusterbook_kmeanspp(manifest: DatasetManifest, k: int = DEFAULT_K,
                             iters: int = 20, rng: RngStream | None = None,
                             n_init: int = 3) -> Clusterbook:
    """Ablation builder: spherical k-means over pooled unit features."""
    rng = rng or RngStream(0, "clusterbook-kmeanspp")
    paths = manifest.record_paths("train")
    if not paths:
        raise ValidationError("manifest has no train records")
    pooled = np.vstack([read_feature_file(p).features for p in paths])
    if pooled.shape[0] < k:
        raise ValidationError(
            f"need at least k={k} pooled patches, got {pooled.shape[0]}"
        )
    centroids, _, _ = spherical_kmeans(pooled, k, iters, rng.child("kmeans"), n_init=n_init)
    return Clusterbook(
        m=centroids,
        distances=distance_matrix(centroids),
        k=k,
        tau_mod=DEFAULT_TAU_MOD,
        builder="kmeanspp",
        seed=rng.seed,
    )


def vector_quantize(t: np.ndarray, book: Clusterbook) -> QuantizedAssignment:
    """Nearest prototype per patch by unclamped cosine, ties to the lowest id."""
    cos = cosine_matrix(t, book.m, clamp_nonneg=False)
    indices = np.argmax(cos, axis=1).astype(np.int64)
    return QuantizedAssignment(indices=indices, q=book.m[indices].copy())


def distance_matrix(m: np.ndarray) -> np.ndarray:
    """Pairwise unclamped prototype cosine, exactly symmetric, unit diagonal."""
    d = cosine_matrix(m, m, clamp_nonneg=False).astype(np.float64)
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 1.0)
    return d.astype(np.float32)


def save_clusterbook(book: Clusterbook, path) -> None:
    tag = book.builder.encode("utf-8")
    parts = [
        BOOK_MAGIC,
        struct.pack("<IIIf", BOOK_VERSION, book.k, book.c, book.tau_mod),
        struct.pack("<H", len(tag)),
        tag,
        struct.pack("<q", book.seed),
        np.ascontiguousarray(book.m, dtype="<f4").tobytes(),
    ]
    Path(path).write_bytes(b"".join(parts))


def load_clusterbook(path) -> Clusterbook:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise ArtifactIOError(f"cannot read {path}: {exc}") from exc
    if buf[:4] != BOOK_MAGIC:
        raise BadMagicError(f"{path}: bad magic {buf[:4]!r}")
    off = 4
    try:
        version, k, c, tau_mod = struct.unpack_from("<IIIf", buf, off)
        off += struct.calcsize("<IIIf")
        if version != BOOK_VERSION:
            raise VersionMismatchError(
                f"{path}: format version {version}, expected {BOOK_VERSION}"
            )
        (tag_len,) = struct.unpack_from("<H", buf, off)
        off += 2
        tag = buf[off:off + tag_len].decode("utf-8")
        off += tag_len
        (seed,) = struct.unpack_from("<q", buf, off)
        off += 8
    except struct.error as exc:
        raise TruncatedPayloadError(f"{path}: truncated header: {exc}") from exc
    need = k * c * 4
    if len(buf) - off < need:
        raise TruncatedPayloadError(
            f"{path}: prototype payload needs {need} bytes, {len(buf) - off} present"
        )
    m = np.frombuffer(buf, dtype="<f4", count=k * c, offset=off).reshape(k, c)
    m = m.astype(np.float32)
    return Clusterbook(
        m=m,
        distances=distance_matrix(m),
        k=k,
        tau_mod=float(tau_mod),
        builder=tag,
        seed=int(seed),
    )
