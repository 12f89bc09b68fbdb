"""Binary feature files, dataset manifests, and the synthetic generator.

File format (.causefeat, little-endian throughout):

    magic "CAUF" | u32 version | u32 flags | u16 id_len | id utf-8
    u32 h | u32 w | u32 c | u32 img_h | u32 img_w
    f32 features (h*w x c)
    u8 rgb (img_h x img_w x 3)        if flags bit 0
    u16 labels (img_h x img_w)        if flags bit 1

The manifest is a JSON document {name, classes, feature_dim, patch_grid,
records: [{path, split}]} with record paths relative to the manifest file.
"""

from __future__ import annotations

import colorsys
import json
import logging
import struct
from dataclasses import dataclass, field
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
from .tensor_math import check_finite, sample_without_replacement, unit_rows

log = logging.getLogger(__name__)

MAGIC = b"CAUF"
VERSION = 1
IGNORE_LABEL = 65535

_FLAG_RGB = 1
_FLAG_LABELS = 2

# Prototype-geometry constants for the synthetic generator.
#
# The construction encodes class membership so that it is readable from
# pairwise cosines against the fixed selection thresholds, yet almost
# invisible to plain global clustering of the raw features:
#
#   - sub-concepts of a class sit in the class's private tangent plane
#     as a chain: consecutive pairs at ~0.38, a clear but deliberately
#     thin positive, with the chain-end pair landing at ~0.26;
#   - classes are paired into superclusters; the two classes of a pair
#     share a "sign" axis whose tapering weights spread their cross-class
#     sub-pairs over {~0.26, ~0.14, ~0.02}: the low pairs are genuine
#     negatives (below the 0.1 threshold) while the 0.26 pairs tie with
#     the within-class chain-end level, erasing the metric boundary
#     between class-internal and class-external similarity;
#   - different superclusters are exactly orthogonal (clean negatives).
#
# Thresholded selection against the codebook distance matrix sees the raw
# geometry and recovers classes; a freshly initialized head distorts
# pairwise cosines by ~0.13, which swamps the within-vs-confuser margin
# that global clustering of its outputs would need.
# Sub-concept frequencies are geometrically skewed (ratio below): rare
# sub-concepts contribute little clustering inertia, so a mass-weighted
# partition of raw features happily misplaces them, while threshold-based
# selection treats every concept equally.
_SUPERCLUSTER_SIZE = 2
_SUPER_CENTER_COS = 0.2503975
_SUBCONCEPT_AXIS_COS2 = 0.5591111
_SHARED_SIGN_GAMMA2 = 0.2721774
_WITHIN_ADJACENT_COS = 0.38
_WITHIN_MIN_COS = 0.2
_SUBCONCEPT_SKEW = 1.0
_SITES_PER_CLASS = 2
_LABEL_SCALE = 8
_RGB_NOISE_SIGMA = 8.0


@dataclass
class LabelMap:
    """Per-pixel class indices, uint16, with 65535 reserved as IGNORE."""

    height: int
    width: int
    values: np.ndarray

    def validate(self, n_classes: int | None = None) -> None:
        v = np.asarray(self.values)
        if v.shape != (self.height, self.width):
            raise DimensionError(
                f"label map shape {v.shape} != ({self.height}, {self.width})"
            )
        if v.dtype != np.uint16:
            raise ValidationError(f"label values must be uint16, got {v.dtype}")
        if n_classes is not None:
            real = v[v != IGNORE_LABEL]
            if real.size and int(real.max()) >= n_classes:
                raise ValidationError(
                    f"label {int(real.max())} out of range for {n_classes} classes"
                )


@dataclass
class FeatureRecord:
    """One image's frozen patch features plus optional RGB and labels."""

    image_id: str
    h: int
    w: int
    c: int
    features: np.ndarray
    rgb: np.ndarray | None = None
    labels: LabelMap | None = None

    def validate(self) -> None:
        f = np.asarray(self.features)
        if f.ndim != 2 or f.shape != (self.h * self.w, self.c):
            raise DimensionError(
                f"features shape {f.shape} != ({self.h * self.w}, {self.c}) "
                f"for record {self.image_id!r}"
            )
        if f.dtype != np.float32:
            raise ValidationError("features must be float32")
        check_finite(f, f"features of {self.image_id!r}")
        img_hw = None
        if self.rgb is not None:
            r = np.asarray(self.rgb)
            if r.ndim != 3 or r.shape[2] != 3 or r.dtype != np.uint8:
                raise DimensionError("rgb must be img_h x img_w x 3 uint8")
            img_hw = r.shape[:2]
        if self.labels is not None:
            self.labels.validate()
            if img_hw is not None and (self.labels.height, self.labels.width) != img_hw:
                raise DimensionError("rgb and label dimensions disagree")
            img_hw = (self.labels.height, self.labels.width)
        if img_hw is not None and (img_hw[0] < self.h or img_hw[1] < self.w):
            raise DimensionError(
                f"image size {img_hw} smaller than patch grid ({self.h}, {self.w})"
            )


def write_feature_file(record: FeatureRecord, path) -> None:
    record.validate()
    flags = 0
    img_h = img_w = 0
    if record.rgb is not None:
        flags |= _FLAG_RGB
        img_h, img_w = record.rgb.shape[:2]
    if record.labels is not None:
        flags |= _FLAG_LABELS
        img_h, img_w = record.labels.height, record.labels.width

    ident = record.image_id.encode("utf-8")
    parts = [
        MAGIC,
        struct.pack("<IIH", VERSION, flags, len(ident)),
        ident,
        struct.pack("<IIIII", record.h, record.w, record.c, img_h, img_w),
        np.ascontiguousarray(record.features, dtype="<f4").tobytes(),
    ]
    if record.rgb is not None:
        parts.append(np.ascontiguousarray(record.rgb, dtype=np.uint8).tobytes())
    if record.labels is not None:
        parts.append(
            np.ascontiguousarray(record.labels.values, dtype="<u2").tobytes()
        )
    Path(path).write_bytes(b"".join(parts))


class _Cursor:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise TruncatedPayloadError(
                f"{self.path}: expected {n} more bytes at offset {self.off}, "
                f"file has {len(self.buf)}"
            )
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_feature_file(path) -> FeatureRecord:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise ArtifactIOError(f"cannot read {path}: {exc}") from exc
    cur = _Cursor(buf, path)
    magic = cur.take(4)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    version, flags, id_len = cur.unpack("<IIH")
    if version != VERSION:
        raise VersionMismatchError(
            f"{path}: format version {version}, expected {VERSION}"
        )
    image_id = cur.take(id_len).decode("utf-8")
    h, w, c, img_h, img_w = cur.unpack("<IIIII")

    feats = np.frombuffer(cur.take(h * w * c * 4), dtype="<f4")
    features = feats.reshape(h * w, c).astype(np.float32)

    rgb = None
    if flags & _FLAG_RGB:
        raw = np.frombuffer(cur.take(img_h * img_w * 3), dtype=np.uint8)
        rgb = raw.reshape(img_h, img_w, 3).copy()
    labels = None
    if flags & _FLAG_LABELS:
        raw = np.frombuffer(cur.take(img_h * img_w * 2), dtype="<u2")
        labels = LabelMap(img_h, img_w, raw.reshape(img_h, img_w).astype(np.uint16))

    record = FeatureRecord(image_id, h, w, c, features, rgb, labels)
    try:
        record.validate()
    except (DimensionError, ValidationError) as exc:
        raise DimensionError(f"{path}: inconsistent dimensions: {exc}") from exc
    return record


@dataclass
class ManifestRecord:
    path: str
    split: str


@dataclass
class DatasetManifest:
    name: str
    classes: int
    feature_dim: int
    patch_grid: tuple[int, int]
    records: list[ManifestRecord] = field(default_factory=list)
    base_dir: Path = field(default_factory=Path)

    def record_paths(self, split: str | None = None) -> list[Path]:
        return [
            self.base_dir / r.path
            for r in self.records
            if split is None or r.split == split
        ]

    def save(self, path) -> None:
        path = Path(path)
        doc = {
            "name": self.name,
            "classes": self.classes,
            "feature_dim": self.feature_dim,
            "patch_grid": list(self.patch_grid),
            "records": [{"path": r.path, "split": r.split} for r in self.records],
        }
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except OSError as exc:
            raise ArtifactIOError(f"cannot read manifest {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ArtifactIOError(f"manifest {path} is not valid JSON: {exc}") from exc
        try:
            grid = doc["patch_grid"]
            return cls(
                name=doc["name"],
                classes=int(doc["classes"]),
                feature_dim=int(doc["feature_dim"]),
                patch_grid=(int(grid[0]), int(grid[1])),
                records=[
                    ManifestRecord(r["path"], r["split"]) for r in doc["records"]
                ],
                base_dir=path.parent,
            )
        except (KeyError, TypeError, IndexError) as exc:
            raise ValidationError(f"manifest {path} missing field: {exc}") from exc


def validate_manifest(manifest: DatasetManifest) -> list[str]:
    """Per-record consistency failures; an empty list means valid."""
    failures = []
    h, w = manifest.patch_grid
    for rec in manifest.records:
        full = manifest.base_dir / rec.path
        if not full.exists():
            failures.append(f"{rec.path}: file does not exist")
            continue
        try:
            record = read_feature_file(full)
        except (ArtifactIOError, ValidationError) as exc:
            failures.append(f"{rec.path}: unreadable ({exc})")
            continue
        if record.c != manifest.feature_dim:
            failures.append(
                f"{rec.path}: feature dim {record.c} != manifest {manifest.feature_dim}"
            )
        if (record.h, record.w) != (h, w):
            failures.append(
                f"{rec.path}: patch grid ({record.h}, {record.w}) != manifest ({h}, {w})"
            )
        if record.labels is not None:
            try:
                record.labels.validate(manifest.classes)
            except ValidationError as exc:
                failures.append(f"{rec.path}: {exc}")
        if rec.split not in ("train", "val"):
            failures.append(f"{rec.path}: unknown split {rec.split!r}")
    return failures


@dataclass
class SynthSpec:
    """Configuration for the synthetic granularity dataset."""

    n_classes: int
    subconcepts_per_class: int
    c: int
    grid: tuple[int, int]
    n_images: int
    noise_sigma: float = 0.05
    prototype_separation: float = 25.0
    seed: int = 0

    def validate(self) -> None:
        if self.n_classes < 1 or self.subconcepts_per_class < 1:
            raise ValidationError("need at least one class and one sub-concept")
        if self.c < 2:
            raise ValidationError("feature dim must be >= 2")
        if self.grid[0] < 1 or self.grid[1] < 1:
            raise ValidationError("patch grid must be positive")
        if self.n_images < 1:
            raise ValidationError("need at least one image")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")
        if not 0 < self.prototype_separation < 180:
            raise ValidationError("prototype_separation must be in (0, 180) degrees")


def _sample_prototypes(spec: SynthSpec, rng: RngStream) -> np.ndarray:
    """Structured unit prototypes, (n_classes * subconcepts, c).

    Built on a seeded random orthonormal basis: one center axis per
    supercluster plus a shared sign axis, one axis per class, and a
    private two-axis tangent plane per class, which makes every designed
    pairwise cosine exact (see the constants above). The
    minimum-pairwise-angle contract is verified at the end and
    unsatisfiable requests fail loudly.
    """
    # At least two superclusters once there are two classes, so orthogonal
    # (negative-eligible) class pairs always exist.
    n_super = (spec.n_classes + _SUPERCLUSTER_SIZE - 1) // _SUPERCLUSTER_SIZE
    if spec.n_classes >= 2:
        n_super = max(2, n_super)
    multi = spec.subconcepts_per_class > 1
    dims_needed = 2 * n_super + spec.n_classes + (2 * spec.n_classes if multi else 0)
    fail = ValidationError(
        f"could not place {spec.n_classes * spec.subconcepts_per_class} prototypes "
        f"with pairwise separation {spec.prototype_separation} deg in {spec.c} dims"
    )
    if dims_needed > spec.c:
        raise fail

    gauss = rng.normal(size=(spec.c, dims_needed))
    basis, _ = np.linalg.qr(gauss)
    basis = basis.T
    super_axes = basis[:n_super]
    sign_axes = basis[n_super:2 * n_super]
    class_axes = basis[2 * n_super:2 * n_super + spec.n_classes]
    plane_axes = basis[2 * n_super + spec.n_classes:]

    kappa = np.sqrt(_SUPER_CENTER_COS)
    c2 = _SUBCONCEPT_AXIS_COS2
    axis_cos = np.sqrt(c2)
    axis_sin = np.sqrt(1.0 - c2)
    gamma = np.sqrt(_SHARED_SIGN_GAMMA2)

    # Balanced contiguous partition of classes over superclusters.
    base, rem = divmod(spec.n_classes, n_super)
    super_of_class = np.repeat(
        np.arange(n_super), [base + 1] * rem + [base] * (n_super - rem)
    )

    s_count = spec.subconcepts_per_class
    if multi:
        # Sign weights taper from +gamma to -gamma along the chain,
        # spreading cross-class pairs over three exact levels.
        sign_w = gamma * np.cos(np.arange(s_count) * np.pi / max(s_count - 1, 1))
        # Per-link azimuth step solving adjacent-pair cosine = target.
        azimuths = np.zeros(s_count)
        for j in range(s_count - 1):
            plane_j = np.sqrt(1.0 - sign_w[j] ** 2)
            plane_j1 = np.sqrt(1.0 - sign_w[j + 1] ** 2)
            want = (_WITHIN_ADJACENT_COS - c2) / (1.0 - c2) - sign_w[j] * sign_w[j + 1]
            cos_step = want / (plane_j * plane_j1)
            if not -1.0 <= cos_step <= 1.0:
                raise fail
            azimuths[j + 1] = azimuths[j] + np.arccos(cos_step)

    protos = []
    for cls in range(spec.n_classes):
        sup = super_of_class[cls]
        center = (kappa * super_axes[sup]
                  + np.sqrt(1.0 - _SUPER_CENTER_COS) * class_axes[cls])
        if not multi:
            protos.append(center[None, :])
            continue
        p1, p2 = plane_axes[2 * cls], plane_axes[2 * cls + 1]
        phase = float(rng.uniform(0.0, 2.0 * np.pi))
        for j in range(s_count):
            plane_part = np.sqrt(1.0 - sign_w[j] ** 2)
            tangent = (plane_part * (np.cos(phase + azimuths[j]) * p1
                                     + np.sin(phase + azimuths[j]) * p2)
                       + sign_w[j] * sign_axes[sup])
            protos.append((axis_cos * center + axis_sin * tangent)[None, :])
    protos = np.vstack(protos)

    n = len(protos)
    if n > 1:
        min_cos = np.cos(np.radians(spec.prototype_separation))
        pair_cos = protos @ protos.T
        off = pair_cos[~np.eye(n, dtype=bool)]
        if off.max() > min_cos + 1e-9:
            raise fail
        if multi:
            cls_of = np.repeat(np.arange(spec.n_classes), s_count)
            within = pair_cos[(cls_of[:, None] == cls_of[None, :])
                              & ~np.eye(n, dtype=bool)]
            # Within-class ties must stay clear of the negative threshold.
            if within.min() < _WITHIN_MIN_COS:
                raise fail
    return protos.astype(np.float64)


_BASE_SATURATION = 0.65
_BASE_VALUE = 0.9


def class_palette(n_classes: int) -> np.ndarray:
    """Evenly-hued uint8 base colors, one row per class."""
    colors = []
    for i in range(n_classes):
        r, g, b = colorsys.hsv_to_rgb(i / max(n_classes, 1), _BASE_SATURATION, _BASE_VALUE)
        colors.append([round(r * 255), round(g * 255), round(b * 255)])
    return np.asarray(colors, dtype=np.uint8)


def _voronoi_classes(h: int, w: int, n_classes: int, rng: RngStream):
    """Patch-grid class map from nearest of n_classes*_SITES_PER_CLASS sites.

    Returns (class_map h x w, nearest_site h x w, n_sites).
    """
    n_sites = n_classes * _SITES_PER_CLASS
    flat = sample_without_replacement(h * w, min(n_sites, h * w), rng)
    sites_y = flat // w
    sites_x = flat % w
    site_class = np.arange(len(flat)) % n_classes
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    d2 = (yy[:, :, None] - sites_y) ** 2 + (xx[:, :, None] - sites_x) ** 2
    nearest_site = np.argmin(d2, axis=2)
    return site_class[nearest_site], nearest_site, len(flat)


def majority_downsample(labels: LabelMap, h: int, w: int) -> np.ndarray:
    """Majority class per cell when shrinking a label map to a patch grid.

    Ties break toward the lowest class index; IGNORE only wins a cell that
    contains nothing else.
    """
    v = np.asarray(labels.values)
    if labels.height % h or labels.width % w:
        raise DimensionError(
            f"label map {labels.height}x{labels.width} not divisible by grid {h}x{w}"
        )
    by, bx = labels.height // h, labels.width // w
    cells = v.reshape(h, by, w, bx).swapaxes(1, 2).reshape(h, w, by * bx)
    out = np.empty((h, w), dtype=np.uint16)
    for i in range(h):
        for j in range(w):
            cell = cells[i, j]
            real = cell[cell != IGNORE_LABEL]
            if real.size == 0:
                out[i, j] = IGNORE_LABEL
            else:
                counts = np.bincount(real)
                out[i, j] = np.argmax(counts)
    return out


def generate_synthetic_dataset(spec: SynthSpec, out_dir,
                               val_fraction: float = 0.2) -> DatasetManifest:
    """Write a seeded synthetic dataset and return its manifest.

    Each image partitions the patch grid into class regions (Voronoi over
    seeded sites, two per class); every region draws one of its class's
    sub-concept prototypes and each patch feature is that prototype plus
    isotropic noise, renormalized. Labels carry the class (never the
    sub-concept) at 8x patch resolution; RGB is the class base color plus
    pixel noise.
    """
    spec.validate()
    if not 0 <= val_fraction < 1:
        raise ValidationError(f"val_fraction must be in [0, 1), got {val_fraction}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    root = RngStream(spec.seed, "synth")
    prototypes = _sample_prototypes(spec, root.child("prototypes"))
    palette = class_palette(spec.n_classes)
    h, w = spec.grid
    n_val = int(round(spec.n_images * val_fraction))
    n_train = spec.n_images - n_val
    if n_train < 1:
        raise ValidationError("val_fraction leaves no training images")

    manifest = DatasetManifest(
        name=f"synth-{spec.seed}",
        classes=spec.n_classes,
        feature_dim=spec.c,
        patch_grid=(h, w),
        base_dir=out_dir,
    )
    for idx in range(spec.n_images):
        rng = root.child(f"img{idx:05d}")
        class_map, nearest_site, n_sites = _voronoi_classes(
            h, w, spec.n_classes, rng.child("voronoi")
        )
        weights = _SUBCONCEPT_SKEW ** np.arange(spec.subconcepts_per_class)
        sub_for_site = rng.child("subconcepts").choice(
            spec.subconcepts_per_class, size=n_sites, p=weights / weights.sum()
        )
        site_class = np.arange(n_sites) % spec.n_classes
        proto_for_site = site_class * spec.subconcepts_per_class + sub_for_site
        proto_idx = proto_for_site[nearest_site].reshape(-1)

        feats = prototypes[proto_idx]
        if spec.noise_sigma > 0:
            feats = feats + rng.child("noise").normal(
                0.0, spec.noise_sigma, size=feats.shape
            )
        feats = unit_rows(feats, "synthetic features").astype(np.float32)

        label_values = np.repeat(
            np.repeat(class_map.astype(np.uint16), _LABEL_SCALE, axis=0),
            _LABEL_SCALE,
            axis=1,
        )
        rgb = palette[class_map]
        rgb = np.repeat(np.repeat(rgb, _LABEL_SCALE, axis=0), _LABEL_SCALE, axis=1)
        rgb = rgb.astype(np.float64) + rng.child("rgb").normal(
            0.0, _RGB_NOISE_SIGMA, size=rgb.shape
        )
        rgb = np.clip(np.round(rgb), 0, 255).astype(np.uint8)

        record = FeatureRecord(
            image_id=f"synth-{idx:05d}",
            h=h,
            w=w,
            c=spec.c,
            features=feats,
            rgb=rgb,
            labels=LabelMap(h * _LABEL_SCALE, w * _LABEL_SCALE, label_values),
        )
        fname = f"{record.image_id}.causefeat"
        write_feature_file(record, out_dir / fname)
        split = "train" if idx < n_train else "val"
        manifest.records.append(ManifestRecord(fname, split))

    manifest.save(out_dir / "manifest.json")
    log.info(
        "wrote %d synthetic records (%d train / %d val) to %s",
        spec.n_images, n_train, n_val, out_dir,
    )
    return manifest


def generating_prototypes(spec: SynthSpec) -> np.ndarray:
    """The exact prototype matrix a given spec generates (for oracles)."""
    spec.validate()
    root = RngStream(spec.seed, "synth")
    return _sample_prototypes(spec, root.child("prototypes"))
