"""Stage 2: concept-wise contrastive training of the segmentation head.

Per record: quantize patches to concept ids, run student and teacher
forwards (projected), subsample anchors on a sliding window, pick
positives/negatives through the prototype distance matrix (in-batch
teacher rows plus the concept bank), average the negated log-likelihood
over usable anchors, Adam-update the student, EMA the teacher, then
refresh the bank from the teacher's projected rows. Positives and
negatives are gradient constants; only anchor rows backpropagate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .clusterbook import Clusterbook, vector_quantize
from .errors import DimensionError, ValidationError
from .feature_io import DatasetManifest, read_feature_file
from .rng import RngStream
from .seg_head import MlpHead, TeacherHead, ema_update, head_backward, head_forward
from .tensor_math import AdamState, adam_step, check_finite, sample_without_replacement

log = logging.getLogger(__name__)

DEFAULT_PHI_POS = 0.3
DEFAULT_PHI_NEG = 0.1
DEFAULT_TAU_NCE = 0.1
DEFAULT_EMA_RATE = 0.99
DEFAULT_BANK_CAPACITY = 100
DEFAULT_WINDOW = 4
DEFAULT_STRIDE = 4


@dataclass
class TrainConfig:
    phi_pos: float = DEFAULT_PHI_POS
    phi_neg: float = DEFAULT_PHI_NEG
    tau_nce: float = DEFAULT_TAU_NCE
    lr: float = 1e-3
    ema_rate: float = DEFAULT_EMA_RATE
    epochs: int = 1
    window: int = DEFAULT_WINDOW
    stride: int = DEFAULT_STRIDE
    bank_capacity: int = DEFAULT_BANK_CAPACITY
    seed: int = 0

    def validate(self) -> None:
        if not -1.0 <= self.phi_neg < self.phi_pos <= 1.0:
            raise ValidationError(
                f"need -1 <= phi_neg < phi_pos <= 1, got {self.phi_neg}, {self.phi_pos}"
            )
        if self.tau_nce <= 0:
            raise ValidationError("tau_nce must be positive")
        if not 0.0 <= self.ema_rate <= 1.0:
            raise ValidationError("ema_rate must be in [0, 1]")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.window < 1 or self.stride < 1:
            raise ValidationError("window and stride must be >= 1")
        if self.bank_capacity < 1:
            raise ValidationError("bank_capacity must be >= 1")


class ConceptBank:
    """Capacity-bounded per-concept store of teacher feature rows."""

    def __init__(self, k: int, dim: int, capacity: int = DEFAULT_BANK_CAPACITY):
        if k < 1 or dim < 1 or capacity < 1:
            raise ValidationError("bank needs positive k, dim, capacity")
        self.k = k
        self.dim = dim
        self.capacity = capacity
        self.slots: list[np.ndarray] = [
            np.empty((0, dim), dtype=np.float32) for _ in range(k)
        ]

    @property
    def occupancy(self) -> np.ndarray:
        return np.array([s.shape[0] for s in self.slots], dtype=np.int64)

    def rows_for(self, concept_ids: np.ndarray) -> np.ndarray:
        chunks = [self.slots[int(i)] for i in concept_ids if self.slots[int(i)].size]
        if not chunks:
            return np.empty((0, self.dim), dtype=np.float32)
        return np.vstack(chunks)

    def check_invariants(self) -> None:
        occ = self.occupancy
        if occ.max(initial=0) > self.capacity:
            raise ValidationError("bank slot exceeds capacity")
        for s in self.slots:
            check_finite(s, "bank rows")


@dataclass
class SelectionEntry:
    """Positive/negative choices for one anchor, tagged by source."""

    anchor_pos: int
    anchor_id: int
    pos_positions: np.ndarray
    neg_positions: np.ndarray
    pos_concepts: np.ndarray
    neg_concepts: np.ndarray


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    usable_anchor_fraction: float


@dataclass
class TrainResult:
    head: MlpHead
    teacher: TeacherHead
    bank: ConceptBank
    trace: list[EpochStats] = field(default_factory=list)
    skipped_records: int = 0


def sample_anchors(h: int, w: int, window: int, stride: int,
                   rng: RngStream) -> np.ndarray:
    """One uniformly chosen flat position per complete sliding window.

    For window = stride = 4 and divisible grids this is exactly hw/16
    anchors (6.25% of positions).
    """
    if h < window or w < window:
        raise ValidationError(
            f"grid {h}x{w} smaller than window {window}x{window}"
        )
    rows = range(0, h - window + 1, stride)
    cols = range(0, w - window + 1, stride)
    n_windows = len(rows) * len(cols)
    offsets = rng.integers(0, window, size=(n_windows, 2))
    anchors = np.empty(n_windows, dtype=np.int64)
    idx = 0
    for r0 in rows:
        for c0 in cols:
            rr = r0 + int(offsets[idx, 0])
            cc = c0 + int(offsets[idx, 1])
            anchors[idx] = rr * w + cc
            idx += 1
    return anchors


def select_pos_neg(anchor_id: int, batch_ids: np.ndarray, distances: np.ndarray,
                   phi_pos: float = DEFAULT_PHI_POS,
                   phi_neg: float = DEFAULT_PHI_NEG,
                   anchor_pos: int | None = None) -> SelectionEntry:
    """Threshold the anchor's concept-distance row against the batch.

    Batch positions whose concept distance exceeds phi_pos are positives
    (the anchor's own position is excluded); below phi_neg, negatives.
    The concept-id arrays report which bank slots pass the same tests.
    Empty sets are legal and simply reported.
    """
    ids = np.asarray(batch_ids)
    k = distances.shape[0]
    if anchor_id < 0 or anchor_id >= k:
        raise ValidationError(f"anchor concept id {anchor_id} out of range for k={k}")
    if ids.size and (ids.min() < 0 or ids.max() >= k):
        raise ValidationError("batch concept id out of range")
    row = np.asarray(distances[int(anchor_id)], dtype=np.float64)
    pos_mask = row[ids] > phi_pos
    neg_mask = row[ids] < phi_neg
    if anchor_pos is not None and 0 <= anchor_pos < ids.size:
        pos_mask = pos_mask.copy()
        pos_mask[anchor_pos] = False
    return SelectionEntry(
        anchor_pos=-1 if anchor_pos is None else int(anchor_pos),
        anchor_id=int(anchor_id),
        pos_positions=np.where(pos_mask)[0].astype(np.int64),
        neg_positions=np.where(neg_mask)[0].astype(np.int64),
        pos_concepts=np.where(row > phi_pos)[0].astype(np.int64),
        neg_concepts=np.where(row < phi_neg)[0].astype(np.int64),
    )


def infonce(anchor: np.ndarray, positives: np.ndarray, negatives: np.ndarray,
            tau_nce: float = DEFAULT_TAU_NCE):
    """Mean-over-positives contrastive likelihood and its anchor gradient.

    p = mean_i exp(cos(y, y+_i)/tau) / (exp(cos(y, y+_i)/tau)
        + sum_j exp(cos(y, y-_j)/tau))

    Returns (log p, d log p / d anchor) in float64, or None as the skip
    signal when either set is empty. Positives and negatives are treated
    as constants.
    """
    pos = np.asarray(positives, dtype=np.float64)
    neg = np.asarray(negatives, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        return None
    y = np.asarray(anchor, dtype=np.float64)
    if y.ndim != 1:
        raise DimensionError("anchor must be a vector")
    if pos.shape[1] != y.shape[0] or neg.shape[1] != y.shape[0]:
        raise DimensionError("positive/negative dims disagree with anchor")

    y_norm = np.linalg.norm(y)
    if y_norm <= 1e-12:
        raise ValidationError("anchor has near-zero norm")
    y_hat = y / y_norm
    pos_hat = pos / np.maximum(np.linalg.norm(pos, axis=1, keepdims=True), 1e-12)
    neg_hat = neg / np.maximum(np.linalg.norm(neg, axis=1, keepdims=True), 1e-12)

    cos_pos = pos_hat @ y_hat
    cos_neg = neg_hat @ y_hat
    s_pos = cos_pos / tau_nce
    s_neg = cos_neg / tau_nce
    shift = max(s_pos.max(), s_neg.max() if s_neg.size else -np.inf)
    a = np.exp(s_pos - shift)
    e_neg = np.exp(s_neg - shift)
    denom_neg = e_neg.sum()
    sigma = a / (a + denom_neg)
    n_pos = len(a)
    p = sigma.mean()
    logp = float(np.log(p))

    # dp/ds+_i = sigma_i (1 - sigma_i) / P;  dp/ds-_j = -e_j/P * sum_i sigma_i/(a_i + L)
    w_pos = sigma * (1.0 - sigma) / n_pos
    neg_common = np.sum(sigma / (a + denom_neg)) / n_pos
    w_neg = -e_neg * neg_common

    # ds/dy for cosine rows: (u_hat - cos * y_hat) / (tau * |y|)
    d_cos = (w_pos @ (pos_hat - cos_pos[:, None] * y_hat)
             + w_neg @ (neg_hat - cos_neg[:, None] * y_hat))
    grad = d_cos / (tau_nce * y_norm * p)
    return logp, grad


def bank_update(bank: ConceptBank, features: np.ndarray, concept_ids: np.ndarray,
                rng: RngStream) -> ConceptBank:
    """Per concept: drop floor(occupancy/2) stored rows at random, then
    insert floor(count/2) of this batch's rows for that concept, uniformly
    sampled and truncated at capacity.
    """
    feats = np.asarray(features, dtype=np.float32)
    ids = np.asarray(concept_ids)
    if feats.ndim != 2 or feats.shape[1] != bank.dim:
        raise DimensionError(f"bank dim {bank.dim} != feature dim {feats.shape}")
    if feats.shape[0] != ids.shape[0]:
        raise DimensionError("features and concept ids disagree in length")

    present = np.unique(ids)
    for concept in present:
        concept = int(concept)
        slot = bank.slots[concept]
        if slot.shape[0]:
            keep = slot.shape[0] - slot.shape[0] // 2
            keep_idx = sample_without_replacement(
                slot.shape[0], keep, rng.child(f"cut{concept}")
            )
            keep_idx.sort()
            slot = slot[keep_idx]
        rows = np.where(ids == concept)[0]
        take = rows.size // 2
        room = bank.capacity - slot.shape[0]
        take = min(take, room)
        if take > 0:
            chosen = sample_without_replacement(
                rows.size, take, rng.child(f"sample{concept}")
            )
            slot = np.vstack([slot, feats[rows[np.sort(chosen)]]])
        bank.slots[concept] = slot
    return bank


def _gather_pairs(entry: SelectionEntry, teacher_rows: np.ndarray,
                  bank: ConceptBank):
    pos_chunks = []
    if entry.pos_positions.size:
        pos_chunks.append(teacher_rows[entry.pos_positions])
    bank_pos = bank.rows_for(entry.pos_concepts)
    if bank_pos.size:
        pos_chunks.append(bank_pos)
    neg_chunks = []
    if entry.neg_positions.size:
        neg_chunks.append(teacher_rows[entry.neg_positions])
    bank_neg = bank.rows_for(entry.neg_concepts)
    if bank_neg.size:
        neg_chunks.append(bank_neg)
    pos = np.vstack(pos_chunks) if pos_chunks else np.empty((0, teacher_rows.shape[1]), np.float32)
    neg = np.vstack(neg_chunks) if neg_chunks else np.empty((0, teacher_rows.shape[1]), np.float32)
    return pos, neg


def train(manifest: DatasetManifest, book: Clusterbook, head: MlpHead,
          teacher: TeacherHead | None, config: TrainConfig) -> TrainResult:
    """Run the per-record contrastive loop over the train split."""
    config.validate()
    if manifest.feature_dim != book.c:
        raise DimensionError(
            f"manifest feature dim {manifest.feature_dim} != codebook dim {book.c}"
        )
    if head.c != book.c:
        raise DimensionError(f"head input dim {head.c} != codebook dim {book.c}")
    paths = manifest.record_paths("train")
    if not paths:
        raise ValidationError("manifest has no train records")

    head = head.copy()
    if teacher is None:
        teacher = TeacherHead(params=head.copy(), ema_rate=config.ema_rate)
    bank = ConceptBank(book.k, head.r, config.bank_capacity)
    states = {name: AdamState.for_params(p) for name, p in head.params().items()}
    rng = RngStream(config.seed, "train")

    trace: list[EpochStats] = []
    skipped = 0
    for epoch in range(config.epochs):
        losses = []
        usable_total = 0
        anchor_total = 0
        for rec_idx, path in enumerate(paths):
            record = read_feature_file(path)
            rec_rng = rng.child(f"e{epoch}/r{rec_idx}")
            try:
                ids = vector_quantize(record.features, book).indices
            except Exception:
                skipped += 1
                log.warning("skipping unquantizable record %s", path)
                continue

            _, student_cache = head_forward(record.features, head, mode="train")
            _, teacher_cache = head_forward(record.features, teacher.params, mode="train")
            student_proj = student_cache.projected
            teacher_proj = teacher_cache.projected.astype(np.float32)

            anchors = sample_anchors(record.h, record.w, config.window,
                                     config.stride, rec_rng.child("anchors"))
            anchor_total += anchors.size
            grad_proj = np.zeros_like(student_proj)
            record_losses = []
            for a in anchors:
                entry = select_pos_neg(
                    int(ids[a]), ids, book.distances,
                    config.phi_pos, config.phi_neg, anchor_pos=int(a),
                )
                pos, neg = _gather_pairs(entry, teacher_proj, bank)
                result = infonce(student_proj[a], pos, neg, config.tau_nce)
                if result is None:
                    continue
                logp, grad = result
                record_losses.append(-logp)
                grad_proj[a] -= grad
            usable = len(record_losses)
            usable_total += usable
            if usable:
                grad_proj /= usable
                grads = head_backward(student_cache, grad_proj)
                for name, param in head.params().items():
                    updated, states[name] = adam_step(
                        param, grads.params()[name], states[name], config.lr
                    )
                    setattr(head, name, updated)
                losses.append(float(np.mean(record_losses)))
            teacher = ema_update(teacher, head, config.ema_rate)
            bank = bank_update(bank, teacher_proj, ids, rec_rng.child("bank"))

        if usable_total == 0:
            raise ValidationError(
                f"epoch {epoch}: zero usable anchors; the phi thresholds "
                "select no positive/negative pairs on this dataset"
            )
        trace.append(EpochStats(
            epoch=epoch,
            mean_loss=float(np.mean(losses)) if losses else float("nan"),
            usable_anchor_fraction=usable_total / max(anchor_total, 1),
        ))
        log.info(
            "epoch %d: mean loss %.4f, usable anchors %.1f%%",
            epoch, trace[-1].mean_loss, 100.0 * trace[-1].usable_anchor_fraction,
        )

    return TrainResult(head=head, teacher=teacher, bank=bank, trace=trace,
                       skipped_records=skipped)


def write_loss_trace(trace: list[EpochStats], path) -> None:
    lines = ["epoch\tmean_loss\tusable_anchor_fraction"]
    for row in trace:
        lines.append(f"{row.epoch}\t{row.mean_loss:.6f}\t{row.usable_anchor_fraction:.6f}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
