"""Supervision mathematics for the dual-level descriptors and detectors.

Covers sample-batch construction from ground-truth alignment, the contrastive
descriptor losses with global/local negative selection, binary matchability
labels, the 4-level dual keypoint rankings, rating regression losses, overlap
labels/loss, and the total objective. Every differentiable loss returns its
analytic gradient; gradients are the testable contract here, no optimizer is
involved.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .cloud import PointCloud, RigidTransform, build_index, transform_points
from .descriptors import DescriptorSet
from .errors import (
    DegenerateBatchError,
    NoCorrespondenceError,
    ValidationError,
)

_CLAMP = 1e-7


class NegativeMode(str, Enum):
    GLOBAL = "global"
    LOCAL = "local"


@dataclass(frozen=True)
class SamplingRadii:
    """Spatial thresholds classifying target points around an aligned anchor.

    Positives lie within ``positive``; local negatives in the open annulus
    (local_negative, global_negative); global negatives beyond
    ``global_negative``.
    """

    positive: float = 0.0375
    local_negative: float = 0.05
    global_negative: float = 0.1

    def __post_init__(self):
        if not 0 < self.positive < self.local_negative < self.global_negative:
            raise ValidationError(
                "require 0 < positive < local_negative < global_negative"
            )


@dataclass(frozen=True)
class CircleLossParams:
    """Margins and exponent scale for the contrastive descriptor loss.

    ``weighting`` selects the exponent weight: "constant" uses the plain
    margin exponent scale * (d - margin); "self_paced" additionally weights
    each term by its own margin violation, scale * max(0, violation).
    """

    positive_margin: float = 0.1
    negative_margin: float = 1.4
    scale: float = 10.0
    weighting: str = "constant"

    def __post_init__(self):
        if not self.positive_margin < self.negative_margin:
            raise ValidationError("positive_margin must be < negative_margin")
        if not self.scale > 0:
            raise ValidationError("scale must be positive")
        if self.weighting not in ("constant", "self_paced"):
            raise ValidationError("weighting must be 'constant' or 'self_paced'")


@dataclass(frozen=True)
class TargetScores:
    """Regression targets for the four keypoint ranks, best to worst."""

    rank3: float = 1.0
    rank2: float = 0.75
    rank1: float = 0.25
    rank0: float = 0.0

    def __post_init__(self):
        if not self.rank3 > self.rank2 > self.rank1 > self.rank0:
            raise ValidationError("target scores must strictly decrease with rank")
        for v in (self.rank0, self.rank1, self.rank2, self.rank3):
            if not 0.0 <= v <= 1.0:
                raise ValidationError("target scores must lie in [0, 1]")

    def as_array(self) -> np.ndarray:
        return np.array([self.rank0, self.rank1, self.rank2, self.rank3])


@dataclass(frozen=True)
class SampleBatch:
    """Anchors (source indices) with per-anchor target-index sample sets."""

    anchors: np.ndarray
    positives: tuple[np.ndarray, ...]
    local_negatives: tuple[np.ndarray, ...]
    global_negatives: tuple[np.ndarray, ...]
    requested: int
    eligible: int

    def __len__(self) -> int:
        return len(self.anchors)

    def negatives(self, mode: NegativeMode) -> tuple[np.ndarray, ...]:
        return self.global_negatives if NegativeMode(mode) == NegativeMode.GLOBAL \
            else self.local_negatives


def build_sample_batch(source: PointCloud, target: PointCloud, gt: RigidTransform,
                       radii: SamplingRadii, n_anchors: int, seed: int) -> SampleBatch:
    """Sample anchors with at least one positive and classify target points.

    Anchors are drawn uniformly (seeded, without replacement) from source
    points that have >= 1 target point within the positive radius after
    alignment by ``gt``. If fewer points are eligible than requested, all
    eligible points become anchors.
    """
    if n_anchors < 1:
        raise ValidationError("n_anchors must be >= 1")
    if len(source) < 1 or len(target) < 1:
        raise ValidationError("both clouds must be nonempty")
    aligned = transform_points(source.points, gt)
    index = build_index(target)

    # Eligibility needs only the positive ball; negatives are classified for
    # the sampled anchors alone.
    pos_balls = index.radius_batch(aligned, radii.positive)
    eligible = np.flatnonzero([ball.size > 0 for ball in pos_balls])
    if eligible.size == 0:
        raise NoCorrespondenceError(
            "no source point has a target point within the positive radius"
        )
    rng = np.random.default_rng(seed)
    if eligible.size >= n_anchors:
        anchors = rng.choice(eligible, size=n_anchors, replace=False)
    else:
        anchors = eligible
    anchors = anchors.astype(np.intp)

    all_idx = np.arange(len(target), dtype=np.intp)
    r_l2 = radii.local_negative ** 2
    r_g2 = radii.global_negative ** 2
    local_sets: list[np.ndarray] = []
    global_sets: list[np.ndarray] = []
    for point, inside in zip(aligned[anchors],
                             index.radius_batch(aligned[anchors], radii.global_negative)):
        d2 = np.einsum("ij,ij->i", target.points[inside] - point,
                       target.points[inside] - point)
        local_sets.append(inside[(d2 > r_l2) & (d2 < r_g2)])
        global_sets.append(np.setdiff1d(all_idx, inside, assume_unique=True))

    return SampleBatch(
        anchors=anchors,
        positives=tuple(pos_balls[a] for a in anchors),
        local_negatives=tuple(local_sets),
        global_negatives=tuple(global_sets),
        requested=n_anchors,
        eligible=int(eligible.size),
    )


def _feature_matrix(features) -> np.ndarray:
    if isinstance(features, DescriptorSet):
        return features.vectors
    mat = np.asarray(features, dtype=np.float64)
    if mat.ndim != 2:
        raise ValidationError(f"features must be (N, D), got shape {mat.shape}")
    return mat


@dataclass(frozen=True)
class CircleLossResult:
    loss: float
    grad_source: np.ndarray
    grad_target: np.ndarray
    used_anchors: int
    skipped_anchors: tuple[int, ...]


def _exponents(margin_gap: np.ndarray, params: CircleLossParams) -> tuple[np.ndarray, np.ndarray]:
    """Exponent g(x) and derivative g'(x) for a margin gap x.

    Positives use x = d - positive_margin, negatives x = negative_margin - d;
    in both conventions g must be increasing in x.
    """
    if params.weighting == "constant":
        return params.scale * margin_gap, np.full_like(margin_gap, params.scale)
    relu = np.maximum(margin_gap, 0.0)
    return params.scale * relu * margin_gap, 2.0 * params.scale * relu


def circle_loss(source_features, target_features, batch: SampleBatch,
                mode: NegativeMode, params: CircleLossParams) -> CircleLossResult:
    """Contrastive descriptor loss over a sample batch, with exact gradient.

    Per anchor: log(1 + sum_pos exp(g(d - m_p)) * sum_neg exp(g(m_n - d))),
    averaged over anchors whose positive and selected negative sets are both
    nonempty; anchors lacking either set are skipped and reported.
    """
    f_src = _feature_matrix(source_features)
    f_tgt = _feature_matrix(target_features)
    if f_src.shape[1] != f_tgt.shape[1]:
        raise ValidationError("source/target feature dimensions differ")
    if len(batch) == 0:
        raise ValidationError("batch is empty")
    negatives = batch.negatives(mode)

    grad_src = np.zeros_like(f_src)
    grad_tgt = np.zeros_like(f_tgt)
    total = 0.0
    used = 0
    skipped: list[int] = []
    for slot, anchor in enumerate(batch.anchors):
        pos = batch.positives[slot]
        neg = negatives[slot]
        if pos.size == 0 or neg.size == 0:
            skipped.append(int(anchor))
            continue
        a = f_src[anchor]
        diff_p = a - f_tgt[pos]
        diff_n = a - f_tgt[neg]
        d_p = np.linalg.norm(diff_p, axis=1)
        d_n = np.linalg.norm(diff_n, axis=1)

        g_p, dg_p = _exponents(d_p - params.positive_margin, params)
        g_n, dg_n = _exponents(params.negative_margin - d_n, params)
        e_p = np.exp(g_p)
        e_n = np.exp(g_n)
        sum_p = e_p.sum()
        sum_n = e_n.sum()
        total += np.log1p(sum_p * sum_n)
        used += 1

        denom = 1.0 + sum_p * sum_n
        # d loss / d d_p,j  (and the negative-margin chain flips the sign)
        dl_dp = sum_n * e_p * dg_p / denom
        dl_dn = -sum_p * e_n * dg_n / denom
        u_p = np.where(d_p[:, None] > 0, diff_p / np.maximum(d_p, 1e-300)[:, None], 0.0)
        u_n = np.where(d_n[:, None] > 0, diff_n / np.maximum(d_n, 1e-300)[:, None], 0.0)
        grad_src[anchor] += dl_dp @ u_p + dl_dn @ u_n
        np.add.at(grad_tgt, pos, -dl_dp[:, None] * u_p)
        np.add.at(grad_tgt, neg, -dl_dn[:, None] * u_n)

    if used == 0:
        raise DegenerateBatchError("every anchor was skipped (empty sample sets)")
    return CircleLossResult(
        loss=float(total / used),
        grad_source=grad_src / used,
        grad_target=grad_tgt / used,
        used_anchors=used,
        skipped_anchors=tuple(skipped),
    )


def matchability_labels(source_features, target_features, batch: SampleBatch,
                        mode: NegativeMode,
                        positive_reduction: str = "min") -> tuple[np.ndarray, np.ndarray]:
    """Per-anchor bit: positive feature distance beats the closest negative.

    The high-level labels pair high descriptors with global negatives, the
    low-level ones low descriptors with local negatives; callers pass the
    matching (features, mode) combination. Returns (bits, valid) where
    anchors with an empty positive or negative set are flagged invalid and
    must be excluded downstream.
    """
    if positive_reduction not in ("min", "mean"):
        raise ValidationError("positive_reduction must be 'min' or 'mean'")
    f_src = _feature_matrix(source_features)
    f_tgt = _feature_matrix(target_features)
    negatives = batch.negatives(mode)
    bits = np.zeros(len(batch), dtype=np.int8)
    valid = np.zeros(len(batch), dtype=bool)
    for slot, anchor in enumerate(batch.anchors):
        pos = batch.positives[slot]
        neg = negatives[slot]
        if pos.size == 0 or neg.size == 0:
            continue
        d_pos = np.linalg.norm(f_src[anchor] - f_tgt[pos], axis=1)
        d_neg = np.linalg.norm(f_src[anchor] - f_tgt[neg], axis=1)
        reduced = d_pos.min() if positive_reduction == "min" else d_pos.mean()
        bits[slot] = 1 if reduced - d_neg.min() < 0 else 0
        valid[slot] = True
    return bits, valid


def keypoint_rankings(high_bits, low_bits) -> tuple[np.ndarray, np.ndarray]:
    """Fold dual matchability bits into 4-level ranks, one per ranking sense.

    The level a ranking belongs to weighs its own matchability bit twice:
    high rank = 2*high + low, low rank = 2*low + high.
    """
    high = np.asarray(high_bits)
    low = np.asarray(low_bits)
    if high.shape != low.shape:
        raise ValidationError("matchability bit arrays must have equal length")
    if not (np.isin(high, (0, 1)).all() and np.isin(low, (0, 1)).all()):
        raise ValidationError("matchability bits must be 0 or 1")
    return (2 * high + low).astype(np.intp), (2 * low + high).astype(np.intp)


def rating_loss(scores, rankings, targets: TargetScores) -> tuple[float, np.ndarray]:
    """Mean squared error between predicted scores and rank target scores."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    rankings = np.asarray(rankings).reshape(-1)
    if scores.shape != rankings.shape:
        raise ValidationError("scores and rankings must have equal length")
    if scores.size < 1:
        raise ValidationError("need at least one sample")
    if not np.isin(rankings, (0, 1, 2, 3)).all():
        raise ValidationError("rankings must be integers in 0..3")
    if not np.isfinite(scores).all():
        raise ValidationError("scores contain NaN or Inf")
    residual = scores - targets.as_array()[rankings]
    loss = float(np.mean(residual ** 2))
    grad = 2.0 * residual / scores.size
    return loss, grad


def overlap_labels(source: PointCloud, target: PointCloud, gt: RigidTransform,
                   radius: float) -> tuple[np.ndarray, np.ndarray]:
    """Geometric overlap bits for both clouds under the given alignment.

    A source point is overlapping when its aligned position has at least one
    target point within ``radius``, and symmetrically for target points.
    """
    if not radius > 0:
        raise ValidationError("radius must be positive")
    aligned = transform_points(source.points, gt)
    d_src, _ = build_index(target).knn_batch(aligned, 1)
    d_tgt, _ = build_index(PointCloud(aligned)).knn_batch(target.points, 1)
    src_bits = (d_src.reshape(-1) <= radius).astype(np.int8)
    tgt_bits = (d_tgt.reshape(-1) <= radius).astype(np.int8)
    return src_bits, tgt_bits


def overlap_loss(predictions, labels) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy with clamped predictions, plus gradient."""
    pred = np.asarray(predictions, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if pred.shape != y.shape:
        raise ValidationError("predictions and labels must have equal length")
    if pred.size < 1:
        raise ValidationError("need at least one prediction")
    if not np.isfinite(pred).all():
        raise ValidationError("predictions contain NaN or Inf")
    if not np.isin(y, (0, 1)).all():
        raise ValidationError("labels must be 0 or 1")
    clamped = np.clip(pred, _CLAMP, 1.0 - _CLAMP)
    loss = float(-np.mean(y * np.log(clamped) + (1.0 - y) * np.log1p(-clamped)))
    inside = (pred > _CLAMP) & (pred < 1.0 - _CLAMP)
    grad = (clamped - y) / (clamped * (1.0 - clamped)) / pred.size
    grad[~inside] = 0.0
    return loss, grad


@dataclass(frozen=True)
class LossWeights:
    """Coefficients for the total objective; the default keeps a plain sum."""

    high_descriptor: float = 1.0
    low_descriptor: float = 1.0
    overlap: float = 1.0
    high_matchability: float = 1.0
    low_matchability: float = 1.0


def total_loss(high_descriptor: float, low_descriptor: float, overlap: float,
               high_matchability: float, low_matchability: float,
               weights: LossWeights | None = None) -> float:
    """Combine the five objective components (unweighted sum by default)."""
    parts = np.array([high_descriptor, low_descriptor, overlap,
                      high_matchability, low_matchability], dtype=np.float64)
    if not np.isfinite(parts).all() or (parts < 0).any():
        raise ValidationError("loss components must be finite and nonnegative")
    if weights is None:
        return float(parts.sum())
    coeff = np.array([weights.high_descriptor, weights.low_descriptor, weights.overlap,
                      weights.high_matchability, weights.low_matchability])
    return float(parts @ coeff)
