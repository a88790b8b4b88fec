"""Global-to-local correspondence matching and rigid estimation.

Coarse correspondences come from mutual nearest-neighbor matching of
high-level descriptors at sampled keypoints, made robust by RANSAC. Fine
correspondences are mutual matches of low-level descriptors inside local
cells around each coarse inlier pair; a score-ranked subset of them feeds a
weighted SVD for the final transform.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import TYPE_CHECKING

import numpy as np

from .cloud import (
    PointCloud,
    RigidTransform,
    SpatialIndex,
    build_index,
    radius_query,
    transform_points,
)
from .descriptors import DescriptorSet, Level, compute_descriptors, estimate_normals
from .detectors import (
    KeypointSet,
    ScoreSet,
    pairwise_feature_nn,
    sample_keypoints,
    score_overlap_heuristic,
    score_saliency,
)
from .errors import DegenerateGeometryError, NoConsensusError, ValidationError

if TYPE_CHECKING:  # pragma: no cover
    from .config import RunConfig


class Stage(str, Enum):
    COARSE = "coarse"
    FINE = "fine"


@dataclass(frozen=True)
class CorrespondenceSet:
    """Index pairs (source, target) with nonnegative per-pair weights."""

    pairs: np.ndarray
    weights: np.ndarray
    stage: Stage

    def __post_init__(self):
        pairs = np.asarray(self.pairs, dtype=np.intp).reshape(-1, 2)
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if pairs.shape[0] != weights.shape[0]:
            raise ValidationError("pairs and weights lengths differ")
        if not np.isfinite(weights).all() or (weights < 0).any():
            raise ValidationError("weights must be finite and nonnegative")
        pairs = pairs.copy()
        pairs.setflags(write=False)
        weights = weights.copy()
        weights.setflags(write=False)
        object.__setattr__(self, "pairs", pairs)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "stage", Stage(self.stage))

    def __len__(self) -> int:
        return self.pairs.shape[0]


@dataclass(frozen=True)
class RansacParams:
    max_iterations: int = 50_000
    inlier_threshold: float = 0.05
    sample_size: int = 3
    confidence: float = 0.999
    seed: int = 0
    # Consensus floor as a fraction of the correspondence count; a minimal
    # sample always fits itself, so an absolute floor of sample_size + 1
    # applies as well.
    min_inlier_fraction: float = 0.05

    def __post_init__(self):
        if self.sample_size < 3:
            raise ValidationError("sample_size must be >= 3")
        if not 0 < self.confidence < 1:
            raise ValidationError("confidence must be in (0, 1)")
        if self.max_iterations < 1:
            raise ValidationError("max_iterations must be >= 1")
        if not self.inlier_threshold > 0:
            raise ValidationError("inlier_threshold must be positive")
        if not 0 <= self.min_inlier_fraction <= 1:
            raise ValidationError("min_inlier_fraction must be in [0, 1]")


@dataclass(frozen=True)
class RegistrationResult:
    """Final transform plus every pipeline intermediate worth inspecting."""

    transform: RigidTransform
    coarse_transform: RigidTransform
    coarse: CorrespondenceSet
    fine: CorrespondenceSet
    inlier_count: int
    iterations_used: int
    timings_ms: dict[str, float] = field(default_factory=dict)
    source_keypoints: KeypointSet | None = None
    target_keypoints: KeypointSet | None = None


def match_features(source_descriptors: DescriptorSet | np.ndarray,
                   target_descriptors: DescriptorSet | np.ndarray,
                   mutual: bool = True) -> CorrespondenceSet:
    """Nearest-neighbor feature matching, optionally mutual-only.

    Returned pairs index into the rows of the given descriptor matrices;
    weights are 1.
    """
    f_src = source_descriptors.vectors if isinstance(source_descriptors, DescriptorSet) \
        else np.asarray(source_descriptors, dtype=np.float64)
    f_tgt = target_descriptors.vectors if isinstance(target_descriptors, DescriptorSet) \
        else np.asarray(target_descriptors, dtype=np.float64)
    if f_src.size == 0 or f_tgt.size == 0:
        raise ValidationError("descriptor sets must be nonempty")
    if f_src.shape[1] != f_tgt.shape[1]:
        raise ValidationError("descriptor dimensions differ")

    _, nn_st = pairwise_feature_nn(f_src, f_tgt)
    if mutual:
        _, nn_ts = pairwise_feature_nn(f_tgt, f_src)
        src_idx = np.flatnonzero(nn_ts[nn_st] == np.arange(f_src.shape[0]))
    else:
        src_idx = np.arange(f_src.shape[0])
    pairs = np.column_stack([src_idx, nn_st[src_idx]])
    return CorrespondenceSet(pairs, np.ones(len(src_idx)), Stage.COARSE)


def weighted_svd(source_points: np.ndarray, target_points: np.ndarray,
                 weights: np.ndarray) -> RigidTransform:
    """Weighted least-squares rigid alignment (Kabsch with weights).

    Minimizes sum_i w_i ||R p_i + t - q_i||^2. Raises when the configuration
    cannot constrain the rotation (fewer than 3 pairs, zero total weight, or
    an effectively collinear weighted point set).
    """
    src = np.asarray(source_points, dtype=np.float64).reshape(-1, 3)
    tgt = np.asarray(target_points, dtype=np.float64).reshape(-1, 3)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if src.shape != tgt.shape or src.shape[0] != w.shape[0]:
        raise ValidationError("source, target, and weights must have matching length")
    if src.shape[0] < 3:
        raise ValidationError("need at least 3 pairs")
    if (w < 0).any() or not np.isfinite(w).all():
        raise ValidationError("weights must be finite and nonnegative")
    total = w.sum()
    if not total > 0:
        raise ValidationError("weights must not all be zero")

    w = w / total
    centroid_src = w @ src
    centroid_tgt = w @ tgt
    x = src - centroid_src
    y = tgt - centroid_tgt
    cross_cov = (x * w[:, None]).T @ y
    u, s, vt = np.linalg.svd(cross_cov)
    if s[0] <= 0 or s[1] <= 1e-9 * s[0]:
        raise DegenerateGeometryError(
            "weighted point set is collinear or coincident; rotation underdetermined"
        )
    v = vt.T
    d = np.sign(np.linalg.det(v @ u.T))
    rotation = v @ np.diag([1.0, 1.0, d]) @ u.T
    translation = centroid_tgt - rotation @ centroid_src
    return RigidTransform(rotation, translation)


def _nondegenerate_sample(points: np.ndarray) -> bool:
    spread = points - points.mean(axis=0)
    _, s, _ = np.linalg.svd(spread, full_matrices=False)
    return s[0] > 0 and s[1] > 1e-9 * s[0]


def ransac_transform(source: PointCloud, target: PointCloud,
                     correspondences: CorrespondenceSet,
                     params: RansacParams) -> tuple[RigidTransform, np.ndarray]:
    """Consensus rigid transform over putative correspondences.

    Iterates minimal-sample fits, counting pairs with post-transform residual
    <= inlier_threshold, early-exits once the confidence bound on having seen
    an all-inlier sample is met, then refits on the best consensus set. The
    returned mask is recomputed under the returned transform, so re-checking
    residuals reproduces it exactly.
    """
    transform, mask, _ = _ransac_with_stats(source, target, correspondences, params)
    return transform, mask


def _ransac_with_stats(source: PointCloud, target: PointCloud,
                       correspondences: CorrespondenceSet,
                       params: RansacParams) -> tuple[RigidTransform, np.ndarray, int]:
    n_pairs = len(correspondences)
    if n_pairs < params.sample_size:
        raise ValidationError(
            f"need at least sample_size={params.sample_size} pairs, got {n_pairs}"
        )
    src = source.points[correspondences.pairs[:, 0]]
    tgt = target.points[correspondences.pairs[:, 1]]
    rng = np.random.default_rng(params.seed)
    unit = np.ones(params.sample_size)

    best_count = 0
    best_mask = None
    best_residual = float("inf")
    needed = params.max_iterations
    iterations = 0
    while iterations < min(params.max_iterations, needed):
        iterations += 1
        pick = rng.choice(n_pairs, size=params.sample_size, replace=False)
        if not _nondegenerate_sample(src[pick]):
            continue
        try:
            model = weighted_svd(src[pick], tgt[pick], unit)
        except DegenerateGeometryError:
            continue
        residuals = np.linalg.norm(transform_points(src, model) - tgt, axis=1)
        mask = residuals <= params.inlier_threshold
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
            best_residual = float(np.sqrt(np.mean(residuals[mask] ** 2)))
            hit_rate = count / n_pairs
            p_all_inlier = hit_rate ** params.sample_size
            if p_all_inlier >= 1.0:
                break
            if p_all_inlier > 0.0:
                bound = np.log1p(-params.confidence) / np.log1p(-p_all_inlier)
                needed = int(min(params.max_iterations, np.ceil(bound)))

    floor = max(params.sample_size + 1,
                int(np.ceil(params.min_inlier_fraction * n_pairs)))
    if best_mask is None or best_count < floor:
        raise NoConsensusError(
            f"no consensus: best {best_count} inliers of {n_pairs} pairs "
            f"(floor {floor}) after {iterations} iterations",
            best_inliers=best_count,
            best_residual=best_residual,
            iterations=iterations,
        )

    refit = weighted_svd(src[best_mask], tgt[best_mask], np.ones(best_count))
    residuals = np.linalg.norm(transform_points(src, refit) - tgt, axis=1)
    final_mask = residuals <= params.inlier_threshold
    return refit, final_mask, iterations


def local_cell_match(source: PointCloud, target: PointCloud,
                     coarse_pair: tuple[int, int],
                     source_low: DescriptorSet, target_low: DescriptorSet,
                     cell_radius: float,
                     source_index: SpatialIndex | None = None,
                     target_index: SpatialIndex | None = None,
                     source_detection: np.ndarray | None = None) -> CorrespondenceSet:
    """Mutual low-level feature matches inside cells around a coarse pair.

    Cells are closed balls of ``cell_radius`` around the pair's endpoints.
    Pair weights are the source points' low-level detection scores when
    given, else 1. Empty cells yield an empty set, not an error.
    """
    if not cell_radius > 0:
        raise ValidationError("cell_radius must be positive")
    if source_index is None:
        source_index = build_index(source)
    if target_index is None:
        target_index = build_index(target)
    src_anchor, tgt_anchor = int(coarse_pair[0]), int(coarse_pair[1])
    src_cell = radius_query(source_index, source.points[src_anchor], cell_radius)
    tgt_cell = radius_query(target_index, target.points[tgt_anchor], cell_radius)
    if src_cell.size == 0 or tgt_cell.size == 0:
        return CorrespondenceSet(np.empty((0, 2), dtype=np.intp), np.empty(0), Stage.FINE)

    local = match_features(source_low.vectors[src_cell],
                           target_low.vectors[tgt_cell], mutual=True)
    src_global = src_cell[local.pairs[:, 0]]
    tgt_global = tgt_cell[local.pairs[:, 1]]
    if source_detection is not None:
        weights = np.asarray(source_detection, dtype=np.float64)[src_global]
    else:
        weights = np.ones(len(src_global))
    return CorrespondenceSet(np.column_stack([src_global, tgt_global]), weights, Stage.FINE)


def select_fine_subset(fine: CorrespondenceSet, low_scores: ScoreSet,
                       top_fraction: float) -> CorrespondenceSet:
    """Keep the best ceil(fraction * N) pairs by source detection score.

    Sorting is score-descending with ties broken by source index; weights
    become the detection scores.
    """
    if not 0 < top_fraction <= 1:
        raise ValidationError("top_fraction must be in (0, 1]")
    if len(fine) == 0:
        return CorrespondenceSet(np.empty((0, 2), dtype=np.intp), np.empty(0), Stage.FINE)
    scores = low_scores.detection[fine.pairs[:, 0]]
    order = np.lexsort((fine.pairs[:, 0], -scores))
    keep = order[: int(np.ceil(top_fraction * len(fine)))]
    return CorrespondenceSet(fine.pairs[keep], scores[keep], Stage.FINE)


def _dedup_max_weight(pairs: np.ndarray, weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Collapse duplicate (src, tgt) pairs, keeping the highest weight."""
    if pairs.shape[0] == 0:
        return pairs, weights
    order = np.lexsort((-weights, pairs[:, 1], pairs[:, 0]))
    pairs = pairs[order]
    weights = weights[order]
    first = np.ones(pairs.shape[0], dtype=bool)
    first[1:] = (np.diff(pairs[:, 0]) != 0) | (np.diff(pairs[:, 1]) != 0)
    return pairs[first], weights[first]


def _stage_error(exc, stage: Stage):
    exc.stage = stage.value
    message = f"{stage.value} stage: {exc}"
    exc.args = (message,) + exc.args[1:]
    return exc


def register(source: PointCloud, target: PointCloud,
             config: "RunConfig | None" = None) -> RegistrationResult:
    """Full global-to-local registration of ``source`` onto ``target``.

    Pipeline: dual-level descriptors -> detector scores -> high-level
    keypoint sampling -> mutual feature matching -> RANSAC coarse transform
    -> low-level matching in cells around coarse inliers -> score-ranked
    subset -> weighted SVD. Deterministic given (inputs, config).
    """
    if config is None:
        from .config import RunConfig
        config = RunConfig()
    if len(source) < 1 or len(target) < 1:
        raise ValidationError("both clouds must be nonempty")

    timings: dict[str, float] = {}
    t_start = time.perf_counter()

    tick = time.perf_counter()
    src_index = build_index(source)
    tgt_index = build_index(target)
    dparams = config.descriptor
    src_normals = estimate_normals(source, dparams.normal_radius, index=src_index)
    tgt_normals = estimate_normals(target, dparams.normal_radius, index=tgt_index)
    descs = {
        ("src", Level.LOW): compute_descriptors(source, Level.LOW, dparams, src_normals, src_index),
        ("src", Level.HIGH): compute_descriptors(source, Level.HIGH, dparams, src_normals, src_index),
        ("tgt", Level.LOW): compute_descriptors(target, Level.LOW, dparams, tgt_normals, tgt_index),
        ("tgt", Level.HIGH): compute_descriptors(target, Level.HIGH, dparams, tgt_normals, tgt_index),
    }
    timings["descriptors_ms"] = (time.perf_counter() - tick) * 1e3

    tick = time.perf_counter()
    k = config.detector.saliency_k
    scores: dict[tuple[str, Level], ScoreSet] = {}
    for side, cloud, index, other in (("src", source, src_index, "tgt"),
                                      ("tgt", target, tgt_index, "src")):
        # Overlap is a property of the cloud pair, judged best at the global
        # receptive field; both levels share the high-level overlap scores.
        overlap = score_overlap_heuristic(descs[(side, Level.HIGH)],
                                          descs[(other, Level.HIGH)])
        for level in (Level.LOW, Level.HIGH):
            scores[(side, level)] = ScoreSet(
                level,
                score_saliency(cloud, descs[(side, level)], index, k),
                overlap,
            )
    timings["scores_ms"] = (time.perf_counter() - tick) * 1e3

    tick = time.perf_counter()
    kp_src = sample_keypoints(scores[("src", Level.HIGH)],
                              config.detector.coarse_samples, config.seed + 1)
    kp_tgt = sample_keypoints(scores[("tgt", Level.HIGH)],
                              config.detector.coarse_samples, config.seed + 2)
    local = match_features(descs[("src", Level.HIGH)].vectors[kp_src.indices],
                           descs[("tgt", Level.HIGH)].vectors[kp_tgt.indices],
                           mutual=config.matching.mutual)
    coarse = CorrespondenceSet(
        np.column_stack([kp_src.indices[local.pairs[:, 0]],
                         kp_tgt.indices[local.pairs[:, 1]]]),
        local.weights, Stage.COARSE)
    timings["coarse_match_ms"] = (time.perf_counter() - tick) * 1e3

    tick = time.perf_counter()
    ransac_params = replace(config.ransac, seed=config.seed + 3)
    if len(coarse) < ransac_params.sample_size:
        raise _stage_error(NoConsensusError(
            f"only {len(coarse)} coarse matches", best_inliers=0, iterations=0,
        ), Stage.COARSE)
    try:
        coarse_transform, inlier_mask, iterations = _ransac_with_stats(
            source, target, coarse, ransac_params)
    except (NoConsensusError, DegenerateGeometryError) as exc:
        raise _stage_error(exc, Stage.COARSE)
    timings["ransac_ms"] = (time.perf_counter() - tick) * 1e3

    tick = time.perf_counter()
    low_detection = scores[("src", Level.LOW)].detection
    collected_pairs: list[np.ndarray] = []
    collected_weights: list[np.ndarray] = []
    for pair in coarse.pairs[inlier_mask]:
        cell = local_cell_match(
            source, target, (pair[0], pair[1]),
            descs[("src", Level.LOW)], descs[("tgt", Level.LOW)],
            config.matching.cell_radius,
            source_index=src_index, target_index=tgt_index,
            source_detection=low_detection,
        )
        if len(cell) == 0:
            continue
        if config.matching.per_cell_selection:
            cell = select_fine_subset(cell, scores[("src", Level.LOW)],
                                      config.matching.top_fraction)
        collected_pairs.append(cell.pairs)
        collected_weights.append(cell.weights)

    if collected_pairs:
        all_pairs = np.vstack(collected_pairs)
        all_weights = np.concatenate(collected_weights)
    else:
        all_pairs = np.empty((0, 2), dtype=np.intp)
        all_weights = np.empty(0)
    all_pairs, all_weights = _dedup_max_weight(all_pairs, all_weights)
    fine_all = CorrespondenceSet(all_pairs, all_weights, Stage.FINE)
    if config.matching.per_cell_selection:
        fine = fine_all
    else:
        fine = select_fine_subset(fine_all, scores[("src", Level.LOW)],
                                  config.matching.top_fraction)
    if len(fine) > config.detector.fine_samples:
        # cap by descending weight (ties by source index), matching the
        # subset-selection ordering regardless of which path produced fine
        order = np.lexsort((fine.pairs[:, 0], -fine.weights))
        keep = order[: config.detector.fine_samples]
        fine = CorrespondenceSet(fine.pairs[keep], fine.weights[keep], Stage.FINE)
    timings["fine_match_ms"] = (time.perf_counter() - tick) * 1e3

    tick = time.perf_counter()
    if len(fine) < 3:
        raise _stage_error(DegenerateGeometryError(
            f"only {len(fine)} fine correspondences"), Stage.FINE)
    try:
        transform = weighted_svd(source.points[fine.pairs[:, 0]],
                                 target.points[fine.pairs[:, 1]], fine.weights)
    except DegenerateGeometryError as exc:
        raise _stage_error(exc, Stage.FINE)
    timings["svd_ms"] = (time.perf_counter() - tick) * 1e3
    timings["total_ms"] = (time.perf_counter() - t_start) * 1e3

    return RegistrationResult(
        transform=transform,
        coarse_transform=coarse_transform,
        coarse=coarse,
        fine=fine,
        inlier_count=int(inlier_mask.sum()),
        iterations_used=iterations,
        timings_ms=timings,
        source_keypoints=kp_src,
        target_keypoints=kp_tgt,
    )
