"""Deterministic dual-level point descriptors.

Two receptive fields are computed from the same machinery: a small-radius
("low") angular-histogram descriptor that keeps local geometric detail, and a
large-radius ("high") descriptor that additionally encodes the neighborhood's
covariance shape, trading detail for global distinctiveness. Both are rigid
invariant and need no training.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .cloud import PointCloud, SpatialIndex, build_index, _require_nonempty
from .errors import ValidationError

_UNIT_TOL = 1e-6
# Cosine threshold below which the centroid direction no longer disambiguates
# a normal's sign and the lexicographic fallback rule applies.
_SIGN_COS_TOL = 1e-6


class Level(str, Enum):
    LOW = "low"
    HIGH = "high"


@dataclass(frozen=True)
class DescriptorParams:
    """Receptive-field radii and histogram resolution.

    The low level splits its neighborhood into ``low_rings`` radial rings
    with one angular histogram each (dimension 3 * bins * low_rings), which
    keeps nearby points distinguishable on weakly structured surfaces. The
    high level is a single histogram plus the trace-normalized covariance
    eigenvalue triple (dimension 3 * bins + 3).
    """

    low_radius: float = 0.1
    high_radius: float = 0.4
    bins: int = 11
    normal_radius: float = 0.1
    low_rings: int = 3

    def __post_init__(self):
        if not 0 < self.low_radius < self.high_radius:
            raise ValidationError("require 0 < low_radius < high_radius")
        if self.bins < 2:
            raise ValidationError("bins must be >= 2")
        if not self.normal_radius > 0:
            raise ValidationError("normal_radius must be positive")
        if self.low_rings < 1:
            raise ValidationError("low_rings must be >= 1")

    def radius(self, level: Level) -> float:
        return self.low_radius if level == Level.LOW else self.high_radius

    def dimension(self, level: Level) -> int:
        if level == Level.LOW:
            return 3 * self.bins * self.low_rings
        return 3 * self.bins + 3


@dataclass(frozen=True)
class DescriptorSet:
    """Per-point feature vectors at one level; rows are unit or zero."""

    level: Level
    vectors: np.ndarray

    def __post_init__(self):
        vec = np.asarray(self.vectors, dtype=np.float64)
        if vec.ndim != 2 or vec.shape[1] < 1:
            raise ValidationError(f"descriptor vectors must be (N, D), got {vec.shape}")
        if not np.isfinite(vec).all():
            raise ValidationError("descriptor vectors contain NaN or Inf")
        norms = np.linalg.norm(vec, axis=1)
        bad = ~((np.abs(norms - 1.0) <= _UNIT_TOL) | (norms <= _UNIT_TOL))
        if bad.any():
            raise ValidationError("descriptor rows must be unit length or zero")
        vec = vec.copy()
        vec.setflags(write=False)
        object.__setattr__(self, "vectors", vec)
        object.__setattr__(self, "level", Level(self.level))

    @property
    def dimension(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.vectors.shape[0]


def feature_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Euclidean distance between two feature vectors."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValidationError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


def _neighbor_lists(index: SpatialIndex, radius: float) -> list[np.ndarray]:
    return index.radius_batch(index.cloud.points, radius)


def _flatten_pairs(neighborhoods: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    counts = np.array([len(nb) for nb in neighborhoods], dtype=np.intp)
    centers = np.repeat(np.arange(len(neighborhoods), dtype=np.intp), counts)
    members = np.concatenate(neighborhoods) if counts.sum() else np.empty(0, dtype=np.intp)
    return centers, members


def _neighborhood_covariances(points: np.ndarray,
                              neighborhoods: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Per-point covariance of the neighborhood (self included).

    Returns (covariances (N,3,3), member counts (N,)).
    """
    n = points.shape[0]
    centers, members = _flatten_pairs(neighborhoods)
    counts = np.bincount(centers, minlength=n).astype(np.float64)
    member_pts = points[members]
    sums = np.stack([np.bincount(centers, weights=member_pts[:, c], minlength=n)
                     for c in range(3)], axis=1)
    sq = np.empty((n, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            acc = np.bincount(centers, weights=member_pts[:, a] * member_pts[:, b],
                              minlength=n)
            sq[:, a, b] = acc
            sq[:, b, a] = acc
    safe = np.maximum(counts, 1.0)
    means = sums / safe[:, None]
    cov = sq / safe[:, None, None] - means[:, :, None] * means[:, None, :]
    return cov, counts


def estimate_normals(cloud: PointCloud, radius: float,
                     index: SpatialIndex | None = None) -> np.ndarray:
    """Unit surface normals from neighborhood covariance.

    The normal is the smallest-eigenvalue eigenvector, signed to point along
    the centroid-to-point direction. Points whose radius neighborhood holds
    fewer than 3 points (self included) get the flag value (0, 0, 0).
    """
    _require_nonempty(cloud)
    if not radius > 0:
        raise ValidationError("radius must be positive")
    if index is None:
        index = build_index(cloud)
    pts = cloud.points
    cov, counts = _neighborhood_covariances(pts, _neighbor_lists(index, radius))
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0].copy()

    outward = pts - pts.mean(axis=0)
    lengths = np.linalg.norm(outward, axis=1)
    cos = np.einsum("ij,ij->i", normals, outward) / np.maximum(lengths, 1e-300)
    flip = cos < -_SIGN_COS_TOL
    normals[flip] *= -1.0
    # Degenerate direction (normal perpendicular to the centroid ray, e.g. a
    # plane through the centroid): sign the dominant component positive.
    undecided = np.abs(cos) <= _SIGN_COS_TOL
    if undecided.any():
        sub = normals[undecided]
        dominant = np.abs(sub).argmax(axis=1)
        sign = np.sign(sub[np.arange(len(sub)), dominant])
        sub[sign < 0] *= -1.0
        normals[undecided] = sub

    normals[counts < 3] = 0.0
    return normals


def _cross_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    out[:, 0] = a[:, 1] * b[:, 2] - a[:, 2] * b[:, 1]
    out[:, 1] = a[:, 2] * b[:, 0] - a[:, 0] * b[:, 2]
    out[:, 2] = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    return out


# Histogram sample budget per point at the wide receptive field; striding the
# index-sorted neighbor list keeps the subset deterministic and rigid
# invariant while bounding the quadratic blowup on dense clouds.
_MAX_CENTER_PAIRS = 96


def _pairs_center(neighborhoods: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Center-to-neighbor pairs: (histogram row, pair source, pair target)."""
    capped = []
    for nb in neighborhoods:
        if nb.size > _MAX_CENTER_PAIRS:
            stride = int(np.ceil(nb.size / _MAX_CENTER_PAIRS))
            nb = nb[::stride]
        capped.append(nb)
    centers, members = _flatten_pairs(capped)
    keep = centers != members
    return centers[keep], centers[keep], members[keep]


def _pairs_full(neighborhoods: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All ordered pairs within each neighborhood, attributed to its center."""
    rows, sources, targets = [], [], []
    for center, nb in enumerate(neighborhoods):
        m = nb.size
        if m < 2:
            continue
        a = np.repeat(nb, m)
        b = np.tile(nb, m)
        keep = a != b
        rows.append(np.full(keep.sum(), center, dtype=np.intp))
        sources.append(a[keep])
        targets.append(b[keep])
    if not rows:
        empty = np.empty(0, dtype=np.intp)
        return empty, empty.copy(), empty.copy()
    return np.concatenate(rows), np.concatenate(sources), np.concatenate(targets)


def _angular_histograms(points: np.ndarray, normals: np.ndarray,
                        neighborhoods: list[np.ndarray], bins: int,
                        full_pairs: bool, rings: int = 1,
                        radius: float = 1.0) -> np.ndarray:
    """Histogram of (alpha, phi, theta) pair angles per center point.

    ``full_pairs`` histograms every ordered pair inside the neighborhood
    (denser signal, quadratic cost; used for the small low-level field)
    instead of only center-to-neighbor pairs. With ``rings`` > 1 a pair
    votes into the radial ring of its member point's distance from the
    center, so nearby points on weakly structured surfaces still get
    distinct signatures.
    """
    n = points.shape[0]
    if full_pairs:
        centers, pair_src, members = _pairs_full(neighborhoods)
    else:
        centers, pair_src, members = _pairs_center(neighborhoods)
    hist = np.zeros((n, 3 * bins * rings))
    if centers.size == 0:
        return hist

    diff = points[members] - points[pair_src]
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    n_c = normals[pair_src]
    n_m = normals[members]
    valid = (
        (dist > 1e-12)
        & (np.einsum("ij,ij->i", n_c, n_c) > 0.5)
        & (np.einsum("ij,ij->i", n_m, n_m) > 0.5)
    )
    centers, pair_src, members = centers[valid], pair_src[valid], members[valid]
    if centers.size == 0:
        return hist
    diff, dist = diff[valid], dist[valid]
    n_c, n_m = n_c[valid], n_m[valid]

    d_unit = diff / dist[:, None]
    v = _cross_rows(d_unit, n_c)
    v_norm = np.sqrt(np.einsum("ij,ij->i", v, v))
    ok = v_norm > 1e-9
    centers, pair_src, members = centers[ok], pair_src[ok], members[ok]
    d_unit, v = d_unit[ok], v[ok] / v_norm[ok, None]
    n_c, n_m = n_c[ok], n_m[ok]
    if centers.size == 0:
        return hist
    w = _cross_rows(n_c, v)

    alpha = np.einsum("ij,ij->i", v, n_m)
    phi = np.einsum("ij,ij->i", n_c, d_unit)
    theta = np.arctan2(np.einsum("ij,ij->i", w, n_m), np.einsum("ij,ij->i", n_c, n_m))

    cols = 3 * bins * rings
    if rings > 1:
        off = points[members] - points[centers]
        center_dist = np.sqrt(np.einsum("ij,ij->i", off, off))
        ring_base = np.minimum((center_dist / radius * rings).astype(np.intp),
                               rings - 1) * (3 * bins)
    else:
        ring_base = np.zeros(centers.size, dtype=np.intp)
    row_base = centers * cols + ring_base

    flat_indices = []
    flat_weights = []

    def accumulate(values: np.ndarray, lo: float, hi: float, offset: int,
                   circular: bool) -> None:
        # Linear soft binning: each value splits its unit mass between the
        # two nearest bin centers, so the histogram varies continuously with
        # the input. The angle feature wraps around instead of clamping.
        coord = (values - lo) / (hi - lo) * bins - 0.5
        left = np.floor(coord).astype(np.intp)
        frac = coord - left
        right = left + 1
        if circular:
            left %= bins
            right %= bins
        else:
            left = np.clip(left, 0, bins - 1)
            right = np.clip(right, 0, bins - 1)
        flat_indices.append(row_base + offset + left)
        flat_weights.append(1.0 - frac)
        flat_indices.append(row_base + offset + right)
        flat_weights.append(frac)

    accumulate(alpha, -1.0, 1.0, 0, circular=False)
    accumulate(phi, -1.0, 1.0, bins, circular=False)
    accumulate(theta, -np.pi, np.pi, 2 * bins, circular=True)
    hist += np.bincount(np.concatenate(flat_indices),
                        weights=np.concatenate(flat_weights),
                        minlength=n * cols).reshape(n, cols)
    # Relative frequencies per block, so the histogram is invariant to
    # neighborhood size (sampling density varies between cloud pairs).
    for block in range(3 * rings):
        span = slice(block * bins, (block + 1) * bins)
        totals = hist[:, span].sum(axis=1, keepdims=True)
        hist[:, span] = np.where(totals > 0, hist[:, span] / np.maximum(totals, 1e-300), 0.0)
    return hist


def compute_descriptors(cloud: PointCloud, level: Level, params: DescriptorParams,
                        normals: np.ndarray | None = None,
                        index: SpatialIndex | None = None) -> DescriptorSet:
    """Per-point descriptor at the given level's receptive field.

    ``normals`` and ``index`` may be precomputed to share them across levels;
    both default to fresh, deterministic computations. Points with no usable
    neighborhood yield the zero vector.
    """
    _require_nonempty(cloud)
    level = Level(level)
    if index is None:
        index = build_index(cloud)
    if normals is None:
        normals = estimate_normals(cloud, params.normal_radius, index=index)
    else:
        normals = np.asarray(normals, dtype=np.float64)
        if normals.shape != cloud.points.shape:
            raise ValidationError("normals must match the cloud point-for-point")

    neighborhoods = _neighbor_lists(index, params.radius(level))
    features = _angular_histograms(
        cloud.points, normals, neighborhoods, params.bins,
        full_pairs=(level == Level.LOW),
        rings=params.low_rings if level == Level.LOW else 1,
        radius=params.radius(level),
    )

    if level == Level.HIGH:
        cov, counts = _neighborhood_covariances(cloud.points, neighborhoods)
        eigvals = np.linalg.eigvalsh(cov)[:, ::-1]  # descending
        trace = eigvals.sum(axis=1)
        shape = np.where(trace[:, None] > 0, eigvals / np.maximum(trace[:, None], 1e-300), 0.0)
        shape[counts < 2] = 0.0
        features = np.hstack([features, shape])

    norms = np.linalg.norm(features, axis=1)
    nonzero = norms > 0
    features[nonzero] /= norms[nonzero, None]
    return DescriptorSet(level, features)
