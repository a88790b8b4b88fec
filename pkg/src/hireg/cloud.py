"""Point cloud and rigid transform primitives plus a spatial index.

Everything here is immutable after construction and safe to share across
threads. Distances are Euclidean, radii are meters, radius queries use closed
balls (boundary points included).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import ValidationError

# Tolerance for rotation-matrix validity (orthonormality and determinant).
ROTATION_TOL = 1e-9

# Relative inflation applied before handing a radius to the kd-tree, so the
# exact closed-ball filter afterwards never misses a boundary point.
_BALL_SLACK = 1.0 + 1e-12


def _as_points(array: np.ndarray) -> np.ndarray:
    pts = np.asarray(array, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValidationError(f"expected points with shape (N, 3), got {pts.shape}")
    if not np.isfinite(pts).all():
        raise ValidationError("points contain NaN or Inf coordinates")
    return pts


def _as_vector3(value, name: str) -> np.ndarray:
    vec = np.asarray(value, dtype=np.float64).reshape(-1)
    if vec.shape != (3,):
        raise ValidationError(f"{name} must be a 3-vector, got shape {vec.shape}")
    if not np.isfinite(vec).all():
        raise ValidationError(f"{name} contains NaN or Inf")
    return vec


@dataclass(frozen=True)
class PointCloud:
    """An ordered set of 3D points (meters) with an opaque id label."""

    points: np.ndarray
    cloud_id: str = ""

    def __post_init__(self):
        pts = _as_points(self.points).copy()
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


def _require_nonempty(cloud: PointCloud) -> None:
    if len(cloud) < 1:
        raise ValidationError("operation requires a cloud with at least one point")


@dataclass(frozen=True)
class RigidTransform:
    """A proper rotation (3x3) plus translation (meters)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        if rot.shape != (3, 3) or not np.isfinite(rot).all():
            raise ValidationError("rotation must be a finite 3x3 matrix")
        if np.abs(rot.T @ rot - np.eye(3)).max() > ROTATION_TOL:
            raise ValidationError("rotation is not orthonormal within tolerance")
        if abs(np.linalg.det(rot) - 1.0) > ROTATION_TOL:
            raise ValidationError("rotation determinant is not +1 within tolerance")
        trans = _as_vector3(self.translation, "translation")
        rot = rot.copy()
        rot.setflags(write=False)
        trans = trans.copy()
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))


def transform_points(points: np.ndarray, transform: RigidTransform) -> np.ndarray:
    """Apply ``transform`` to an (N, 3) array, preserving order."""
    return points @ transform.rotation.T + transform.translation


def apply_transform(cloud: PointCloud, transform: RigidTransform) -> PointCloud:
    """Return a new cloud with every point rotated then translated."""
    _require_nonempty(cloud)
    return PointCloud(transform_points(cloud.points, transform), cloud.cloud_id)


def compose(first: RigidTransform, second: RigidTransform) -> RigidTransform:
    """Transform equivalent to applying ``second`` then ``first``."""
    return RigidTransform(
        first.rotation @ second.rotation,
        first.rotation @ second.translation + first.translation,
    )


def invert(transform: RigidTransform) -> RigidTransform:
    rot_t = transform.rotation.T
    return RigidTransform(rot_t, -(rot_t @ transform.translation))


@dataclass(frozen=True)
class SpatialIndex:
    """Immutable accelerator for radius and k-nearest-neighbor queries.

    Queries return exactly what a brute-force scan over the indexed cloud
    would return; the kd-tree is only used to prefilter candidates.
    """

    cloud: PointCloud
    _tree: cKDTree = field(repr=False)

    def radius_batch(self, centers: np.ndarray, radius: float) -> list[np.ndarray]:
        """Closed-ball radius query for many centers at once (exact)."""
        centers = np.asarray(centers, dtype=np.float64)
        raw = self._tree.query_ball_point(centers, radius * _BALL_SLACK,
                                          return_sorted=True)
        counts = np.fromiter((len(c) for c in raw), dtype=np.intp, count=len(raw))
        if counts.sum() == 0:
            return [np.empty(0, dtype=np.intp) for _ in raw]
        flat = np.fromiter((i for cand in raw for i in cand),
                           dtype=np.intp, count=int(counts.sum()))
        rep = np.repeat(np.arange(len(raw), dtype=np.intp), counts)
        diff = self.cloud.points[flat] - centers[rep]
        # Compare in sqrt space so "distance of the k-th neighbor" computed
        # by callers via np.linalg.norm lands inside its own closed ball.
        keep = np.sqrt(np.einsum("ij,ij->i", diff, diff)) <= radius
        kept_counts = np.bincount(rep[keep], minlength=len(raw))
        return np.split(flat[keep], np.cumsum(kept_counts)[:-1])

    def knn_batch(self, centers: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Raw kd-tree k-NN for many centers; no tie-break guarantee."""
        dists, idx = self._tree.query(np.asarray(centers, dtype=np.float64), k=k)
        return np.atleast_2d(dists), np.atleast_2d(idx)


def build_index(cloud: PointCloud) -> SpatialIndex:
    if len(cloud) == 0:
        raise ValidationError("cannot build a spatial index over an empty cloud")
    return SpatialIndex(cloud, cKDTree(cloud.points))


def radius_query(index: SpatialIndex, center, radius: float) -> np.ndarray:
    """Indices of all points with ||p - center|| <= radius, ascending."""
    if not radius > 0:
        raise ValidationError("radius must be positive")
    center = _as_vector3(center, "center")
    return index.radius_batch(center[None, :], float(radius))[0]


def knn_query(index: SpatialIndex, center, k: int) -> np.ndarray:
    """The k nearest indices in nondecreasing distance order.

    Distance ties are broken by lower point index, including at the k-th
    neighbor boundary.
    """
    n = len(index.cloud)
    if not 1 <= k <= n:
        raise ValidationError(f"k must be in [1, {n}], got {k}")
    center = _as_vector3(center, "center")
    dists, _ = index._tree.query(center, k=k)
    kth = float(np.max(dists))
    # Re-query a closed ball at the k-th distance so boundary ties are all
    # present, then order exactly by (distance, index).
    cand = np.asarray(
        index._tree.query_ball_point(center, kth * _BALL_SLACK + 1e-300),
        dtype=np.intp,
    )
    diff = index.cloud.points[cand] - center
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    order = np.lexsort((cand, dist))
    return cand[order[:k]]
