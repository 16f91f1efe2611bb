"""Point clouds, voxel-grid hierarchies, exact kNN and fine-to-coarse
partitioning.

Grid keys are computed in a per-cloud *grid frame*. With the default
``"pca"`` frame (centroid origin, principal axes with third-moment sign
disambiguation) the whole hierarchy commutes with rigid motions of the input
and does not depend on the order in which points are stored.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyLevel, KTooLarge

BRUTE_FORCE_BELOW = 512
GRID_FRAMES = ("pca", "centroid", "global")


def as_points(points):
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1 and pts.shape[0] == 3:
        pts = pts[None, :]
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("points contain non-finite coordinates")
    return pts


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        pts = as_points(self.points).copy()
        if len(pts) == 0:
            raise ValueError("a point cloud needs at least one point")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)

    def transformed(self, t):
        from .geometry import apply_transform
        return PointCloud(apply_transform(t, self.points))


@dataclass(frozen=True)
class GridFrame:
    """Origin and axes (columns of ``axes``) in which voxel keys are taken."""

    origin: np.ndarray
    axes: np.ndarray

    def to_local(self, points):
        return (points - self.origin) @ self.axes


def grid_frame(points, mode="pca"):
    points = as_points(points)
    if mode == "global":
        return GridFrame(np.zeros(3), np.eye(3))
    centroid = points.mean(axis=0)
    if mode == "centroid":
        return GridFrame(centroid, np.eye(3))
    if mode != "pca":
        raise ValueError(f"unknown grid frame {mode!r}; expected one of {GRID_FRAMES}")
    centred = points - centroid
    cov = centred.T @ centred / len(points)
    _, vecs = np.linalg.eigh(cov)
    axes = vecs[:, ::-1].copy()
    for k in range(2):
        skew = np.sum((centred @ axes[:, k]) ** 3)
        if skew < 0:
            axes[:, k] = -axes[:, k]
    axes[:, 2] = np.cross(axes[:, 0], axes[:, 1])
    return GridFrame(centroid, axes)


def voxel_downsample(points, voxel, frame=None):
    """Replace the points of every occupied voxel by their centroid.

    Parameters
    ----------
    points : array_like, shape (N, 3)
    voxel : float
        Edge length of the cubic cells.
    frame : GridFrame, optional
        Frame in which cell keys ``floor(coord / voxel)`` are evaluated;
        the global frame when omitted.

    Returns
    -------
    centroids : ndarray, shape (V, 3)
        One point per occupied voxel, ordered by voxel key.
    parent : ndarray of int, shape (N,)
        Output index of the voxel holding each input point.
    """
    if not voxel > 0:
        raise ValueError("voxel size must be positive")
    pts = as_points(points)
    local = pts if frame is None else frame.to_local(pts)
    keys = np.floor(local / voxel).astype(np.int64)
    # members sorted by coordinates too, so centroid sums do not depend on input order
    order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0], keys[:, 2], keys[:, 1], keys[:, 0]))
    sorted_keys = keys[order]
    new_group = np.ones(len(order), dtype=bool)
    new_group[1:] = np.any(sorted_keys[1:] != sorted_keys[:-1], axis=1)
    starts = np.flatnonzero(new_group)
    sums = np.add.reduceat(pts[order], starts, axis=0)
    counts = np.diff(np.append(starts, len(order)))
    centroids = sums / counts[:, None]
    parent = np.empty(len(pts), dtype=np.int64)
    parent[order] = np.cumsum(new_group) - 1
    return centroids, parent


@dataclass(frozen=True)
class CloudHierarchy:
    """Levels ordered fine to coarse; ``parents[i]`` maps level ``i`` points
    to their level ``i + 1`` voxel."""

    levels: list
    parents: list
    frame: GridFrame
    voxels: list = field(default_factory=list)

    def __len__(self):
        return len(self.levels)

    @property
    def dense(self):
        return self.levels[1]

    @property
    def superpoints(self):
        return self.levels[-1]


def build_hierarchy(points, base_voxel=0.025, n_levels=4, grid_frame_mode="pca"):
    """Level 0 is the input; level ``i >= 1`` is the voxel-downsampled level
    ``i - 1`` with cell size ``base_voxel * 2**i``."""
    if n_levels < 2:
        raise ValueError("a hierarchy needs at least two levels")
    pts = np.asarray(points, dtype=float)
    if pts.size == 0:
        raise EmptyLevel("input cloud is empty")
    pts = as_points(pts)
    frame = grid_frame(pts, grid_frame_mode)
    levels = [pts]
    parents = []
    voxels = [0.0]
    for i in range(1, n_levels):
        voxel = base_voxel * 2 ** i
        coarse, parent = voxel_downsample(levels[-1], voxel, frame)
        if len(coarse) == 0:
            raise EmptyLevel(f"level {i} is empty")
        levels.append(coarse)
        parents.append(parent)
        voxels.append(voxel)
    return CloudHierarchy(levels, parents, frame, voxels)


def _brute_knn(queries, points, k, block=256):
    out = np.empty((len(queries), k), dtype=np.int64)
    for s in range(0, len(queries), block):
        q = queries[s:s + block]
        diff = q[:, None, :] - points[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        out[s:s + block] = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return out


def knn(queries, points, k):
    """Indices of the ``k`` nearest ``points`` for every query, nearest
    first, with distance ties broken by the lower index.

    Raises
    ------
    KTooLarge
        If ``k`` exceeds the number of points.
    """
    queries = as_points(queries)
    points = as_points(points)
    if k > len(points):
        raise KTooLarge(f"k={k} exceeds the {len(points)} available points")
    if k < 1:
        raise ValueError("k must be at least 1")
    if len(points) < BRUTE_FORCE_BELOW:
        return _brute_knn(queries, points, k)
    kq = min(k + 1, len(points))
    dist, idx = cKDTree(points).query(queries, k=kq)
    dist = dist.reshape(len(queries), kq)
    idx = idx.reshape(len(queries), kq)
    order = np.lexsort((idx, dist), axis=1)
    dist = np.take_along_axis(dist, order, axis=1)
    idx = np.take_along_axis(idx, order, axis=1)
    out = idx[:, :k].astype(np.int64)
    if kq > k:
        # a tie straddling the k-th slot may hide a lower index beyond kq
        tied = np.flatnonzero(dist[:, k - 1] == dist[:, k])
        if len(tied):
            out[tied] = _brute_knn(queries[tied], points, k)
    return out


@dataclass(frozen=True)
class NeighborhoodPartition:
    """``labels[p]`` is the coarse point owning fine point ``p``;
    ``groups[c]`` lists the fine indices owned by coarse point ``c``."""

    labels: np.ndarray
    groups: list

    def __getitem__(self, c):
        return self.groups[c]


def assign_fine_to_coarse(fine, coarse):
    fine = as_points(fine)
    coarse = as_points(coarse)
    if len(fine) == 0 or len(coarse) == 0:
        raise ValueError("both clouds must be nonempty")
    labels = knn(fine, coarse, 1)[:, 0]
    order = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[order], np.arange(len(coarse) + 1))
    groups = [order[bounds[c]:bounds[c + 1]] for c in range(len(coarse))]
    return NeighborhoodPartition(labels, groups)


def invariant_subsample(points, max_points, seed, frame_mode="pca"):
    """Seeded draw of ``max_points`` indices that depends neither on the
    storage order of ``points`` nor (for the ``"pca"`` frame) on their pose.

    Points are ranked lexicographically by their grid-frame coordinates
    before the seeded draw, and the selection is returned in that order.
    """
    points = as_points(points)
    if len(points) <= max_points:
        return np.arange(len(points))
    local = grid_frame(points, frame_mode).to_local(points)
    ranked = np.lexsort((local[:, 2], local[:, 1], local[:, 0]))
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(len(points), size=max_points, replace=False))
    return ranked[pick]
