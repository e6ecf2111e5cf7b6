import logging
from dataclasses import dataclass

import numpy as np
from PIL import ImageColor
from scipy.spatial import cKDTree

from dentmesh import CONFIG
from dentmesh.exceptions import MissingLabels, TooFewBoundaryPoints, LengthMismatch, DentmeshException

logger = logging.getLogger(__name__)

BOUNDARY_COLOR = ImageColor.getrgb('red')
INTERIOR_COLOR = ImageColor.getrgb('lightgray')


@dataclass(frozen=True, eq=False)
class BoundarySet:
    indices: np.ndarray  # sorted point indices
    k_used: int

    def __len__(self):
        return len(self.indices)

    def mask(self, n):
        mask = np.zeros(n, dtype=bool)
        mask[self.indices] = True
        return mask


@dataclass(frozen=True)
class DensityReport:
    """Mean over boundary points of the mean distance to their m nearest other boundary points"""
    avg_distance: float
    m: int
    boundary_count: int
    units: str = 'normalized'

    def to_dict(self):
        return {'avg_distance': self.avg_distance, 'm': self.m, 'boundary_count': self.boundary_count,
                'units': self.units}


def nearest_neighbors(positions, k, tree=None):
    """
    Exact k nearest neighbors of every point, excluding the point itself. Equal distances are ordered by the
    smaller index, which keeps the result independent of the tree layout. Returns (indices, distances), (N, k).
    """
    positions = np.asarray(positions, dtype=np.float64)
    n = len(positions)
    if n <= k:
        raise DentmeshException(f"Need more than {k} points, got {n}.")
    tree = tree or cKDTree(positions)
    query_k = min(n, k + 1 + 8)
    distances, indices = tree.query(positions, k=query_k)
    distances = distances.reshape(n, -1)
    indices = indices.reshape(n, -1)
    result = np.empty((n, k), dtype=np.int64)
    result_distances = np.empty((n, k))
    for i in range(n):
        d, idx = distances[i], indices[i]
        keep = idx != i
        d, idx = d[keep], idx[keep]
        kth = np.sort(d)[k - 1]
        if query_k < n and d.max() <= kth:
            # the tie at the k-th distance may continue past the returned neighbors
            idx = np.asarray([j for j in tree.query_ball_point(positions[i], kth) if j != i], dtype=np.int64)
            d = np.linalg.norm(positions[idx] - positions[i], axis=1)
        order = np.lexsort((idx, d))[:k]
        result[i] = idx[order]
        result_distances[i] = d[order]
    return result, result_distances


def detect_boundary_points(cloud, k=CONFIG['BOUNDARY_K'], labels=None):
    """A point is on the boundary when strictly more than half of its k nearest neighbors carry another label"""
    labels = cloud.labels if labels is None else np.asarray(labels, dtype=np.int64)
    if labels is None:
        raise MissingLabels("Boundary detection needs labels.")
    if len(labels) != cloud.count:
        raise LengthMismatch(f"{len(labels)} labels for {cloud.count} points.")
    neighbors, _ = nearest_neighbors(cloud.positions, k)
    differing = np.count_nonzero(labels[neighbors] != labels[:, None], axis=1)
    indices = np.flatnonzero(differing > k // 2)
    logger.debug(f"{len(indices)} boundary points out of {cloud.count} (k={k})")
    return BoundarySet(indices=indices, k_used=k)


def boundary_mask(cloud, k=CONFIG['BOUNDARY_K']):
    """Binary per-point boundary target, as used to supervise a boundary segmentation head"""
    return detect_boundary_points(cloud, k).mask(cloud.count).astype(np.uint8)


def boundary_density(cloud, boundary, m=CONFIG['DENSITY_M']):
    count = len(boundary)
    if count <= m:
        raise TooFewBoundaryPoints(f"{count} boundary points, need more than {m}.")
    points = cloud.positions[boundary.indices]
    distances, _ = cKDTree(points).query(points, k=m + 1)
    # column 0 is the point itself (or a coincident duplicate at distance 0, which is equivalent)
    per_point = distances[:, 1:].mean(axis=1)
    return DensityReport(avg_distance=float(per_point.mean()), m=m, boundary_count=count)


def boundary_iou(pred_labels, gt_labels, cloud, k=CONFIG['BOUNDARY_K']):
    pred_labels = np.asarray(pred_labels, dtype=np.int64)
    gt_labels = np.asarray(gt_labels, dtype=np.int64)
    if len(pred_labels) != len(gt_labels) or len(gt_labels) != cloud.count:
        raise LengthMismatch(f"Label arrays of length {len(pred_labels)} and {len(gt_labels)} "
                             f"for {cloud.count} points.")
    neighbors, _ = nearest_neighbors(cloud.positions, k)
    pred = np.count_nonzero(pred_labels[neighbors] != pred_labels[:, None], axis=1) > k // 2
    gt = np.count_nonzero(gt_labels[neighbors] != gt_labels[:, None], axis=1) > k // 2
    union = np.count_nonzero(pred | gt)
    if not union:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def boundary_colors(n, boundary):
    colors = np.tile(np.array(INTERIOR_COLOR, dtype=np.uint8), (n, 1))
    colors[boundary.indices] = BOUNDARY_COLOR
    return colors
