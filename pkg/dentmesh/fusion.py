"""
Cross-modal label fusion: per-pixel class scores of every rendered view are carried back to the points that project
onto those pixels, averaged over views, one-hot encoded and appended to the geometric point features.
"""
import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import softmax
from scipy.spatial import cKDTree

from dentmesh import NUM_CLASSES
from dentmesh.exceptions import ShapeMismatch, LengthMismatch, NoVisiblePoints, ParseError
from dentmesh.render import NONE, project_points
from dentmesh.util import write_json, read_json

logger = logging.getLogger(__name__)

POINT_FIELDS = ('x', 'y', 'z', 'nx', 'ny', 'nz')


def check_score_map(scores, view):
    scores = np.asarray(scores)
    expected = (NUM_CLASSES,) + view.depth.shape
    if scores.shape != expected:
        raise ShapeMismatch(f"Score map of shape {scores.shape}, expected {expected}.")
    if not np.isfinite(scores).all():
        raise ShapeMismatch("Score map holds non-finite values.")
    return scores


class OracleScores(Sequence):
    """Oracle score maps of a list of views, built on access so only the maps in use are held in memory"""

    def __init__(self, views, labels):
        self.views = views
        self.labels = np.asarray(labels, dtype=np.int64)

    def __len__(self):
        return len(self.views)

    def __getitem__(self, i):
        return oracle_score_map(self.views[i], self.labels)


class ScoreFiles(Sequence):
    """view_XXX.npy score maps of a directory, read on access"""

    def __init__(self, directory, count):
        self.directory = Path(directory)
        self.count = count
        missing = [p for p in map(self.path, range(count)) if not p.exists()]
        if missing:
            raise ParseError(f"Missing score maps: {', '.join(str(p) for p in missing)}")

    def path(self, i):
        return self.directory / f"view_{i:03}.npy"

    def __len__(self):
        return self.count

    def __getitem__(self, i):
        return load_score_map(self.path(i))


def oracle_score_map(view, labels):
    """One-hot scores of the labels of the vertices seen at each pixel; empty pixels score as background"""
    pixel_labels = label_image(view, labels)
    scores = np.zeros((NUM_CLASSES,) + pixel_labels.shape, dtype=np.float32)
    np.put_along_axis(scores, pixel_labels[None], 1.0, axis=0)
    return scores


def label_image(view, labels):
    """Class id seen at every pixel, 0 where nothing was drawn"""
    labels = np.asarray(labels, dtype=np.int64)
    return np.where(view.vertex_id == NONE, 0, labels[np.maximum(view.vertex_id, 0)])


def save_score_map(path, scores):
    np.save(path, np.asarray(scores, dtype=np.float32))
    return path


def load_score_map(path):
    try:
        return np.load(path, allow_pickle=False)
    except (OSError, ValueError) as e:
        raise ParseError(f"Cannot read score map {path}: {e}")


@dataclass(frozen=True, eq=False)
class GatheredScores:
    """scores[i] is the mean score vector over the views seeing point i; counts[i] is how many views see it"""
    scores: np.ndarray
    counts: np.ndarray

    @property
    def never_visible(self):
        return self.counts == 0

    @property
    def visible(self):
        return self.counts > 0


def _view_contribution(cloud, view, scores, use_softmax, projection):
    scores = check_score_map(scores, view)
    projection = projection or project_points(cloud, view)
    visible = projection.visible
    total = np.zeros((cloud.count, NUM_CLASSES))
    cols, rows = projection.pixels[visible, 0], projection.pixels[visible, 1]
    picked = scores[:, rows, cols].T.astype(np.float64)
    total[visible] = softmax(picked, axis=1) if use_softmax else picked
    return total, visible.astype(np.int64)


def gather_pixel_scores(cloud, views, scores, use_softmax=False, projections=None, threads=1):
    """
    views and scores are aligned sequences (scores may build each map on access, see OracleScores); projections,
    when given, are reused instead of projecting again. Views are processed in parallel but summed in list order.
    """
    if len(views) != len(scores):
        raise LengthMismatch(f"{len(views)} views but {len(scores)} score maps.")
    projections = projections or [None] * len(views)

    def contribution(i):
        return _view_contribution(cloud, views[i], scores[i], use_softmax, projections[i])

    total = np.zeros((cloud.count, NUM_CLASSES))
    counts = np.zeros(cloud.count, dtype=np.int64)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        for part, seen in executor.map(contribution, range(len(views))):
            total += part
            counts += seen
    averaged = np.zeros_like(total)
    visible = counts > 0
    averaged[visible] = total[visible] / counts[visible, None]
    hidden = int(np.count_nonzero(~visible))
    if hidden:
        logger.warning(f"{hidden} of {cloud.count} points are not visible in any view.")
    return GatheredScores(scores=averaged, counts=counts)


def one_hot_encode(scores, visible=None):
    """
    One-hot at the arg max, lowest class on ties. Every visible row gets exactly one 1, an all-zero score row
    included (class 0); rows of points never seen stay all-zero. Without a mask, rows with any nonzero score count
    as visible.
    """
    scores = np.asarray(scores, dtype=np.float64)
    visible = np.any(scores != 0, axis=1) if visible is None else np.asarray(visible, dtype=bool)
    if len(visible) != len(scores):
        raise LengthMismatch(f"{len(visible)} visibility flags for {len(scores)} score rows.")
    encoded = np.zeros(scores.shape, dtype=np.float32)
    rows = np.flatnonzero(visible)
    encoded[rows, np.argmax(scores[rows], axis=1)] = 1.0
    return encoded


@dataclass(frozen=True, eq=False)
class FusedPointFeatures:
    matrix: np.ndarray  # (N, point width + 17) float32
    visibility: np.ndarray
    fields: tuple = POINT_FIELDS

    @property
    def width(self):
        return self.matrix.shape[1]

    @property
    def one_hot(self):
        return self.matrix[:, len(self.fields):]

    def header(self):
        return {
            'rows': self.matrix.shape[0],
            'width': self.width,
            'dtype': 'float32',
            'byte_order': 'little',
            'layout': 'row-major',
            'fields': list(self.fields) + [f"class_{c}" for c in range(NUM_CLASSES)],
            'visibility': self.visibility,
        }

    def save(self, path):
        """Writes <path> as raw float32 rows and <path>.json with the header"""
        path = Path(path)
        with open(path, 'wb') as f:
            f.write(np.ascontiguousarray(self.matrix, dtype='<f4').tobytes())
        header_path = path.with_name(path.name + '.json')
        write_json(header_path, self.header())
        return path, header_path

    @classmethod
    def load(cls, path):
        path = Path(path)
        header = read_json(path.with_name(path.name + '.json'))
        matrix = np.fromfile(path, dtype='<f4')
        if matrix.size != header['rows'] * header['width']:
            raise ParseError(f"{path} does not match its header.")
        point_fields = tuple(header['fields'][:header['width'] - NUM_CLASSES])
        return cls(matrix=matrix.reshape(header['rows'], header['width']),
                   visibility=np.asarray(header['visibility'], dtype=np.int64), fields=point_fields)


def concat_features(cloud, one_hots, visibility=None, point_features=None, fields=POINT_FIELDS):
    point_features = cloud.features() if point_features is None else np.asarray(point_features)
    one_hots = np.asarray(one_hots, dtype=np.float32)
    if len(one_hots) != cloud.count or len(point_features) != cloud.count:
        raise LengthMismatch(f"{len(one_hots)} encodings for {cloud.count} points.")
    if one_hots.shape[1] != NUM_CLASSES:
        raise ShapeMismatch(f"Encodings must have {NUM_CLASSES} columns.")
    if len(fields) != point_features.shape[1]:
        fields = tuple(f"f{i}" for i in range(point_features.shape[1]))
    visibility = np.zeros(cloud.count, dtype=np.int64) if visibility is None else np.asarray(visibility)
    matrix = np.hstack([point_features.astype(np.float32), one_hots])
    return FusedPointFeatures(matrix=matrix, visibility=visibility, fields=tuple(fields))


def fill_from_nearest_visible(positions, labels, visible):
    """Points outside visible take the label of their nearest visible point"""
    if not visible.any():
        raise NoVisiblePoints("No point is visible in any view.")
    labels = labels.copy()
    hidden = np.flatnonzero(~visible)
    if len(hidden):
        seen = np.flatnonzero(visible)
        _, nearest = cKDTree(positions[seen]).query(positions[hidden])
        labels[hidden] = labels[seen[nearest]]
    return labels


def majority_vote_segment(cloud, views, scores, use_softmax=False, projections=None, threads=1, gathered=None):
    gathered = gathered or gather_pixel_scores(cloud, views, scores, use_softmax, projections, threads)
    labels = np.argmax(gathered.scores, axis=1).astype(np.int64)
    return fill_from_nearest_visible(cloud.positions, labels, gathered.visible)
