import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import logsumexp

from dentmesh import CONFIG, NUM_CLASSES
from dentmesh.boundary import boundary_iou
from dentmesh.exceptions import LengthMismatch, InvalidClass, ShapeMismatch, DentmeshException

logger = logging.getLogger(__name__)

NORMALIZATION_TOLERANCE = 1e-6
LOG_CLAMP = CONFIG['LOG_CLAMP']


def _labels(labels, name='labels'):
    labels = np.asarray(labels)
    if labels.ndim != 1 or (labels.size and not np.issubdtype(labels.dtype, np.integer)):
        raise InvalidClass(f"{name} must be a flat array of class ids.")
    return labels.astype(np.int64)


def _check_classes(labels):
    if labels.size and (labels.min() < 0 or labels.max() >= NUM_CLASSES):
        raise InvalidClass(f"Class ids must be in [0, {NUM_CLASSES - 1}].")


def cross_entropy(pred, truth, reduction='mean'):
    """
    Mean (or sum with reduction='sum') over items of -log(pred[item, truth[item]]), probabilities clamped to
    [LOG_CLAMP, 1]. This is the standard form: the truth selects the class and the prediction is inside the log.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = _labels(truth, 'truth')
    if pred.ndim != 2 or pred.shape[1] != NUM_CLASSES:
        raise ShapeMismatch(f"Predictions must be N x {NUM_CLASSES}, got {pred.shape}.")
    if len(pred) != len(truth):
        raise LengthMismatch(f"{len(pred)} predictions for {len(truth)} labels.")
    _check_classes(truth)
    if not np.isfinite(pred).all() or np.any(pred < 0) \
            or np.abs(pred.sum(axis=1) - 1).max(initial=0) > NORMALIZATION_TOLERANCE:
        raise DentmeshException("Prediction rows must be finite probabilities summing to 1.")
    if not len(truth):
        return 0.0
    picked = np.clip(pred[np.arange(len(truth)), truth], LOG_CLAMP, 1.0)
    terms = -np.log(picked)
    total = math.fsum(terms.tolist())
    if reduction == 'sum':
        return total
    if reduction != 'mean':
        raise DentmeshException(f"Unknown reduction '{reduction}'.")
    return total / len(truth)


def image_cross_entropy(probabilities, label_image, reduction='mean'):
    """Cross entropy of a C x H x W probability map against an H x W label image"""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    if probabilities.ndim != 3 or probabilities.shape[1:] != np.shape(label_image):
        raise ShapeMismatch("Probability map and label image sizes differ.")
    flat = probabilities.reshape(probabilities.shape[0], -1).T
    return cross_entropy(flat, np.asarray(label_image).reshape(-1), reduction)


def default_cbl_radius(positions):
    positions = np.asarray(positions, dtype=np.float64)
    return CONFIG['CBL_RADIUS_FRACTION'] * float(np.linalg.norm(positions.max(axis=0) - positions.min(axis=0)))


def cbl_loss(positions, labels, features, radius=None):
    """
    Contrastive boundary loss. For every point x with neighbors N_x within radius (x excluded) the term is
    -log(sum over same-class y of exp(-|F_x - F_y|) / sum over all y of exp(-|F_x - F_y|)), the ratio clamped at
    LOG_CLAMP. Points without neighbors contribute 0; the sum is divided by the total number of points.
    """
    positions = np.asarray(positions, dtype=np.float64)
    labels = _labels(labels)
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[:, None]
    if not len(positions) == len(labels) == len(features):
        raise LengthMismatch(f"{len(positions)} points, {len(labels)} labels, {len(features)} feature rows.")
    if not len(positions):
        return 0.0
    radius = default_cbl_radius(positions) if radius is None else radius
    if radius <= 0:
        raise DentmeshException("CBL radius must be positive.")
    neighborhoods = cKDTree(positions).query_ball_point(positions, radius)
    floor = math.log(LOG_CLAMP)
    terms = []
    for x, neighbors in enumerate(neighborhoods):
        neighbors = np.asarray(sorted(y for y in neighbors if y != x), dtype=np.int64)
        if not len(neighbors):
            continue
        logits = -np.linalg.norm(features[neighbors] - features[x], axis=1)
        same = labels[neighbors] == labels[x]
        if not same.any():
            terms.append(-floor)
            continue
        log_ratio = logsumexp(logits[same]) - logsumexp(logits)
        terms.append(-max(log_ratio, floor))
    return math.fsum(terms) / len(positions)


def per_class_iou(pred_labels, gt_labels, c):
    """Intersection over union of class c, None when neither array holds c"""
    pred_labels, gt_labels = _pair(pred_labels, gt_labels)
    pred, gt = pred_labels == c, gt_labels == c
    union = np.count_nonzero(pred | gt)
    if not union:
        return None
    return np.count_nonzero(pred & gt) / union


def _pair(pred_labels, gt_labels):
    pred_labels = _labels(pred_labels, 'pred')
    gt_labels = _labels(gt_labels, 'gt')
    if len(pred_labels) != len(gt_labels):
        raise LengthMismatch(f"{len(pred_labels)} predicted labels for {len(gt_labels)} ground truth labels.")
    return pred_labels, gt_labels


def miou(pred_labels, gt_labels):
    pred_labels, gt_labels = _pair(pred_labels, gt_labels)
    classes = np.union1d(pred_labels, gt_labels)
    if not len(classes):
        return 0.0
    ious = [per_class_iou(pred_labels, gt_labels, c) for c in classes]
    return math.fsum(ious) / len(ious)


def class_name(c):
    return 'background' if c == 0 else f"T{c}"


def iou_report(pred_labels, gt_labels, cloud=None, k=CONFIG['BOUNDARY_K']):
    """Per-class IoU (None for absent classes), mIoU and, given the point cloud, boundary IoU"""
    pred_labels, gt_labels = _pair(pred_labels, gt_labels)
    _check_classes(pred_labels)
    _check_classes(gt_labels)
    report = {f"iou_{class_name(c)}": per_class_iou(pred_labels, gt_labels, c) for c in range(NUM_CLASSES)}
    report['miou'] = miou(pred_labels, gt_labels)
    if cloud is not None:
        report['boundary_iou'] = boundary_iou(pred_labels, gt_labels, cloud, k)
    return report


@dataclass(frozen=True)
class LossValue:
    ce_image: float
    ce_point: float
    cbl: float

    @property
    def total(self):
        return self.ce_image + self.ce_point + self.cbl

    def to_dict(self):
        return {'ce_image': self.ce_image, 'ce_point': self.ce_point, 'cbl': self.cbl, 'total': self.total}


def total_loss(ce_image, ce_point, cbl_point):
    """Image and point cross entropy carry the same unit weight as the boundary term"""
    if min(ce_image, ce_point, cbl_point) < 0:
        raise DentmeshException("Loss components must be non-negative.")
    return LossValue(ce_image=float(ce_image), ce_point=float(ce_point), cbl=float(cbl_point))
