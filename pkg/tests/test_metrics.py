import math

import numpy as np

from dentmesh import NUM_CLASSES
from dentmesh.exceptions import ShapeMismatch, LengthMismatch, InvalidClass, DentmeshException
from dentmesh.metrics import (cross_entropy, image_cross_entropy, cbl_loss, default_cbl_radius, per_class_iou, miou,
                              iou_report, total_loss, LossValue)
from dentmesh.boundary import boundary_iou
from dentmesh.mesh import LabeledPointCloud
from tests import DentmeshTest, random_cloud


def naive_cbl(positions, labels, features, radius):
    terms = []
    for x in range(len(positions)):
        distances = np.linalg.norm(positions - positions[x], axis=1)
        neighbors = [y for y in range(len(positions)) if y != x and distances[y] <= radius]
        if not neighbors:
            terms.append(0.0)
            continue
        weights = np.array([math.exp(-np.linalg.norm(features[x] - features[y])) for y in neighbors])
        same = np.array([labels[y] == labels[x] for y in neighbors])
        ratio = max(weights[same].sum() / weights.sum(), 1e-12)
        terms.append(-math.log(ratio))
    return sum(terms) / len(positions)


class TestCrossEntropy(DentmeshTest):
    def test_uniform_prediction(self):
        pred = np.full((5, NUM_CLASSES), 1 / NUM_CLASSES)
        self.assertAlmostEqual(math.log(17), cross_entropy(pred, [0, 3, 16, 2, 2]), places=12)
        self.assertAlmostEqual(5 * math.log(17), cross_entropy(pred, [0, 3, 16, 2, 2], reduction='sum'), places=11)

    def test_two_items(self):
        pred = np.zeros((2, NUM_CLASSES))
        pred[0, [1, 2]] = 0.5
        pred[1, [0, 5, 6, 7]] = 0.25
        self.assertAlmostEqual((math.log(2) + math.log(4)) / 2, cross_entropy(pred, [1, 5]), places=12)

    def test_zero_probability_is_clamped(self):
        pred = np.zeros((1, NUM_CLASSES))
        pred[0, 0] = 1.0
        self.assertAlmostEqual(-math.log(1e-12), cross_entropy(pred, [4]))

    def test_empty(self):
        self.assertEqual(0.0, cross_entropy(np.zeros((0, NUM_CLASSES)), np.zeros(0, dtype=np.int64)))

    def test_errors(self):
        pred = np.full((2, NUM_CLASSES), 1 / NUM_CLASSES)
        with self.assertRaises(ShapeMismatch):
            cross_entropy(np.full((2, 4), 0.25), [0, 1])
        with self.assertRaises(LengthMismatch):
            cross_entropy(pred, [0, 1, 2])
        with self.assertRaises(InvalidClass):
            cross_entropy(pred, [0, 17])
        with self.assertRaises(InvalidClass):
            cross_entropy(pred, [0.5, 1.0])
        with self.assertRaises(DentmeshException):
            cross_entropy(pred * 2, [0, 1])
        with self.assertRaises(DentmeshException):
            cross_entropy(pred, [0, 1], reduction='max')

    def test_image(self):
        probabilities = np.full((NUM_CLASSES, 2, 3), 1 / NUM_CLASSES)
        self.assertAlmostEqual(math.log(17), image_cross_entropy(probabilities, np.zeros((2, 3), dtype=np.int64)))
        with self.assertRaises(ShapeMismatch):
            image_cross_entropy(probabilities, np.zeros((3, 2), dtype=np.int64))


class TestContrastiveBoundaryLoss(DentmeshTest):
    def test_two_points_of_different_classes(self):
        positions = [[0, 0, 0], [0.1, 0, 0]]
        self.assertAlmostEqual(-math.log(1e-12), cbl_loss(positions, [0, 1], [[0.0], [1.0]], radius=0.5))

    def test_isolated_point_counts_as_zero(self):
        positions = [[0, 0, 0], [0.1, 0, 0], [5, 5, 5]]
        features = np.zeros((3, 2))
        self.assertEqual(0.0, cbl_loss(positions, [1, 1, 2], features, radius=0.5))
        self.assertAlmostEqual(2 * -math.log(1e-12) / 3, cbl_loss(positions, [1, 2, 2], features, radius=0.5))

    def test_single_class_neighborhoods(self):
        cloud = random_cloud(50, classes=1)
        self.assertEqual(0.0, cbl_loss(cloud.positions, cloud.labels, cloud.features(), radius=0.3))

    def test_matches_direct_computation(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            n = int(rng.integers(2, 25))
            positions = rng.uniform(size=(n, 3))
            labels = rng.integers(0, 3, size=n)
            features = rng.normal(size=(n, int(rng.integers(1, 5))))
            radius = float(rng.uniform(0.1, 0.8))
            self.assertAlmostEqual(naive_cbl(positions, labels, features, radius),
                                   cbl_loss(positions, labels, features, radius=radius), places=9)

    def test_default_radius(self):
        positions = np.array([[0, 0, 0], [3, 4, 0.0]])
        self.assertAlmostEqual(0.25, default_cbl_radius(positions))
        self.assertAlmostEqual(cbl_loss(positions, [0, 1], np.zeros(2), radius=0.25),
                               cbl_loss(positions, [0, 1], np.zeros(2)))

    def test_errors(self):
        with self.assertRaises(LengthMismatch):
            cbl_loss(np.zeros((3, 3)), [0, 1], np.zeros(3))
        with self.assertRaises(DentmeshException):
            cbl_loss(np.zeros((2, 3)), [0, 1], np.zeros(2), radius=0)


class TestIou(DentmeshTest):
    pred = [0, 0, 0, 0, 0, 1, 1]
    gt = [0, 0, 0, 1, 1, 0, 1]

    def test_toy_example(self):
        self.assertEqual(0.5, per_class_iou(self.pred, self.gt, 0))
        self.assertEqual(0.25, per_class_iou(self.pred, self.gt, 1))
        self.assertIsNone(per_class_iou(self.pred, self.gt, 2))
        self.assertAlmostEqual(0.375, miou(self.pred, self.gt))

    def test_identical_labels(self):
        labels = np.arange(17).repeat(3)
        self.assertEqual(1.0, miou(labels, labels))

    def test_report(self):
        report = iou_report(self.pred, self.gt)
        self.assertEqual(NUM_CLASSES + 1, len(report))
        self.assertEqual(0.5, report['iou_background'])
        self.assertEqual(0.25, report['iou_T1'])
        self.assertIsNone(report['iou_T16'])
        self.assertAlmostEqual(0.375, report['miou'])
        cloud = random_cloud(7)
        self.assertIn('boundary_iou', iou_report(self.pred, self.gt, cloud, k=2))

    def test_errors(self):
        with self.assertRaises(LengthMismatch):
            miou([0, 1], [0])
        with self.assertRaises(InvalidClass):
            iou_report([0, 20], [0, 1])


class TestTotalLoss(DentmeshTest):
    def test_sum(self):
        loss = total_loss(0.5, 1.25, 2.0)
        self.assertIsInstance(loss, LossValue)
        self.assertEqual(3.75, loss.total)
        self.assertEqual({'ce_image': 0.5, 'ce_point': 1.25, 'cbl': 2.0, 'total': 3.75}, loss.to_dict())
        with self.assertRaises(DentmeshException):
            total_loss(-0.1, 0, 0)


def naive_cross_entropy(pred, truth, reduction):
    terms = [-math.log(max(pred[i][truth[i]], 1e-12)) for i in range(len(truth))]
    return sum(terms) if reduction == 'sum' else sum(terms) / len(terms)


def naive_iou(pred, gt, c):
    both = sum(1 for p, g in zip(pred, gt) if p == c and g == c)
    either = sum(1 for p, g in zip(pred, gt) if p == c or g == c)
    return None if either == 0 else both / either


def naive_boundary(positions, labels, k):
    flags = []
    for i in range(len(positions)):
        others = sorted((float(np.linalg.norm(positions[j] - positions[i])), j)
                        for j in range(len(positions)) if j != i)
        differing = sum(1 for _, j in others[:k] if labels[j] != labels[i])
        flags.append(differing > k // 2)
    return flags


class TestAgainstBruteForce(DentmeshTest):
    trials = 100

    def setUp(self):
        super().setUp()
        self.rng = np.random.default_rng(2024)

    def random_labels(self, n):
        classes = self.rng.choice(NUM_CLASSES, size=self.rng.integers(1, 5), replace=False)
        return self.rng.choice(classes, size=n)

    def test_cross_entropy(self):
        for _ in range(self.trials):
            n = int(self.rng.integers(1, 51))
            logits = self.rng.normal(scale=3.0, size=(n, NUM_CLASSES))
            pred = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
            truth = self.rng.integers(0, NUM_CLASSES, size=n)
            if self.rng.random() < 0.2:
                # all mass on a wrong class hits the probability clamp
                pred[0] = np.eye(NUM_CLASSES)[(truth[0] + 1) % NUM_CLASSES]
            for reduction in ('mean', 'sum'):
                self.assertAlmostEqual(naive_cross_entropy(pred, truth, reduction),
                                       cross_entropy(pred, truth, reduction), delta=1e-9)

    def test_iou_and_miou(self):
        for _ in range(self.trials):
            n = int(self.rng.integers(1, 51))
            pred, gt = self.random_labels(n), self.random_labels(n)
            present = sorted(set(pred.tolist()) | set(gt.tolist()))
            for c in range(NUM_CLASSES):
                expected = naive_iou(pred, gt, c)
                if expected is None:
                    self.assertIsNone(per_class_iou(pred, gt, c))
                else:
                    self.assertAlmostEqual(expected, per_class_iou(pred, gt, c), delta=1e-9)
            expected = sum(naive_iou(pred, gt, c) for c in present) / len(present)
            self.assertAlmostEqual(expected, miou(pred, gt), delta=1e-9)

    def test_boundary_iou(self):
        k = 8
        for _ in range(self.trials):
            n = int(self.rng.integers(k + 2, 51))
            positions = self.rng.uniform(size=(n, 3))
            gt = self.random_labels(n)
            pred = gt.copy()
            flip = self.rng.random(n) < 0.3
            pred[flip] = self.random_labels(int(flip.sum()))
            cloud = LabeledPointCloud(positions=positions, normals=np.tile([0.0, 0.0, 1.0], (n, 1)), labels=gt)
            a, b = naive_boundary(positions, pred, k), naive_boundary(positions, gt, k)
            union = sum(1 for x, y in zip(a, b) if x or y)
            expected = 1.0 if union == 0 else sum(1 for x, y in zip(a, b) if x and y) / union
            self.assertAlmostEqual(expected, boundary_iou(pred, gt, cloud, k), delta=1e-9)
