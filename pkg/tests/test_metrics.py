import itertools

import numpy as np
import pytest

from skipseg.exceptions import DimensionError, UndefinedMetricError
from skipseg.metrics import (
    label_components,
    pixel_accuracy,
    rand_index_foreground,
    segment_rand_index,
    soft_dice_coefficient,
)


def brute_rand(pred, truth):
    idx = [i for i in range(truth.size) if truth.flat[i] != 0]
    agree = total = 0
    for a, b in itertools.combinations(idx, 2):
        total += 1
        agree += (pred.flat[a] == pred.flat[b]) == (truth.flat[a] == truth.flat[b])
    return agree / total


def test_pixel_accuracy_examples(rng):
    y = rng.random((4, 4)) < 0.5
    assert pixel_accuracy(y, y) == 1.0
    assert pixel_accuracy(~y, y) == 0.0
    pred = rng.random((4, 4)) < 0.5
    assert pixel_accuracy(pred, y) == sum(int(a == b) for a, b in zip(pred.flat, y.flat)) / 16


def test_soft_dice_examples():
    y = np.array([1.0, 1.0, 0.0])
    assert soft_dice_coefficient(y, y, smooth=0.0) == 1.0
    assert soft_dice_coefficient(np.array([1.0, 0.0]), np.array([1.0, 1.0]), smooth=0.0) == pytest.approx(2 / 3)


def test_rand_identical_and_split():
    truth = np.array([[1, 1, 1]])
    assert rand_index_foreground(truth, truth) == 1.0
    assert rand_index_foreground(np.array([[1, 1, 2]]), truth) == pytest.approx(1 / 3)


def test_rand_ignores_truth_background_pairs():
    truth = np.array([[0, 1, 1, 0]])
    pred = np.array([[5, 2, 2, 9]])
    assert rand_index_foreground(pred, truth) == 1.0


def test_rand_permutation_invariant(rng):
    truth = rng.integers(0, 4, (5, 5))
    pred = rng.integers(0, 4, (5, 5))
    base = rand_index_foreground(pred, truth)
    perm = np.array([0, 3, 1, 2])
    assert rand_index_foreground(perm[pred], truth) == base
    assert rand_index_foreground(pred, perm[truth]) == base


def test_rand_undefined_without_foreground():
    with pytest.raises(UndefinedMetricError):
        rand_index_foreground(np.ones((2, 2)), np.zeros((2, 2)))


def test_metric_oracles_on_random_instances():
    r = np.random.default_rng(9)
    for _ in range(200):
        pred = r.integers(0, 3, (4, 4))
        truth = r.integers(0, 3, (4, 4))
        if np.count_nonzero(truth) >= 2:
            assert rand_index_foreground(pred, truth) == brute_rand(pred, truth)
        p = r.random((4, 4))
        y = (r.random((4, 4)) < 0.5).astype(float)
        ref = (2 * sum(a * b for a, b in zip(p.flat, y.flat)) + 1) / (p.sum() + y.sum() + 1)
        assert abs(soft_dice_coefficient(p, y) - ref) <= 1e-10


def test_components_use_four_connectivity():
    mask = np.array([[1, 0], [0, 1]])
    assert label_components(mask).max() == 2
    with pytest.raises(DimensionError):
        label_components(np.ones((1, 2, 2)))


def test_segment_rand_index_perfect():
    y = np.array([[1, 1, 0, 1], [1, 1, 0, 1], [0, 0, 0, 0], [1, 0, 1, 1]], float)
    assert segment_rand_index(y, y) == 1.0


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        pixel_accuracy(np.zeros(3), np.zeros(4))
