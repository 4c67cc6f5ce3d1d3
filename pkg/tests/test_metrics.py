import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from driftseg.errors import DataError, ShapeError, UndefinedMetricError
from driftseg.metrics import ConfusionMatrix, miou, pearson, pixel_accuracy


def test_update_hand_tally():
    cm = ConfusionMatrix(2)
    pred = np.array([0, 0, 1, 1, 1])
    truth = np.array([0, 1, 1, 1, 0])
    cm.update(pred, truth)
    np.testing.assert_array_equal(cm.counts, [[1, 1], [1, 2]])


def test_update_perfect_prediction_is_diagonal():
    cm = ConfusionMatrix(3)
    labels = np.array([[0, 1], [2, 2]])
    cm.update(labels, labels)
    assert np.all(cm.counts == np.diag([1, 1, 2]))


def test_update_empty_input_is_noop():
    cm = ConfusionMatrix(3)
    cm.update(np.zeros((0,), dtype=int), np.zeros((0,), dtype=int))
    assert cm.counts.sum() == 0


def test_update_rejects_out_of_range():
    cm = ConfusionMatrix(2)
    with pytest.raises(DataError):
        cm.update(np.array([0, 2]), np.array([0, 1]))
    with pytest.raises(DataError):
        cm.update(np.array([0, 1]), np.array([-1, 1]))


def test_update_rejects_shape_mismatch():
    cm = ConfusionMatrix(2)
    with pytest.raises(ShapeError):
        cm.update(np.array([0, 1]), np.array([0]))


def test_counts_total_equals_pixels_scored():
    cm = ConfusionMatrix(4)
    rng = np.random.default_rng(0)
    for _ in range(3):
        cm.update(rng.integers(0, 4, 50), rng.integers(0, 4, 50))
    assert cm.counts.sum() == 150


def test_miou_perfect():
    cm = ConfusionMatrix(3)
    labels = np.arange(3).repeat(5)
    cm.update(labels, labels)
    assert cm.miou() == pytest.approx(1.0)


def test_miou_symmetric_binary_case():
    # both classes: TP = 50, FP = 25, FN = 25 -> IoU = 50 / 100 each
    cm = ConfusionMatrix(2)
    cm.counts = np.array([[50, 25], [25, 50]], dtype=np.int64)
    assert cm.miou() == pytest.approx(0.5)
    np.testing.assert_allclose(cm.per_class_iou(), [0.5, 0.5])


def test_miou_excludes_empty_union_classes():
    cm = ConfusionMatrix(3)
    cm.update(np.array([0, 0, 1, 1]), np.array([0, 0, 1, 0]))
    iou = cm.per_class_iou()
    assert math.isnan(iou[2])
    # class 0: tp 2, union 3; class 1: tp 1, union 2
    assert cm.miou() == pytest.approx((2 / 3 + 1 / 2) / 2)


def test_miou_all_empty_is_undefined():
    cm = ConfusionMatrix(2)
    with pytest.raises(UndefinedMetricError):
        cm.miou()


def test_miou_functional_form():
    truth = np.array([[0, 1], [1, 1]])
    pred = np.array([[0, 1], [0, 1]])
    assert miou(pred, truth, 2) == pytest.approx((1 / 2 + 2 / 3) / 2)


def test_merge_additive():
    a, b = ConfusionMatrix(2), ConfusionMatrix(2)
    a.update(np.array([0, 1]), np.array([0, 0]))
    b.update(np.array([1, 1]), np.array([1, 1]))
    a.merge(b)
    assert a.counts.sum() == 4
    assert a.counts[1, 1] == 2


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_miou_invariant_under_class_permutation(seed):
    rng = np.random.default_rng(seed)
    c = 4
    truth = rng.integers(0, c, 60)
    pred = rng.integers(0, c, 60)
    perm = rng.permutation(c)
    base = miou(pred, truth, c)
    permuted = miou(perm[pred], perm[truth], c)
    assert permuted == pytest.approx(base, abs=1e-12)


def test_pixel_accuracy():
    pred = np.array([[0, 1], [2, 2]])
    truth = np.array([[0, 1], [2, 0]])
    assert pixel_accuracy(pred, truth) == pytest.approx(0.75)


def test_pearson_exact_lines():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    assert pearson(x, 2 * x) == pytest.approx(1.0, abs=1e-12)
    assert pearson(x, -x) == pytest.approx(-1.0, abs=1e-12)


def test_pearson_hand_case():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    y = np.array([1.0, 3.0, 2.0, 5.0])
    assert pearson(x, y) == pytest.approx(5.5 / math.sqrt(43.75), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.1, 50), st.floats(-20, 20))
def test_pearson_affine_invariance(a, b):
    x = np.array([0.0, 1.0, 3.0, 7.0, 2.0])
    y = np.array([5.0, 2.0, 8.0, 1.0, 0.0])
    assert pearson(a * x + b, y) == pytest.approx(pearson(x, y), abs=1e-12)


def test_pearson_undefined_cases():
    with pytest.raises(UndefinedMetricError):
        pearson(np.array([1.0, 1.0]), np.array([0.0, 1.0]))
    with pytest.raises(UndefinedMetricError):
        pearson(np.array([1.0]), np.array([0.0]))
