import math

import numpy as np
import pytest
import torch

from exceptions import DimensionException, ValidationException
from metrics import ConfusionMatrix, class_iou, delta1, depth_errors, miou, top1


def test_miou_by_hand():
    gt = np.array([[0, 0, 1], [1, 2, 2]])
    pred = np.array([[0, 1, 1], [1, 2, 0]])
    confusion = ConfusionMatrix.from_predictions(pred, gt, 3)
    assert confusion.counts.tolist() == [[1, 1, 0], [0, 2, 0], [1, 0, 1]]
    # class 0: 1 / 3, class 1: 2 / 3, class 2: 1 / 2
    assert class_iou(confusion) == pytest.approx([1 / 3, 2 / 3, 1 / 2])
    assert miou(confusion) == pytest.approx((1 / 3 + 2 / 3 + 1 / 2) / 3)


def test_ignored_pixels_are_not_scored():
    gt = torch.tensor([0, 1, 255, 255])
    pred = torch.tensor([0, 1, 0, 1])
    assert ConfusionMatrix.from_predictions(pred, gt, 2).total == 2
    assert miou(ConfusionMatrix.from_predictions(pred, gt, 2)) == 1.0


def test_absent_classes_are_skipped():
    confusion = ConfusionMatrix.from_predictions([0, 0, 1], [0, 0, 1], 4)
    assert math.isnan(class_iou(confusion)[3])
    assert miou(confusion) == 1.0


def test_confusion_matrices_accumulate():
    first = ConfusionMatrix.from_predictions([0, 1], [0, 0], 2)
    second = ConfusionMatrix.from_predictions([1], [1], 2)
    assert (first + second).counts.tolist() == [[1, 1], [0, 1]]


def test_confusion_matrix_validation():
    with pytest.raises(DimensionException):
        ConfusionMatrix(np.zeros((2, 3)))
    with pytest.raises(ValidationException):
        ConfusionMatrix.from_predictions([0, 3], [0, 1], 2)
    with pytest.raises(ValidationException):
        miou(np.zeros((2, 2)))


def test_delta1_by_hand():
    gt = np.array([1.0, 2.0, 4.0, 8.0])
    pred = np.array([1.2, 1.5, 4.0, 11.0])
    # ratios 1.2, 1.333, 1.0, 1.375
    assert delta1(pred, gt) == pytest.approx(50.0)


def test_delta1_skips_invalid_ground_truth_and_floors_predictions():
    gt = np.array([1.0, 0.0, np.nan, 1.0])
    pred = np.array([1.0, 5.0, 5.0, -3.0])
    assert delta1(pred, gt) == pytest.approx(50.0)
    assert delta1(pred, gt, valid_mask=np.array([True, True, True, False])) == pytest.approx(100.0)
    with pytest.raises(ValidationException):
        delta1(np.ones(2), np.zeros(2))
    with pytest.raises(DimensionException):
        delta1(np.ones(2), np.ones(3))


def test_depth_errors():
    gt = np.array([1.0, 2.0])
    pred = np.array([2.0, 2.0])
    errors = depth_errors(pred, gt)
    assert errors["abs_rel"] == pytest.approx(0.5)
    assert errors["sq_rel"] == pytest.approx(0.5)
    assert errors["rmse"] == pytest.approx(math.sqrt(0.5))
    assert errors["rmse_log"] == pytest.approx(math.sqrt(math.log(2) ** 2 / 2))
    assert errors["delta1"] == pytest.approx(50.0)
    assert errors["delta3"] == pytest.approx(50.0)


def test_top1():
    assert top1(torch.tensor([1, 2, 3, 4]), [1, 2, 0, 0]) == pytest.approx(50.0)
    with pytest.raises(ValidationException):
        top1([], [])
    with pytest.raises(ValidationException):
        top1([1], [1, 2])
