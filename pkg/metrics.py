"""
Evaluation metrics: mean IoU over a confusion matrix, depth accuracy under ratio thresholds together with
the usual depth error suite, and top-1 accuracy.
"""

from dataclasses import dataclass

import numpy as np
import torch

from exceptions import DimensionException, ValidationException

IGNORE_INDEX = 255
DELTA_THRESHOLD = 1.25
DEPTH_FLOOR = 1e-6


def _to_numpy(values) -> np.ndarray:
    if isinstance(values, torch.Tensor):
        return values.detach().cpu().numpy()
    return np.asarray(values)


@dataclass
class ConfusionMatrix:
    """
    counts[i, j] is the number of scored pixels of ground-truth class i predicted as class j.
    """
    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise DimensionException(f"A confusion matrix must be square, got {self.counts.shape}.")
        if (self.counts < 0).any():
            raise ValidationException("Confusion counts must be non-negative.")

    @classmethod
    def from_predictions(cls, pred, gt, num_classes: int, ignore_index: int = IGNORE_INDEX) -> "ConfusionMatrix":
        pred, gt = _to_numpy(pred).ravel(), _to_numpy(gt).ravel()
        if pred.shape != gt.shape:
            raise DimensionException(f"Prediction {pred.shape} and ground truth {gt.shape} differ.")
        scored = gt != ignore_index
        pred, gt = pred[scored].astype(np.int64), gt[scored].astype(np.int64)
        if ((gt < 0) | (gt >= num_classes) | (pred < 0) | (pred >= num_classes)).any():
            raise ValidationException(f"Class ids must lie in [0, {num_classes}).")
        counts = np.bincount(gt * num_classes + pred, minlength=num_classes ** 2)
        return cls(counts.reshape(num_classes, num_classes))

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def class_iou(confusion: ConfusionMatrix) -> np.ndarray:
    """
    Per-class IoU = TP / (TP + FP + FN); NaN for classes absent from ground truth and prediction.
    """
    tp = np.diag(confusion.counts).astype(np.float64)
    union = confusion.counts.sum(axis=0) + confusion.counts.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / union, np.nan)


def miou(confusion: ConfusionMatrix | np.ndarray) -> float:
    if not isinstance(confusion, ConfusionMatrix):
        confusion = ConfusionMatrix(confusion)
    if confusion.num_classes < 2 or confusion.total == 0:
        raise ValidationException("mIoU needs a non-empty confusion matrix with at least two classes.")
    return float(np.nanmean(class_iou(confusion)))


def _depth_pairs(pred, gt, valid_mask) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = _to_numpy(pred).astype(np.float64), _to_numpy(gt).astype(np.float64)
    if pred.shape != gt.shape:
        raise DimensionException(f"Predicted depth {pred.shape} and ground truth {gt.shape} differ.")
    valid = np.isfinite(gt) & (gt > 0)
    if valid_mask is not None:
        valid &= _to_numpy(valid_mask).astype(bool)
    if not valid.any():
        raise ValidationException("No valid depth pixels to evaluate.")
    return np.maximum(pred[valid], DEPTH_FLOOR), gt[valid]


def delta1(pred_depth, gt_depth, valid_mask=None) -> float:
    """
    Percentage of valid pixels with max(pred / gt, gt / pred) < 1.25. Predictions are floored at 1e-6.
    """
    pred, gt = _depth_pairs(pred_depth, gt_depth, valid_mask)
    ratio = np.maximum(pred / gt, gt / pred)
    return float((ratio < DELTA_THRESHOLD).mean() * 100.0)


def depth_errors(pred_depth, gt_depth, valid_mask=None) -> dict[str, float]:
    """
    The standard monocular depth errors over valid pixels; the delta accuracies are percentages.
    """
    pred, gt = _depth_pairs(pred_depth, gt_depth, valid_mask)
    ratio = np.maximum(pred / gt, gt / pred)
    return {
        "abs_rel": float(np.mean(np.abs(gt - pred) / gt)),
        "sq_rel": float(np.mean((gt - pred) ** 2 / gt)),
        "rmse": float(np.sqrt(np.mean((gt - pred) ** 2))),
        "rmse_log": float(np.sqrt(np.mean((np.log(gt) - np.log(pred)) ** 2))),
        "delta1": float((ratio < DELTA_THRESHOLD).mean() * 100.0),
        "delta2": float((ratio < DELTA_THRESHOLD ** 2).mean() * 100.0),
        "delta3": float((ratio < DELTA_THRESHOLD ** 3).mean() * 100.0),
    }


def top1(pred_labels, gt_labels) -> float:
    pred, gt = _to_numpy(pred_labels).ravel(), _to_numpy(gt_labels).ravel()
    if len(pred) != len(gt) or len(gt) == 0:
        raise ValidationException(f"top-1 needs two label lists of equal, non-zero length, got {len(pred)} "
                                  f"and {len(gt)}.")
    return float((pred == gt).mean() * 100.0)
