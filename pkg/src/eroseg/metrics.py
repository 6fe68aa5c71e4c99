"""Confusion matrices and mean intersection-over-union.

Dataset-level numbers come from one global confusion matrix summed over
all images, not from averaging per-image scores.
"""

import numpy as np

from .errors import ShapeError, ValidationError


def accumulate(preds, labels, num_classes):
    """C x C counts; entry (g, p) is the number of pixels with truth g predicted p."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ShapeError(f"preds dims {list(preds.shape)} != labels dims {list(labels.shape)}")
    for name, arr in (("preds", preds), ("labels", labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValidationError(
                f"{name} contain class ids outside [0, {num_classes - 1}]"
            )
    flat = labels.astype(np.int64).ravel() * num_classes + preds.astype(np.int64).ravel()
    counts = np.bincount(flat, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes)


def class_iou(cm):
    """Per-class IoU; NaN for classes absent from both truth and prediction."""
    cm = np.asarray(cm)
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / np.maximum(union, 1), np.nan)


def miou(cm):
    """Mean IoU over classes present in the ground truth or the prediction."""
    iou = class_iou(cm)
    present = ~np.isnan(iou)
    if not present.any():
        raise ValidationError("mIoU is undefined: no class occurs in truth or prediction")
    return float(iou[present].mean())


def iou_csv_rows(cm):
    """CSV lines ``class,iou`` per class followed by ``miou,<value>``."""
    rows = ["class,iou"]
    for c, v in enumerate(class_iou(cm)):
        rows.append(f"{c},{'' if np.isnan(v) else repr(float(v))}")
    rows.append(f"miou,{miou(cm)!r}")
    return rows
