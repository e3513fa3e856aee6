"""Segmentation metrics and the teacher-student performance gap."""

from dataclasses import dataclass

import numpy as np

from .nets import predict


class SplitMismatch(ValueError):
    pass


@dataclass
class MiouReport:
    per_class_iou: np.ndarray   # NaN for classes absent from both pred and gt
    miou: float
    confusion: np.ndarray       # rows = ground truth, columns = prediction
    pixel_count: int
    split_hash: str = ""

    def to_dict(self):
        return {
            "miou": self.miou,
            "per_class_iou": [None if np.isnan(v) else float(v) for v in self.per_class_iou],
            "pixel_count": self.pixel_count,
            "confusion": self.confusion.tolist(),
            "split_hash": self.split_hash,
        }


def confusion_matrix(pred, gt, num_classes):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
    for name, a in (("prediction", pred), ("ground truth", gt)):
        if a.size and (a.min() < 0 or a.max() >= num_classes):
            raise ValueError(f"{name} holds a class index outside [0, {num_classes})")
    idx = gt.astype(np.int64).ravel() * num_classes + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def miou(pred, gt, num_classes, split_hash=""):
    """Per-class IoU = TP / (TP + FP + FN); classes with an empty union are
    left out of the mean."""
    cm = confusion_matrix(pred, gt, num_classes)
    tp = np.diag(cm).astype(float)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    iou = np.full(num_classes, np.nan)
    present = union > 0
    iou[present] = tp[present] / union[present]
    mean = float(iou[present].mean()) if present.any() else 0.0
    return MiouReport(iou, mean, cm, int(cm.sum()), split_hash)


def evaluate(net, corpus, batch_size=64):
    """mIoU of ``net`` (eval mode) over a labelled corpus."""
    if corpus.labels is None:
        raise ValueError(f"corpus {corpus.name!r} has no labels to evaluate against")
    pred = predict(net, corpus.images, batch_size)
    return miou(pred, corpus.labels, net.spec.num_classes, corpus.split_hash())


def performance_gap(teacher_report, student_report):
    """mIoU(teacher) - mIoU(student) on the same evaluation split."""
    if teacher_report.split_hash != student_report.split_hash:
        raise SplitMismatch("teacher and student were evaluated on different splits")
    if len(teacher_report.per_class_iou) != len(student_report.per_class_iou):
        raise SplitMismatch("teacher and student reports have different class counts")
    return teacher_report.miou - student_report.miou
