"""Detection average precision.

Per class, detections from all images are ranked by score (ties broken by
image order, then detection order), each is greedily matched to the
highest-IoU unmatched ground truth of the same class in its image, and AP is
the area under the all-point interpolated precision/recall curve.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import iou_matrix

IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))


@dataclass
class ImageDetections:
    boxes: np.ndarray    # [N, 4] corner form
    scores: np.ndarray   # [N]
    classes: np.ndarray  # [N]

    @classmethod
    def empty(cls) -> "ImageDetections":
        return cls(np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64))


@dataclass
class ImageTruth:
    boxes: np.ndarray    # [M, 4] corner form
    classes: np.ndarray  # [M]


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-point interpolation: precision envelope integrated over recall steps."""
    r = np.concatenate([[0.0], recall, [recall[-1] if len(recall) else 0.0]])
    p = np.concatenate([[0.0], precision, [0.0]])
    p = np.maximum.accumulate(p[::-1])[::-1]
    steps = np.nonzero(r[1:] != r[:-1])[0]
    return float(np.sum((r[steps + 1] - r[steps]) * p[steps + 1]))


def match_class(dets: Sequence[ImageDetections], truths: Sequence[ImageTruth], c: int,
                iou_thresh: float) -> tuple[np.ndarray, np.ndarray, int]:
    """TP flags in ranked order, their scores, and the number of class-c ground truths."""
    entries = []
    for i, d in enumerate(dets):
        for j in np.nonzero(d.classes == c)[0]:
            entries.append((-float(d.scores[j]), i, int(j)))
    entries.sort()
    gt_sets = [t.boxes[t.classes == c] for t in truths]
    n_gt = sum(len(g) for g in gt_sets)
    used = [np.zeros(len(g), bool) for g in gt_sets]
    ious = {}
    tp = np.zeros(len(entries), bool)
    for k, (_, i, j) in enumerate(entries):
        g = gt_sets[i]
        if len(g) == 0:
            continue
        if i not in ious:
            ious[i] = iou_matrix(dets[i].boxes, g)
        row = np.where(used[i], -1.0, ious[i][j])
        best = int(np.argmax(row))
        if row[best] >= iou_thresh:
            used[i][best] = True
            tp[k] = True
    return tp, np.array([-e[0] for e in entries]), n_gt


def class_ap(dets, truths, c: int, iou_thresh: float) -> float:
    """AP for one class; NaN when the class has no ground truth."""
    tp, _, n_gt = match_class(dets, truths, c, iou_thresh)
    if n_gt == 0:
        return float("nan")
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    return average_precision(recall, precision)


@dataclass
class EvalReport:
    num_classes: int
    per_class: dict = field(default_factory=dict)   # threshold -> list of class APs

    def map_at(self, thresh: float) -> float:
        vals = np.array(self.per_class[round(thresh, 2)], dtype=float)
        vals = vals[~np.isnan(vals)]
        return float(vals.mean()) if len(vals) else 0.0

    @property
    def ap50(self) -> float:
        return self.map_at(0.5)

    @property
    def ap(self) -> float:
        return float(np.mean([self.map_at(t) for t in self.per_class]))

    def to_dict(self) -> dict:
        return {"ap50": self.ap50, "ap50_95": self.ap,
                "per_class_ap50": [None if np.isnan(v) else v for v in self.per_class[0.5]],
                "map_by_threshold": {f"{t:.2f}": self.map_at(t) for t in self.per_class}}


def evaluate_detections(dets: Sequence[ImageDetections], truths: Sequence[ImageTruth],
                        num_classes: int, iou_thresholds=IOU_THRESHOLDS) -> EvalReport:
    if len(dets) != len(truths):
        raise ValueError("need one detection set per image")
    rep = EvalReport(num_classes)
    for t in iou_thresholds:
        rep.per_class[round(float(t), 2)] = [class_ap(dets, truths, c, float(t)) for c in range(num_classes)]
    return rep
