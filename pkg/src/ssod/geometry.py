"""Axis-aligned box algebra: IoU, CIoU and class-wise greedy NMS."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

CIOU_EPS = 1e-9


@dataclass(frozen=True)
class Box:
    """Center-form box in image pixels."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box dims must be positive, got w={self.w}, h={self.h}")

    @classmethod
    def from_xyxy(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    def to_xyxy(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    cls_score: float
    obj_score: float

    def __post_init__(self):
        if not (0.0 <= self.cls_score <= 1.0 and 0.0 <= self.obj_score <= 1.0):
            raise ValueError("scores must lie in [0, 1]")

    @property
    def score(self) -> float:
        """Combined confidence, objectness times class score."""
        return self.obj_score * self.cls_score


def iou(a: Box, b: Box) -> float:
    ax1, ay1, ax2, ay2 = a.to_xyxy()
    bx1, by1, bx2, by2 = b.to_xyxy()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def ciou(pred: Box, gt: Box) -> float:
    """IoU minus normalized center distance minus the aspect-ratio penalty."""
    base = iou(pred, gt)
    px1, py1, px2, py2 = pred.to_xyxy()
    gx1, gy1, gx2, gy2 = gt.to_xyxy()
    cw = max(px2, gx2) - min(px1, gx1)
    ch = max(py2, gy2) - min(py1, gy1)
    c2 = cw * cw + ch * ch
    rho2 = (pred.cx - gt.cx) ** 2 + (pred.cy - gt.cy) ** 2
    v = (4 / math.pi ** 2) * (math.atan(gt.w / gt.h) - math.atan(pred.w / pred.h)) ** 2
    alpha = v / (1 - base + v + CIOU_EPS)
    return base - rho2 / c2 - alpha * v


# vectorized forms ----------------------------------------------------------


def cxcywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    half = b[..., 2:4] / 2
    return np.concatenate([b[..., 0:2] - half, b[..., 0:2] + half], axis=-1)


def xyxy_to_cxcywh(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.concatenate([(b[..., 0:2] + b[..., 2:4]) / 2, b[..., 2:4] - b[..., 0:2]], axis=-1)


def iou_matrix(a_xyxy: np.ndarray, b_xyxy: np.ndarray) -> np.ndarray:
    """Pairwise IoU between [N,4] and [M,4] corner-form boxes."""
    a = np.asarray(a_xyxy, dtype=np.float64)[:, None, :]
    b = np.asarray(b_xyxy, dtype=np.float64)[None, :, :]
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    return inter / np.maximum(area_a + area_b - inter, 1e-12)


def ciou_array(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Elementwise CIoU of matching rows of center-form [N,4] arrays."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    p = cxcywh_to_xyxy(pred)
    g = cxcywh_to_xyxy(gt)
    iw = np.clip(np.minimum(p[:, 2], g[:, 2]) - np.maximum(p[:, 0], g[:, 0]), 0, None)
    ih = np.clip(np.minimum(p[:, 3], g[:, 3]) - np.maximum(p[:, 1], g[:, 1]), 0, None)
    inter = iw * ih
    # same eps guards as the differentiable version, for collapsed predictions
    union = pred[:, 2] * pred[:, 3] + gt[:, 2] * gt[:, 3] - inter + CIOU_EPS
    base = inter / union
    cw = np.maximum(p[:, 2], g[:, 2]) - np.minimum(p[:, 0], g[:, 0])
    ch = np.maximum(p[:, 3], g[:, 3]) - np.minimum(p[:, 1], g[:, 1])
    rho2 = (pred[:, 0] - gt[:, 0]) ** 2 + (pred[:, 1] - gt[:, 1]) ** 2
    v = (4 / np.pi ** 2) * (np.arctan(gt[:, 2] / gt[:, 3]) - np.arctan(pred[:, 2] / (pred[:, 3] + CIOU_EPS))) ** 2
    alpha = v / (1 - base + v + CIOU_EPS)
    return base - rho2 / (cw * cw + ch * ch + CIOU_EPS) - alpha * v


def nms_indices(boxes_xyxy: np.ndarray, scores: np.ndarray, classes: np.ndarray,
                score_thresh: float = 0.01, iou_thresh: float = 0.65) -> np.ndarray:
    """Class-wise greedy NMS over arrays; returns kept indices in score-descending order.

    Ties in score go to the lower original index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        return np.zeros(0, dtype=np.int64)
    boxes = np.asarray(boxes_xyxy, dtype=np.float64)
    classes = np.asarray(classes)
    cand = np.flatnonzero(scores >= score_thresh)
    order = cand[np.lexsort((cand, -scores[cand]))]
    if order.size == 0:
        return np.zeros(0, dtype=np.int64)
    ious = iou_matrix(boxes[order], boxes[order])
    same = classes[order][:, None] == classes[order][None, :]
    clash = (ious > iou_thresh) & same
    alive = np.ones(len(order), bool)
    for k in range(len(order)):
        if alive[k]:
            alive[k + 1:] &= ~clash[k, k + 1:]
    return order[alive].astype(np.int64)


def nms(dets: list[Detection], score_thresh: float = 0.01, iou_thresh: float = 0.65) -> list[Detection]:
    if not 0.0 <= score_thresh <= 1.0 or not 0.0 <= iou_thresh <= 1.0:
        raise ValueError("NMS thresholds must lie in [0, 1]")
    if not dets:
        return []
    boxes = np.array([d.box.to_xyxy() for d in dets])
    scores = np.array([d.score for d in dets])
    classes = np.array([d.class_id for d in dets])
    return [dets[i] for i in nms_indices(boxes, scores, classes, score_thresh, iou_thresh)]
