"""Pseudo-label assignment.

Teacher detections that survive NMS are scored with p = objectness * class
score and split three ways against a low and a high threshold:

* p >= tau2: reliable, trained like ground truth (class, box, objectness);
* tau1 < p < tau2: uncertain, objectness is trained toward the teacher's own
  objectness score, and the box is regressed only when that score is > 0.99;
* p <= tau1: background.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .detector import (POSITIVE, SOFT, AnchorSet, TargetGrid, assign_labels, decode_image,
                       match_slots)
from .errors import ConfigError
from .geometry import Box, Detection, iou, nms_indices, cxcywh_to_xyxy

RELIABLE, UNCERTAIN, BACKGROUND = "reliable", "uncertain", "background"
TAGS = (RELIABLE, UNCERTAIN, BACKGROUND)
HIGH_OBJ_GATE = 0.99
MAX_PSEUDO_PER_IMAGE = 300


@dataclass(frozen=True)
class PseudoLabel:
    det: Detection
    p_score: float
    tag: str

    @property
    def class_id(self) -> int:
        return self.det.class_id

    @property
    def box(self) -> Box:
        return self.det.box


def combined_score(det: Detection) -> float:
    return det.obj_score * det.cls_score


def _per_class(tau, c: int) -> float:
    return float(tau) if np.ndim(tau) == 0 else float(tau[c])


def tag_for(p: float, tau1: float, tau2: float) -> str:
    if p >= tau2:
        return RELIABLE
    if p <= tau1:
        return BACKGROUND
    return UNCERTAIN


def check_thresholds(tau1, tau2) -> None:
    t1, t2 = np.atleast_1d(tau1), np.atleast_1d(tau2)
    if np.any(t1 >= t2):
        raise ConfigError(f"need tau1 < tau2, got tau1={tau1}, tau2={tau2}")
    if np.any(t1 < 0) or np.any(t2 > 1):
        raise ConfigError("thresholds must lie in [0, 1]")


def generate_pseudo_labels(teacher_grid: Sequence[np.ndarray], anchors: AnchorSet, tau1, tau2,
                           score_thresh: float = 0.01, iou_thresh: float = 0.65,
                           max_labels: int = MAX_PSEUDO_PER_IMAGE) -> list[PseudoLabel]:
    """Decode one image's teacher output, run NMS on combined scores, tag survivors.

    ``tau1``/``tau2`` are scalars or per-class sequences.
    """
    check_thresholds(tau1, tau2)
    boxes, cls_p, obj_p = decode_image(teacher_grid, anchors)
    cid = cls_p.argmax(axis=1)
    cls_s = cls_p[np.arange(len(cid)), cid]
    p = obj_p * cls_s
    keep = nms_indices(cxcywh_to_xyxy(boxes), p, cid, score_thresh, iou_thresh)[:max_labels]
    out = []
    for i in keep:
        cx, cy, w, h = (float(v) for v in boxes[i])
        box = Box(cx, cy, max(w, 1e-6), max(h, 1e-6))
        det = Detection(box, int(cid[i]), float(cls_s[i]), float(obj_p[i]))
        c = det.class_id
        out.append(PseudoLabel(det, float(p[i]), tag_for(float(p[i]), _per_class(tau1, c), _per_class(tau2, c))))
    return out


def retag(pseudo: Sequence[PseudoLabel], tau1, tau2) -> list[PseudoLabel]:
    check_thresholds(tau1, tau2)
    return [PseudoLabel(l.det, l.p_score, tag_for(l.p_score, _per_class(tau1, l.class_id),
                                                  _per_class(tau2, l.class_id))) for l in pseudo]


def transform_pseudo(pseudo: Sequence[PseudoLabel], geo, width: float, height: float,
                     min_area: float = 4.0) -> list[PseudoLabel]:
    """Carry pseudo boxes through an augmentation map; clipped-away labels are dropped."""
    out = []
    for l in pseudo:
        moved = geo.apply_labels([(l.class_id, l.box)], width, height, min_area)
        if moved:
            d = l.det
            out.append(PseudoLabel(Detection(moved[0][1], d.class_id, d.cls_score, d.obj_score), l.p_score, l.tag))
    return out


def build_unsup_targets(pseudo: Sequence[PseudoLabel], anchors: AnchorSet,
                        grid_dims: Sequence[tuple[int, int]], tau1=0.1, tau2=0.6,
                        obj_gate: float = HIGH_OBJ_GATE) -> TargetGrid:
    """Student targets for one unlabeled image.

    Reliable labels claim slots first (positive); uncertain labels fill the
    remaining slots they match (soft).  ``tau1``/``tau2`` are recorded per slot
    so the losses can re-derive each slot's branch from its score.
    """
    reliable = [i for i, l in enumerate(pseudo) if l.tag == RELIABLE]
    uncertain = [i for i, l in enumerate(pseudo) if l.tag == UNCERTAIN]
    tg = TargetGrid.empty(anchors, grid_dims)
    for group, state in ((reliable, POSITIVE), (uncertain, SOFT)):
        owners = match_slots([(pseudo[i].class_id, pseudo[i].box) for i in group], anchors, grid_dims)
        for t, own in zip(tg.scales, owners):
            for (a, row, col), li in own.items():
                idx = (0, a, row, col)
                if t.state[idx] == POSITIVE:
                    continue
                lab = pseudo[group[li]]
                c = lab.class_id
                t.state[idx] = state
                t.score[idx] = lab.p_score
                t.label_obj[idx] = lab.det.obj_score
                t.tau1[idx] = _per_class(tau1, c)
                t.tau2[idx] = _per_class(tau2, c)
                t.gt_index[idx] = group[li]
                if state == POSITIVE:
                    t.cls[idx] = c
                    t.box[idx] = lab.box.as_array()
                    t.has_box[idx] = True
                else:
                    t.obj[idx] = lab.det.obj_score
                    if lab.det.obj_score > obj_gate:
                        t.box[idx] = lab.box.as_array()
                        t.has_box[idx] = True
    return tg


def hard_label_targets(pseudo: Sequence[PseudoLabel], anchors: AnchorSet,
                       grid_dims: Sequence[tuple[int, int]], tau: float) -> TargetGrid:
    """Single-threshold filtering: labels with p >= tau become ground truth, the rest background."""
    kept = [(l.class_id, l.box) for l in pseudo if l.p_score >= tau]
    return assign_labels(kept, anchors, grid_dims)


# quality statistics ----------------------------------------------------------

TP, LOC_FP, CLS_FP = "tp", "loc_fp", "cls_fp"
CATEGORIES = (TP, LOC_FP, CLS_FP)


def classify_label(label: PseudoLabel, gts: Sequence[tuple[int, Box]], iou_thresh: float = 0.5) -> str:
    best, best_cls = 0.0, -1
    for c, g in gts:
        v = iou(label.box, g)
        if v > best:
            best, best_cls = v, c
    if best <= iou_thresh:
        return LOC_FP
    return TP if best_cls == label.class_id else CLS_FP


@dataclass
class PseudoStats:
    counts: dict = field(default_factory=lambda: {t: {k: 0 for k in CATEGORIES} for t in TAGS})

    def add(self, pseudo: Sequence[PseudoLabel], gts: Sequence[tuple[int, Box]]) -> None:
        for l in pseudo:
            self.counts[l.tag][classify_label(l, gts)] += 1

    def total(self, tag: str) -> int:
        return sum(self.counts[tag].values())

    def fractions(self, tag: str) -> dict:
        n = self.total(tag)
        return {k: (v / n if n else 0.0) for k, v in self.counts[tag].items()}

    def to_dict(self) -> dict:
        return {tag: {"count": self.total(tag), "counts": dict(self.counts[tag]),
                      "fractions": self.fractions(tag)} for tag in TAGS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def pseudo_stats(pseudo: Sequence[PseudoLabel], gts: Sequence[tuple[int, Box]]) -> PseudoStats:
    st = PseudoStats()
    st.add(pseudo, gts)
    return st
