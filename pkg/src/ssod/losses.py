"""Training objectives for the student.

Every component is averaged over the slots that contribute to it (and is a
constant zero when none do); ``reduction="sum"`` gives the plain sums instead.
Class and objectness terms are sigmoid binary cross-entropies on logits, the
box term is ``1 - CIoU``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import netcore as nc
from .detector import IGNORED, POSITIVE, AnchorSet, TargetGrid, decode_boxes_tensor, slot_geometry
from .geometry import CIOU_EPS
from .netcore import Tensor

PROB_EPS = 1e-7
HIGH_OBJ_GATE = 0.99

METRICS_COLUMNS = ("step", "epoch", "stage", "ls_cls", "ls_reg", "ls_obj", "lu_cls", "lu_reg",
                   "lu_obj", "l_da", "total", "tau1_mean", "tau2_mean", "ema_m")


@dataclass(frozen=True)
class LossWeights:
    cls: float = 0.5
    reg: float = 0.05
    obj: float = 1.0


@dataclass
class LossParts:
    cls: Tensor
    reg: Tensor
    obj: Tensor
    weights: LossWeights = field(default_factory=LossWeights)

    @property
    def total(self) -> Tensor:
        w = self.weights
        return self.cls * w.cls + self.reg * w.reg + self.obj * w.obj

    def values(self) -> tuple[float, float, float]:
        return (self.cls.item(), self.reg.item(), self.obj.item())


def ciou_tensor(pred: Tensor, gt: np.ndarray) -> Tensor:
    """CIoU of each predicted row [N,4] against constant targets [N,4], both center form."""
    gt = np.asarray(gt, dtype=pred.data.dtype)
    pcx, pcy, pw, ph = (pred[:, i] for i in range(4))
    gcx, gcy, gw, gh = (gt[:, i] for i in range(4))
    px1, px2 = pcx - pw * 0.5, pcx + pw * 0.5
    py1, py2 = pcy - ph * 0.5, pcy + ph * 0.5
    gx1, gx2 = gcx - gw / 2, gcx + gw / 2
    gy1, gy2 = gcy - gh / 2, gcy + gh / 2
    iw = nc.clip(nc.minimum(px2, gx2) - nc.maximum(px1, gx1), lo=0.0)
    ih = nc.clip(nc.minimum(py2, gy2) - nc.maximum(py1, gy1), lo=0.0)
    inter = iw * ih
    # eps guards keep collapsed predictions (w or h underflowing to 0) finite
    union = pw * ph + gw * gh - inter + CIOU_EPS
    iou = inter / union
    cw = nc.maximum(px2, gx2) - nc.minimum(px1, gx1)
    ch = nc.maximum(py2, gy2) - nc.minimum(py1, gy1)
    c2 = cw * cw + ch * ch + CIOU_EPS
    rho2 = (pcx - gcx) ** 2 + (pcy - gcy) ** 2
    v = (nc.atan(pw / (ph + CIOU_EPS)) * -1.0 + np.arctan(gw / gh)) ** 2 * (4 / math.pi ** 2)
    alpha = v / (1.0 - iou + v + CIOU_EPS)
    return iou - rho2 / c2 - alpha * v


def _zero(like: Tensor) -> Tensor:
    return Tensor(np.zeros((), dtype=like.data.dtype))


def _reduce(x: Tensor, reduction: str) -> Tensor:
    if reduction == "mean":
        return x.mean()
    if reduction == "sum":
        return x.sum()
    raise ValueError(f"unknown reduction {reduction!r}")


@dataclass
class _Gathered:
    rows: Tensor | None
    boxes: Tensor | None
    arrays: dict


def _gather(preds: Sequence[Tensor], targets: TargetGrid, anchors: AnchorSet,
            masks: Sequence[np.ndarray], names: Sequence[str], with_boxes: bool) -> _Gathered:
    rows, boxes = [], []
    arrays = {n: [] for n in names}
    for P, t, priors, stride, m in zip(preds, targets.scales, anchors.priors, anchors.strides, masks):
        idx = np.nonzero(m)
        if idx[0].size == 0:
            continue
        r = nc.take(P, idx)
        rows.append(r)
        if with_boxes:
            nclass = P.shape[-1] - 5
            _, _, gh, gw = m.shape
            grid, anc = slot_geometry(priors, stride, gh, gw)
            boxes.append(decode_boxes_tensor(r[:, nclass:nclass + 4], grid[idx[1:]], anc[idx[1:]], stride))
        for n in names:
            arrays[n].append(getattr(t, n)[idx])
    if not rows:
        return _Gathered(None, None, {n: None for n in names})
    cat = (lambda xs: xs[0] if len(xs) == 1 else nc.concat(xs, 0))
    return _Gathered(cat(rows), cat(boxes) if with_boxes else None,
                     {n: np.concatenate(v) for n, v in arrays.items()})


def _cls_term(g: _Gathered, nclass: int, reduction: str) -> Tensor:
    onehot = np.zeros((len(g.arrays["cls"]), nclass))
    onehot[np.arange(len(onehot)), g.arrays["cls"]] = 1.0
    return _reduce(nc.bce_with_logits(g.rows[:, :nclass], onehot), reduction)


def _reg_term(g: _Gathered, reduction: str) -> Tensor:
    return _reduce(1.0 - ciou_tensor(g.boxes, g.arrays["box"]), reduction)


def supervised_loss(preds: Sequence[Tensor], targets: TargetGrid, anchors: AnchorSet,
                    weights: LossWeights = LossWeights(), reduction: str = "mean") -> LossParts:
    """Class BCE and 1 - CIoU on positive slots; objectness BCE on every non-ignored slot.

    Positive-slot objectness targets must already be filled
    (``detector.fill_objectness_targets``).
    """
    nclass = preds[0].shape[-1] - 5
    pos = [t.state == POSITIVE for t in targets.scales]
    g = _gather(preds, targets, anchors, pos, ("cls", "box"), with_boxes=True)
    if g.rows is None:
        cls_l = reg_l = _zero(preds[0])
    else:
        cls_l = _cls_term(g, nclass, reduction)
        reg_l = _reg_term(g, reduction)
    live = [t.state != IGNORED for t in targets.scales]
    go = _gather(preds, targets, anchors, live, ("obj",), with_boxes=False)
    if go.rows is None:
        obj_l = _zero(preds[0])
    else:
        obj_l = _reduce(nc.bce_with_logits(go.rows[:, nclass + 4], go.arrays["obj"]), reduction)
    return LossParts(cls_l, reg_l, obj_l, weights)


def _taus(targets: TargetGrid, tau1, tau2):
    t1 = [s.tau1 if tau1 is None else np.broadcast_to(tau1, s.state.shape) for s in targets.scales]
    t2 = [s.tau2 if tau2 is None else np.broadcast_to(tau2, s.state.shape) for s in targets.scales]
    return t1, t2


def obj_branches(score: np.ndarray, tau1, tau2) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Background (p <= tau1), reliable (p >= tau2) and soft (tau1 < p < tau2) masks.

    Raises if any slot activates zero or several branches.
    """
    bg = score <= tau1
    rel = score >= tau2
    soft = (score > tau1) & (score < tau2)
    active = bg.astype(np.int8) + rel + soft
    if np.any(active != 1):
        raise RuntimeError("objectness branches overlap or leave a slot uncovered "
                           f"({int(np.sum(active != 1))} slots)")
    return bg, rel, soft


def unsup_cls_loss(preds, targets: TargetGrid, anchors: AnchorSet, tau2=None,
                   reduction: str = "mean") -> Tensor:
    """Class BCE at slots whose pseudo label scores at least tau2."""
    nclass = preds[0].shape[-1] - 5
    _, t2 = _taus(targets, None, tau2)
    masks = [(s.score >= th) & (s.cls >= 0) & (s.state != IGNORED) for s, th in zip(targets.scales, t2)]
    g = _gather(preds, targets, anchors, masks, ("cls",), with_boxes=False)
    return _zero(preds[0]) if g.rows is None else _cls_term(g, nclass, reduction)


def unsup_reg_loss(preds, targets: TargetGrid, anchors: AnchorSet, tau2=None,
                   obj_gate: float = HIGH_OBJ_GATE, reduction: str = "mean") -> Tensor:
    """1 - CIoU against the pseudo box where p >= tau2 or the teacher objectness exceeds the gate."""
    _, t2 = _taus(targets, None, tau2)
    masks = [((s.score >= th) | (s.label_obj > obj_gate)) & s.has_box & (s.state != IGNORED)
             for s, th in zip(targets.scales, t2)]
    g = _gather(preds, targets, anchors, masks, ("box",), with_boxes=True)
    return _zero(preds[0]) if g.rows is None else _reg_term(g, reduction)


def unsup_obj_loss(preds, targets: TargetGrid, anchors: AnchorSet, tau1=None, tau2=None,
                   reduction: str = "mean") -> Tensor:
    """Objectness BCE with three disjoint targets: 0, the CIoU target, or the soft label."""
    nclass = preds[0].shape[-1] - 5
    t1, t2 = _taus(targets, tau1, tau2)
    target_maps = []
    for s, a, b in zip(targets.scales, t1, t2):
        bg, rel, soft = obj_branches(s.score, a, b)
        target_maps.append(np.where(bg, 0.0, np.where(rel, s.obj, s.label_obj)))
    live = [s.state != IGNORED for s in targets.scales]
    rows, tgts = [], []
    for P, m, tm in zip(preds, live, target_maps):
        idx = np.nonzero(m)
        if idx[0].size:
            rows.append(nc.take(P, idx + (nclass + 4,)))
            tgts.append(tm[idx])
    if not rows:
        return _zero(preds[0])
    logits = rows[0] if len(rows) == 1 else nc.concat(rows, 0)
    return _reduce(nc.bce_with_logits(logits, np.concatenate(tgts)), reduction)


def unsup_loss(preds, targets: TargetGrid, anchors: AnchorSet, weights: LossWeights = LossWeights(),
               tau1=None, tau2=None, reduction: str = "mean") -> LossParts:
    return LossParts(
        unsup_cls_loss(preds, targets, anchors, tau2, reduction),
        unsup_reg_loss(preds, targets, anchors, tau2, reduction=reduction),
        unsup_obj_loss(preds, targets, anchors, tau1, tau2, reduction),
        weights,
    )


def total_loss(ls, lu, lambda_u: float):
    if lambda_u < 0:
        raise ValueError("lambda_u must be nonnegative")
    return ls + lu * lambda_u


def domain_loss(p_map: Tensor, domain: int, reduction: str = "mean") -> Tensor:
    """Binary cross-entropy of a per-location domain probability map; D=0 labeled, D=1 unlabeled."""
    p = nc.clip(p_map if isinstance(p_map, Tensor) else Tensor(np.asarray(p_map, dtype=np.float64)),
                PROB_EPS, 1.0 - PROB_EPS)
    if domain == 1:
        per = nc.log(p) * -1.0
    elif domain == 0:
        per = nc.log(1.0 - p) * -1.0
    else:
        raise ValueError("domain flag must be 0 or 1")
    return _reduce(per, reduction)


def domain_loss_logits(logits: Tensor, domain: int, reduction: str = "mean") -> Tensor:
    """Same objective as :func:`domain_loss` computed from logits, without the probability clamp.

    The clamp zeroes the gradient of saturated locations, which lets an
    adversarially pushed classifier get stuck; the logit form never saturates.
    """
    if domain not in (0, 1):
        raise ValueError("domain flag must be 0 or 1")
    return _reduce(nc.bce_with_logits(logits, np.full(logits.shape, float(domain))), reduction)


def burn_in_loss(ls, lda, lambda_da: float):
    if lambda_da < 0:
        raise ValueError("lambda_da must be nonnegative")
    return ls + lda * lambda_da


@dataclass
class LossReport:
    ls: tuple = (0.0, 0.0, 0.0)
    lu: tuple = (0.0, 0.0, 0.0)
    l_da: float = 0.0
    lambda_u: float = 0.0
    lambda_da: float = 0.0
    weights: LossWeights = field(default_factory=LossWeights)

    @property
    def total(self) -> float:
        w = self.weights
        ls = w.cls * self.ls[0] + w.reg * self.ls[1] + w.obj * self.ls[2]
        lu = w.cls * self.lu[0] + w.reg * self.lu[1] + w.obj * self.lu[2]
        return ls + self.lambda_u * lu + self.lambda_da * self.l_da

    def csv_row(self, step: int, epoch: int, stage: str, tau1_mean: float, tau2_mean: float,
                ema_m: float) -> list:
        return [step, epoch, stage, *self.ls, *self.lu, self.l_da, self.total, tau1_mean, tau2_mean, ema_m]
