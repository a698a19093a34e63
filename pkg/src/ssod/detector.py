"""Dense anchor-grid detector: architecture, label assignment, decoding.

Raw head output per scale has shape [B, A, H, W, C + 5] with channels laid out
as ``C`` class logits, ``tx, ty, tw, th`` and one objectness logit.  Boxes are
decoded in the YOLOv5 form::

    cx = (2 * sigmoid(tx) - 0.5 + grid_x) * stride
    w  = (2 * sigmoid(tw)) ** 2 * anchor_w

so zero logits put a box of exactly the anchor size at the cell center.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from . import netcore as nc
from .errors import ConfigError, DataError
from .geometry import Box, Detection, ciou, ciou_array
from .netcore import Tensor

BACKGROUND, POSITIVE, IGNORED, SOFT = 0, 1, 2, 3
ANCHOR_RATIO_BOUND = 4.0


@dataclass(frozen=True)
class ArchConfig:
    num_classes: int = 3
    in_channels: int = 3
    # (out_channels, stride) per 3x3 conv layer
    backbone: tuple = ((16, 2), (32, 2), (48, 2), (48, 1))
    # backbone layer index feeding each detection scale
    head_layers: tuple = (3,)
    anchors: tuple = (((6.0, 6.0), (12.0, 12.0), (24.0, 24.0)),)
    dtype: str = "float32"

    def __post_init__(self):
        if not 1 <= len(self.head_layers) <= 3:
            raise ConfigError("between 1 and 3 detection scales are supported")
        if len(self.anchors) != len(self.head_layers):
            raise ConfigError("need one anchor list per detection scale")
        if any(not a for a in self.anchors):
            raise ConfigError("every scale needs at least one anchor")
        if any(w <= 0 or h <= 0 for scale in self.anchors for w, h in scale):
            raise ConfigError("anchor priors must be positive")
        if any(not 0 <= i < len(self.backbone) for i in self.head_layers):
            raise ConfigError("head layer index out of range")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def strides(self) -> tuple[int, ...]:
        cum = np.cumprod([s for _, s in self.backbone])
        return tuple(int(cum[i]) for i in self.head_layers)

    @property
    def num_outputs(self) -> int:
        return self.num_classes + 5

    @property
    def feature_channels(self) -> int:
        return self.backbone[-1][0]

    def grid_dims(self, height: int, width: int) -> list[tuple[int, int]]:
        dims = []
        h, w = height, width
        per_layer = []
        for _, s in self.backbone:
            h, w = -(-h // s), -(-w // s)
            per_layer.append((h, w))
        for i in self.head_layers:
            dims.append(per_layer[i])
        return dims

    def to_dict(self) -> dict:
        return {f.name: _listify(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**{k: _tuplify(v) for k, v in d.items()})


def _listify(v):
    if isinstance(v, tuple):
        return [_listify(x) for x in v]
    return v


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


@dataclass(frozen=True)
class AnchorSet:
    priors: tuple  # per scale: tuple of (w, h)
    strides: tuple

    @classmethod
    def from_arch(cls, arch: ArchConfig) -> "AnchorSet":
        return cls(arch.anchors, arch.strides)

    def __post_init__(self):
        if len(self.priors) != len(self.strides) or any(not p for p in self.priors):
            raise ConfigError("anchor set needs at least one prior per scale")

    @property
    def num_scales(self) -> int:
        return len(self.priors)


# model ---------------------------------------------------------------------


def init_params(arch: ArchConfig, seed: int | np.random.Generator = 0,
                image_size: int = 64) -> nc.ParamSet:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dtype = np.dtype(arch.dtype)
    params: nc.ParamSet = {}
    cin = arch.in_channels
    for i, (cout, _) in enumerate(arch.backbone):
        params[f"backbone.{i}.w"] = nc.he_uniform(rng, (3, 3, cin, cout), 9 * cin, dtype)
        params[f"backbone.{i}.b"] = np.zeros(cout, dtype=dtype)
        cin = cout
    for s, layer in enumerate(arch.head_layers):
        c = arch.backbone[layer][0]
        na = len(arch.anchors[s])
        params[f"head.{s}.w"] = nc.he_uniform(rng, (1, 1, c, na * arch.num_outputs), c, dtype) * 0.1
        bias = np.zeros((na, arch.num_outputs), dtype=dtype)
        # YOLOv5 prior: few objects per cell, uniform class prior
        cells = (image_size / arch.strides[s]) ** 2
        bias[:, arch.num_classes + 4] = math.log(8.0 / cells)
        bias[:, :arch.num_classes] = math.log(0.6 / (arch.num_classes - 0.99))
        params[f"head.{s}.b"] = bias.reshape(-1)
    return params


@dataclass
class ForwardResult:
    outputs: list  # per scale Tensor [B, A, H, W, C+5]
    features: Tensor  # final backbone map [B, H, W, F]


def forward(params: dict, x, arch: ArchConfig) -> ForwardResult:
    """Run the backbone and heads.  ``params`` may map to arrays or Tensors."""
    P = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}
    h = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.dtype(arch.dtype)))
    if h.data.ndim != 4 or h.shape[-1] != arch.in_channels:
        raise ConfigError(f"expected input [B, H, W, {arch.in_channels}], got {h.shape}")
    feats = []
    for i, (_, stride) in enumerate(arch.backbone):
        key = f"backbone.{i}.w"
        if key not in P:
            raise ConfigError(f"missing parameter {key}")
        h = nc.leaky_relu(nc.conv2d(h, P[key], P[f"backbone.{i}.b"], stride))
        feats.append(h)
    outputs = []
    for s, layer in enumerate(arch.head_layers):
        o = nc.conv2d(feats[layer], P[f"head.{s}.w"], P[f"head.{s}.b"], 1)
        b, gh, gw, _ = o.shape
        na = len(arch.anchors[s])
        outputs.append(o.reshape(b, gh, gw, na, arch.num_outputs).transpose(0, 3, 1, 2, 4))
    return ForwardResult(outputs, feats[-1])


def predict_raw(params: nc.ParamSet, images: np.ndarray, arch: ArchConfig) -> list[np.ndarray]:
    return [o.data for o in forward(params, images, arch).outputs]


# target grid ---------------------------------------------------------------


@dataclass
class ScaleTargets:
    state: np.ndarray       # [B, A, H, W] int8
    cls: np.ndarray         # class id or -1
    box: np.ndarray         # [B, A, H, W, 4] center-form px
    has_box: np.ndarray     # bool
    obj: np.ndarray         # objectness target
    score: np.ndarray       # combined score of the label claiming the slot (1 for GT)
    label_obj: np.ndarray   # teacher objectness of that label (1 for GT)
    tau1: np.ndarray        # thresholds in force for that label's class
    tau2: np.ndarray
    gt_index: np.ndarray    # index into the label list, -1 if unclaimed

    @classmethod
    def empty(cls, batch: int, na: int, h: int, w: int) -> "ScaleTargets":
        shp = (batch, na, h, w)
        return cls(
            state=np.zeros(shp, np.int8), cls=np.full(shp, -1, np.int16),
            box=np.zeros(shp + (4,)), has_box=np.zeros(shp, bool), obj=np.zeros(shp),
            score=np.zeros(shp), label_obj=np.zeros(shp),
            tau1=np.zeros(shp), tau2=np.ones(shp), gt_index=np.full(shp, -1, np.int32),
        )

    def copy(self) -> "ScaleTargets":
        return ScaleTargets(**{f.name: getattr(self, f.name).copy() for f in fields(self)})


@dataclass
class TargetGrid:
    scales: list = field(default_factory=list)

    @classmethod
    def empty(cls, anchors: AnchorSet, grid_dims: Sequence[tuple[int, int]], batch: int = 1) -> "TargetGrid":
        return cls([ScaleTargets.empty(batch, len(p), h, w)
                    for p, (h, w) in zip(anchors.priors, grid_dims)])

    @classmethod
    def stack(cls, grids: Sequence["TargetGrid"]) -> "TargetGrid":
        out = []
        for s in range(len(grids[0].scales)):
            parts = [g.scales[s] for g in grids]
            out.append(ScaleTargets(**{f.name: np.concatenate([getattr(p, f.name) for p in parts])
                                       for f in fields(ScaleTargets)}))
        return cls(out)

    def copy(self) -> "TargetGrid":
        return TargetGrid([s.copy() for s in self.scales])

    def count(self, state: int) -> int:
        return int(sum((s.state == state).sum() for s in self.scales))

    def check(self) -> None:
        """Raise if any slot violates the per-state invariants."""
        for s in self.scales:
            pos = s.state == POSITIVE
            if np.any(s.cls[pos] < 0) or not np.all(s.has_box[pos]):
                raise AssertionError("positive slot without class or box target")
            soft = s.state == SOFT
            if np.any(s.cls[soft] >= 0):
                raise AssertionError("soft slot carries a class target")
            bg = s.state == BACKGROUND
            if np.any(s.obj[bg] != 0):
                raise AssertionError("background slot with nonzero objectness target")


def _wh_iou(w: float, h: float, aw: float, ah: float) -> float:
    inter = min(w, aw) * min(h, ah)
    return inter / (w * h + aw * ah - inter)


def candidate_cells(box: Box, stride: float, gh: int, gw: int) -> list[tuple[int, int]]:
    """The center cell plus the nearest horizontal and vertical neighbours, as (row, col)."""
    gx, gy = box.cx / stride, box.cy / stride
    i = min(max(int(math.floor(gx)), 0), gw - 1)
    j = min(max(int(math.floor(gy)), 0), gh - 1)
    ni = i - 1 if gx - i < 0.5 else i + 1
    nj = j - 1 if gy - j < 0.5 else j + 1
    cells = [(j, i)]
    if 0 <= ni < gw:
        cells.append((j, ni))
    if 0 <= nj < gh:
        cells.append((nj, i))
    return cells


def match_slots(labels: Sequence[tuple[int, Box]], anchors: AnchorSet,
                grid_dims: Sequence[tuple[int, int]],
                ratio_bound: float = ANCHOR_RATIO_BOUND) -> list[dict]:
    """Map each scale's (anchor, row, col) slot to the index of the label that owns it.

    A label is a candidate for an anchor when every side ratio is below
    ``ratio_bound``.  Contested slots go to the label with the higher
    width/height IoU against that anchor; exact ties go to the label whose
    (class, cx, cy, w, h) sorts first, which keeps the result independent of
    input order.
    """
    out = []
    for priors, stride, (gh, gw) in zip(anchors.priors, anchors.strides, grid_dims):
        owner: dict[tuple, tuple] = {}
        for li, (c, box) in enumerate(labels):
            key = (c, box.cx, box.cy, box.w, box.h)
            cells = candidate_cells(box, stride, gh, gw)
            for a, (aw, ah) in enumerate(priors):
                r = max(box.w / aw, aw / box.w, box.h / ah, ah / box.h)
                if r >= ratio_bound:
                    continue
                rank = (-_wh_iou(box.w, box.h, aw, ah), key)
                for (row, col) in cells:
                    slot = (a, row, col)
                    cur = owner.get(slot)
                    if cur is None or rank < cur[0]:
                        owner[slot] = (rank, li)
        out.append({slot: li for slot, (_, li) in owner.items()})
    return out


def assign_labels(gts: Sequence[tuple[int, Box]], anchors: AnchorSet,
                  grid_dims: Sequence[tuple[int, int]],
                  ratio_bound: float = ANCHOR_RATIO_BOUND) -> TargetGrid:
    """Supervised targets for one image (batch dimension 1)."""
    for k, (c, box) in enumerate(gts):
        if not (box.w > 0 and box.h > 0):
            raise DataError(f"ground truth {k} has nonpositive dims")
    tg = TargetGrid.empty(anchors, grid_dims)
    for s, owners in enumerate(match_slots(gts, anchors, grid_dims, ratio_bound)):
        t = tg.scales[s]
        for (a, row, col), li in owners.items():
            c, box = gts[li]
            idx = (0, a, row, col)
            t.state[idx] = POSITIVE
            t.cls[idx] = c
            t.box[idx] = box.as_array()
            t.has_box[idx] = True
            t.score[idx] = 1.0
            t.label_obj[idx] = 1.0
            t.gt_index[idx] = li
    return tg


def objectness_target(pred: Box, gt: Box) -> float:
    return min(1.0, max(0.0, ciou(pred, gt)))


# decoding ------------------------------------------------------------------


def slot_geometry(priors, stride: float, gh: int, gw: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-slot grid offsets [A,H,W,2] and anchor sizes [A,H,W,2]."""
    na = len(priors)
    gy, gx = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    grid = np.broadcast_to(np.stack([gx, gy], -1)[None], (na, gh, gw, 2)).astype(np.float64)
    anc = np.broadcast_to(np.asarray(priors, dtype=np.float64)[:, None, None, :], (na, gh, gw, 2))
    return grid, anc


def decode_boxes_np(txywh: np.ndarray, grid: np.ndarray, anc: np.ndarray, stride: float) -> np.ndarray:
    s = nc.sigmoid_np(np.asarray(txywh, dtype=np.float64))
    xy = (2.0 * s[..., 0:2] - 0.5 + grid) * stride
    wh = (2.0 * s[..., 2:4]) ** 2 * anc
    return np.concatenate([xy, wh], axis=-1)


def decode_boxes_tensor(txywh: Tensor, grid: np.ndarray, anc: np.ndarray, stride: float) -> Tensor:
    """Differentiable decode of [N,4] raw regressions to center-form px boxes."""
    s = nc.sigmoid(txywh)
    xy = (s[:, 0:2] * 2.0 - 0.5 + grid) * float(stride)
    wh = (s[:, 2:4] * 2.0) ** 2 * anc
    return nc.concat([xy, wh], axis=1)


def encode_box(box: Box, anchor: tuple[float, float], stride: float, cell: tuple[int, int]) -> np.ndarray:
    """Inverse of the decode for a given (row, col) cell and anchor prior."""
    row, col = cell
    ox = (box.cx / stride - col + 0.5) / 2.0
    oy = (box.cy / stride - row + 0.5) / 2.0
    sw = math.sqrt(box.w / anchor[0]) / 2.0
    sh = math.sqrt(box.h / anchor[1]) / 2.0
    vals = np.array([ox, oy, sw, sh])
    if np.any(vals <= 0) or np.any(vals >= 1):
        raise ValueError("box is outside the range reachable from this cell/anchor")
    return np.log(vals / (1.0 - vals))


def decode_arrays(raw: np.ndarray, priors, stride: float):
    """Decode one image's raw scale output [A,H,W,C+5].

    Returns (boxes [N,4] center-form, class probabilities [N,C], objectness [N]).
    """
    na, gh, gw, no = raw.shape
    nclass = no - 5
    grid, anc = slot_geometry(priors, stride, gh, gw)
    boxes = decode_boxes_np(raw[..., nclass:nclass + 4], grid, anc, stride)
    cls_p = nc.sigmoid_np(np.asarray(raw[..., :nclass], dtype=np.float64))
    obj_p = nc.sigmoid_np(np.asarray(raw[..., nclass + 4], dtype=np.float64))
    return boxes.reshape(-1, 4), cls_p.reshape(-1, nclass), obj_p.reshape(-1)


def decode_image(raw_scales: Sequence[np.ndarray], anchors: AnchorSet):
    """Concatenate decoded arrays over scales for one image."""
    parts = [decode_arrays(r, p, s) for r, p, s in zip(raw_scales, anchors.priors, anchors.strides)]
    boxes = np.concatenate([p[0] for p in parts])
    cls_p = np.concatenate([p[1] for p in parts])
    obj_p = np.concatenate([p[2] for p in parts])
    return boxes, cls_p, obj_p


def decode(grid: Sequence[np.ndarray], anchors: AnchorSet) -> list[Detection]:
    """Every slot of one image's prediction grid as its argmax-class detection."""
    boxes, cls_p, obj_p = decode_image(grid, anchors)
    cid = cls_p.argmax(axis=1)
    wh = np.maximum(boxes[:, 2:4], 1e-9)
    return [Detection(Box(boxes[i, 0], boxes[i, 1], wh[i, 0], wh[i, 1]), int(cid[i]),
                      float(cls_p[i, cid[i]]), float(obj_p[i]))
            for i in range(len(boxes))]


def fill_objectness_targets(raw: Sequence[np.ndarray], targets: TargetGrid, anchors: AnchorSet) -> TargetGrid:
    """Set positive-slot objectness targets to clamped CIoU(pred, box), detached."""
    out = targets.copy()
    for r, t, priors, stride in zip(raw, out.scales, anchors.priors, anchors.strides):
        pos = t.state == POSITIVE
        if not pos.any():
            continue
        r = np.asarray(r)
        nclass = r.shape[-1] - 5
        _, _, gh, gw = t.state.shape
        grid, anc = slot_geometry(priors, stride, gh, gw)
        b_idx, a_idx, y_idx, x_idx = np.nonzero(pos)
        pred = decode_boxes_np(r[b_idx, a_idx, y_idx, x_idx, nclass:nclass + 4],
                               grid[a_idx, y_idx, x_idx], anc[a_idx, y_idx, x_idx], stride)
        t.obj[pos] = np.clip(ciou_array(pred, t.box[pos]), 0.0, 1.0)
    return out


