"""Anchor-free decoupled head, box coding, label assignment, losses and NMS."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Conv, ConvBlock, Module
from .tensor import Tensor

log = logging.getLogger(__name__)

CENTER_RADIUS = 2.5
SCALE_FACTOR = 8
PRIOR_PROB = 0.01
MAX_LOG_SIZE = 10.0


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"invalid box {self}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float
    class_id: int = 0


def box_iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (M, 4) and (K, 4) xyxy arrays."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


# ---------------------------------------------------------------------------
# head
# ---------------------------------------------------------------------------
class LevelHead(Module):
    def __init__(self, wf: int):
        self.stem = ConvBlock(wf, wf, 1)
        self.cls_conv = ConvBlock(wf, wf, 3)
        self.reg_conv = ConvBlock(wf, wf, 3)
        self.cls_pred = Conv(wf, 1, 1)
        self.reg_pred = Conv(wf, 4, 1)
        self.obj_pred = Conv(wf, 1, 1)

    def post_init(self):
        prior = -math.log((1 - PRIOR_PROB) / PRIOR_PROB)
        self.obj_pred.bias.data[...] = prior
        self.cls_pred.bias.data[...] = prior

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        x = self.stem(x)
        c = self.cls_conv(x)
        r = self.reg_conv(x)
        return self.reg_pred(r), self.obj_pred(r), self.cls_pred(c)


class Head(Module):
    def __init__(self, strides, wf: int, shared: bool = False):
        self.strides = tuple(strides)
        self.shared = shared
        self.levels = [LevelHead(wf) for _ in range(1 if shared else len(self.strides))]

    def __call__(self, pyramid: dict[int, Tensor]) -> dict[int, tuple[Tensor, Tensor, Tensor]]:
        return head_forward(pyramid, self)


def head_forward(pyramid: dict[int, Tensor], head: Head) -> dict[int, tuple[Tensor, Tensor, Tensor]]:
    missing = [s for s in head.strides if s not in pyramid]
    if missing:
        raise ValueError(f"pyramid lacks levels for strides {missing}")
    out = {}
    for i, s in enumerate(head.strides):
        lvl = head.levels[0 if head.shared else i]
        out[s] = lvl(pyramid[s])
    return out


# ---------------------------------------------------------------------------
# box coding
# ---------------------------------------------------------------------------
def decode_level(reg: np.ndarray, stride: int) -> np.ndarray:
    """(N, 4, H, W) offsets -> (N, H, W, 4) xyxy boxes."""
    n, _, h, w = reg.shape
    gy, gx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    cx = (gx + reg[:, 0]) * stride
    cy = (gy + reg[:, 1]) * stride
    bw = np.exp(np.minimum(reg[:, 2], MAX_LOG_SIZE)) * stride
    bh = np.exp(np.minimum(reg[:, 3], MAX_LOG_SIZE)) * stride
    return np.stack([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2], axis=-1)


def encode(boxes: np.ndarray, gx, gy, stride: int) -> np.ndarray:
    """Inverse of the decode formula for boxes assigned to cells (gx, gy)."""
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    cx = (boxes[:, 0] + boxes[:, 2]) / 2
    cy = (boxes[:, 1] + boxes[:, 3]) / 2
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    return np.stack([cx / stride - gx, cy / stride - gy, np.log(w / stride), np.log(h / stride)], axis=-1)


def _sigmoid(z):
    return T._sigmoid_np(np.asarray(z, dtype=float))


def decode_arrays(output, image_size: int | None = None, score_thresh: float = 0.0):
    """Per image: (boxes (M, 4), scores (M,)) over all levels, scores >= score_thresh."""
    per_image = None
    for s in sorted(output):
        reg, obj, cls = (t.data if isinstance(t, Tensor) else t for t in output[s])
        boxes = decode_level(reg, s)
        scores = _sigmoid(obj[:, 0]) * _sigmoid(cls[:, 0])
        n = reg.shape[0]
        if per_image is None:
            per_image = [([], []) for _ in range(n)]
        for i in range(n):
            keep = scores[i] >= score_thresh
            per_image[i][0].append(boxes[i][keep])
            per_image[i][1].append(scores[i][keep])
    result = []
    for bl, sl in per_image or []:
        b = np.concatenate(bl) if bl else np.zeros((0, 4))
        sc = np.concatenate(sl) if sl else np.zeros(0)
        if image_size is not None:
            b = np.clip(b, 0, image_size)
        result.append((b, sc))
    return result


def decode(output, strides=None, image_size: int | None = None, score_thresh: float = 0.0):
    """Decode head output into one list of :class:`Detection` per image."""
    if strides is not None:
        output = {s: output[s] for s in strides}
    dets = []
    for boxes, scores in decode_arrays(output, image_size, score_thresh):
        dets.append([Detection(Box(*map(float, b)), float(sc)) for b, sc in zip(boxes, scores)])
    return dets


# ---------------------------------------------------------------------------
# assignment
# ---------------------------------------------------------------------------
def scale_ranges(strides) -> dict[int, tuple[float, float]]:
    """Tiled sqrt(area) ranges: level s covers [prev upper, 8 s), first from 0, last unbounded."""
    ordered = sorted(strides)
    out, lo = {}, 0.0
    for i, s in enumerate(ordered):
        hi = math.inf if i == len(ordered) - 1 else float(SCALE_FACTOR * s)
        out[s] = (lo, hi)
        lo = hi
    return out


@dataclass
class LevelTargets:
    stride: int
    positive: np.ndarray  # (N, H, W) bool
    boxes: np.ndarray  # (N, H, W, 4)


def assign_targets(annotations, level_shapes: dict[int, tuple[int, int]]) -> dict[int, LevelTargets]:
    """Per-cell targets for a batch; ``annotations`` is one (K, 4) box array per image."""
    ranges = scale_ranges(level_shapes)
    n = len(annotations)
    targets = {}
    for s, (h, w) in level_shapes.items():
        targets[s] = LevelTargets(s, np.zeros((n, h, w), bool), np.zeros((n, h, w, 4)))
    for i, boxes in enumerate(annotations):
        boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
        areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
        # larger boxes first so smaller ones overwrite on shared cells
        for j in np.argsort(-areas, kind="stable"):
            box, area = boxes[j], areas[j]
            if area <= 0:
                log.warning("skipping degenerate box %s in image %d", box.tolist(), i)
                continue
            size = math.sqrt(area)
            for s, (lo, hi) in ranges.items():
                if lo <= size < hi:
                    _assign_box(targets[s], i, box, area)
    return targets


def _assign_box(t: LevelTargets, i: int, box: np.ndarray, area: float) -> None:
    s = t.stride
    _, h, w = t.positive.shape
    cx = (np.arange(w) + 0.5) * s
    cy = (np.arange(h) + 0.5) * s
    gcx, gcy = (box[0] + box[2]) / 2, (box[1] + box[3]) / 2
    r = CENTER_RADIUS * s
    inx = (cx > box[0]) & (cx < box[2]) & (np.abs(cx - gcx) <= r)
    iny = (cy > box[1]) & (cy < box[3]) & (np.abs(cy - gcy) <= r)
    mask = iny[:, None] & inx[None, :]
    if not mask.any():
        # thin boxes may miss every cell center; fall back to the center cell
        gx = min(w - 1, max(0, int(gcx // s)))
        gy = min(h - 1, max(0, int(gcy // s)))
        mask[gy, gx] = True
    ys, xs = np.nonzero(mask)
    t.positive[i, ys, xs] = True
    t.boxes[i, ys, xs] = box


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------
def _pred_boxes(reg: Tensor, stride: int, idx) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    n_idx, gy, gx = idx
    sel = T.take(reg, (n_idx, slice(None), gy, gx))  # (P, 4)
    tx, ty = sel[:, 0], sel[:, 1]
    tw = T.clip(sel[:, 2], -MAX_LOG_SIZE, MAX_LOG_SIZE)
    th = T.clip(sel[:, 3], -MAX_LOG_SIZE, MAX_LOG_SIZE)
    cx = (tx + gx.astype(float)) * float(stride)
    cy = (ty + gy.astype(float)) * float(stride)
    half_w = T.exp(tw) * (stride / 2.0)
    half_h = T.exp(th) * (stride / 2.0)
    return cx - half_w, cy - half_h, cx + half_w, cy + half_h


def iou_tensor(pred: tuple[Tensor, Tensor, Tensor, Tensor], gt: np.ndarray) -> Tensor:
    px1, py1, px2, py2 = pred
    gx1, gy1, gx2, gy2 = (gt[:, k] for k in range(4))
    iw = T.maximum(T.minimum(px2, gx2) - T.maximum(px1, gx1), 0.0)
    ih = T.maximum(T.minimum(py2, gy2) - T.maximum(py1, gy1), 0.0)
    inter = iw * ih
    area_p = (px2 - px1) * (py2 - py1)
    area_g = (gx2 - gx1) * (gy2 - gy1)
    return inter / (area_p + area_g - inter + 1e-12)


def compute_loss(output, targets: dict[int, LevelTargets]):
    """Returns (total, iou_loss, obj_loss, cls_loss) as scalar tensors."""
    obj_terms, cls_terms, ious = [], [], []
    npos = 0
    for s in sorted(output):
        reg, obj, cls = output[s]
        t = targets[s]
        obj_terms.append(T.bce_with_logits(obj, t.positive[:, None].astype(float)).sum())
        idx = np.nonzero(t.positive)
        if idx[0].size == 0:
            continue
        npos += idx[0].size
        gt = t.boxes[idx]
        ious.append(iou_tensor(_pred_boxes(reg, s, idx), gt))
        cls_sel = T.take(cls, (idx[0], 0, idx[1], idx[2]))
        cls_terms.append(T.bce_with_logits(cls_sel, np.ones(idx[0].size)).sum())
    norm = 1.0 / max(1, npos)
    obj_loss = _sum_all(obj_terms) * norm
    if npos:
        iou_loss = (float(npos) - T.concat(ious, axis=0).sum()) * norm
        cls_loss = _sum_all(cls_terms) * norm
    else:
        iou_loss = Tensor(0.0)
        cls_loss = Tensor(0.0)
    total = iou_loss + obj_loss + cls_loss
    return total, iou_loss, obj_loss, cls_loss


def _sum_all(terms):
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


# ---------------------------------------------------------------------------
# NMS
# ---------------------------------------------------------------------------
def nms_arrays(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> np.ndarray:
    """Indices kept by greedy suppression, in (score desc, x1 asc, y1 asc) order."""
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    scores = np.asarray(scores, dtype=float)
    order = np.lexsort((boxes[:, 1], boxes[:, 0], -scores))
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        rest = order[1:]
        if rest.size == 0:
            break
        ov = iou_matrix(boxes[i:i + 1], boxes[rest])[0]
        order = rest[ov <= iou_thresh]
    return np.asarray(keep, dtype=int)


def nms(dets: list[Detection], iou_thresh: float = 0.65, score_thresh: float = 0.0) -> list[Detection]:
    if not (0.0 <= iou_thresh <= 1.0 and 0.0 <= score_thresh <= 1.0):
        raise ValueError("NMS thresholds must lie in [0, 1]")
    dets = [d for d in dets if d.score >= score_thresh]
    if not dets:
        return []
    boxes = np.array([d.box.as_list() for d in dets])
    scores = np.array([d.score for d in dets])
    return [dets[i] for i in nms_arrays(boxes, scores, iou_thresh)]
