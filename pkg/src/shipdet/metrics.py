"""Detection metrics: greedy matching, all-point AP, size-bucketed AP, F1 sweep."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .head import Box, Detection, iou_matrix
from .synth import Annotation, size_bucket

IOU_THRESH = 0.5
BUCKETS = ("small", "medium", "large")
BOX_KEYS = ("x1", "y1", "x2", "y2")


@dataclass
class ImageMatch:
    """Matching result for one image. Detections are kept in descending score order."""

    scores: np.ndarray  # (M,)
    tp: np.ndarray  # (M,) bool
    matched_gt: np.ndarray  # (M,) int, -1 when unmatched
    gt_score: np.ndarray  # (K,) score of the detection that claimed each GT, nan if none
    gt_areas: np.ndarray  # (K,)

    @property
    def n_gt(self) -> int:
        return int(self.gt_areas.size)

    @property
    def fn(self) -> int:
        return int(np.isnan(self.gt_score).sum())


def _as_boxes(x) -> np.ndarray:
    if isinstance(x, np.ndarray):
        return x.astype(float).reshape(-1, 4)
    items = list(x)
    if items and isinstance(items[0], Box):
        return np.array([b.as_list() for b in items], dtype=float)
    return np.asarray(items, dtype=float).reshape(-1, 4)


def score_order(scores: np.ndarray) -> np.ndarray:
    """Descending score order; equal scores keep their input order."""
    return np.argsort(-np.asarray(scores, dtype=float), kind="stable")


def match_detections(det_boxes, det_scores, gt_boxes, iou_thresh: float = IOU_THRESH) -> ImageMatch:
    """Greedy one-to-one matching in descending score order.

    Each detection claims the unmatched GT of highest IoU (lowest index on ties)
    provided that IoU reaches ``iou_thresh``.
    """
    boxes = _as_boxes(det_boxes)
    scores = np.asarray(det_scores, dtype=float).reshape(-1)
    gts = _as_boxes(gt_boxes)
    if boxes.shape[0] != scores.shape[0]:
        raise ValueError(f"{boxes.shape[0]} boxes but {scores.shape[0]} scores")
    order = score_order(scores)
    boxes, scores = boxes[order], scores[order]
    ious = iou_matrix(boxes, gts)
    taken = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(boxes), dtype=bool)
    matched = np.full(len(boxes), -1, dtype=int)
    gt_score = np.full(len(gts), np.nan)
    for i in range(len(boxes)):
        cand = np.where(taken, -1.0, ious[i])
        if cand.size == 0:
            continue
        j = int(np.argmax(cand))
        if cand[j] >= iou_thresh:
            taken[j] = True
            tp[i] = True
            matched[i] = j
            gt_score[j] = scores[i]
    areas = (gts[:, 2] - gts[:, 0]) * (gts[:, 3] - gts[:, 1])
    return ImageMatch(scores, tp, matched, gt_score, areas)


def match_dataset(dets: Sequence, anns: Sequence, iou_thresh: float = IOU_THRESH) -> list[ImageMatch]:
    """``dets[i]`` is (boxes, scores) or a list of :class:`Detection`; ``anns[i]`` an Annotation or GT boxes."""
    if len(dets) != len(anns):
        raise ValueError(f"{len(dets)} detection sets for {len(anns)} images")
    out = []
    for d, a in zip(dets, anns):
        if isinstance(d, tuple):
            boxes, scores = d
        else:
            boxes = [x.box for x in d]
            scores = [x.score for x in d]
        gts = a.box_array() if isinstance(a, Annotation) else a
        out.append(match_detections(boxes, scores, gts, iou_thresh))
    return out


def _pool(matches: Iterable[ImageMatch], keep_det=None):
    scores, tp = [], []
    for m in matches:
        sel = np.ones(m.scores.size, dtype=bool) if keep_det is None else keep_det(m)
        scores.append(m.scores[sel])
        tp.append(m.tp[sel])
    if not scores:
        return np.zeros(0), np.zeros(0, dtype=bool)
    scores, tp = np.concatenate(scores), np.concatenate(tp)
    order = score_order(scores)
    return scores[order], tp[order]


def ap_from_flags(tp: np.ndarray, n_gt: int) -> float:
    """All-point interpolated AP of a score-sorted TP/FP sequence."""
    if n_gt <= 0:
        return 0.0
    tp = np.asarray(tp, dtype=bool)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, tp.size + 1)
    recall = ctp / n_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * envelope))


def average_precision(matches: Sequence[ImageMatch]) -> tuple[float, bool]:
    """(AP, valid). With no ground truth AP is undefined and reported as (0, False)."""
    n_gt = sum(m.n_gt for m in matches)
    _, tp = _pool(matches)
    return ap_from_flags(tp, n_gt), n_gt > 0


def size_bucketed_ap(matches: Sequence[ImageMatch]) -> dict[str, tuple[float, bool]]:
    """AP per GT area bucket.

    Detections matched to a GT of another bucket are ignored for this bucket;
    unmatched detections count as false positives everywhere.
    """
    out = {}
    for name in BUCKETS:
        n_gt = 0
        for m in matches:
            n_gt += sum(size_bucket(a) == name for a in m.gt_areas)

        def keep(m, name=name):
            sel = np.ones(m.scores.size, dtype=bool)
            for i, j in enumerate(m.matched_gt):
                if j >= 0 and size_bucket(m.gt_areas[j]) != name:
                    sel[i] = False
            return sel

        _, tp = _pool(matches, keep)
        out[name] = (ap_from_flags(tp, n_gt), n_gt > 0)
    return out


@dataclass
class OperatingPoint:
    precision: float
    recall: float
    f1: float
    threshold: float
    tp: int
    fp: int
    fn: int


def f1_score(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def pr_curve(matches: Sequence[ImageMatch]) -> list[OperatingPoint]:
    """Operating points at every distinct score, from high to low threshold."""
    n_gt = sum(m.n_gt for m in matches)
    scores, tp = _pool(matches)
    if scores.size == 0:
        return []
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    # last index of each run of equal scores: a threshold admits the whole run
    last = np.flatnonzero(np.append(scores[1:] != scores[:-1], True))
    points = []
    for i in last:
        t, f = int(ctp[i]), int(cfp[i])
        p = t / (t + f)
        r = t / n_gt if n_gt else 0.0
        # one division from integer counts so equal ratios compare equal in the sweep
        f1 = 2 * t / (2 * t + f + n_gt - t) if t else 0.0
        points.append(OperatingPoint(p, r, f1, float(scores[i]), t, f, n_gt - t))
    return points


def pr_f1_at_best_threshold(matches: Sequence[ImageMatch]) -> OperatingPoint:
    """Point maximizing F1; ties go to the higher threshold."""
    n_gt = sum(m.n_gt for m in matches)
    pts = pr_curve(matches)
    if not pts:
        return OperatingPoint(0.0, 0.0, 0.0, 1.0, 0, 0, n_gt)
    best = pts[0]
    for pt in pts[1:]:
        if pt.f1 > best.f1:
            best = pt
    return best


def subset_recall(matches: Sequence[ImageMatch], threshold: float, select) -> tuple[float, int]:
    """Recall over GTs picked by ``select(image_index, gt_index)`` at a score threshold."""
    hit = total = 0
    for i, m in enumerate(matches):
        for j, s in enumerate(m.gt_score):
            if select(i, j):
                total += 1
                hit += int(not np.isnan(s) and s >= threshold)
    return (hit / total if total else 0.0), total


def cluster_recall(matches: Sequence[ImageMatch], anns: Sequence[Annotation], threshold: float):
    return subset_recall(matches, threshold, lambda i, j: anns[i].clusters[j] >= 0)


@dataclass
class MetricsReport:
    ap50: float
    ap_small: float
    ap_medium: float
    ap_large: float
    precision: float
    recall: float
    f1: float
    operating_threshold: float
    tp: int
    fp: int
    fn: int
    valid: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def rates(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in
                ("ap50", "ap_small", "ap_medium", "ap_large", "precision", "recall", "f1")}


def evaluate_matches(matches: Sequence[ImageMatch]) -> MetricsReport:
    ap, ok = average_precision(matches)
    buckets = size_bucketed_ap(matches)
    op = pr_f1_at_best_threshold(matches)
    return MetricsReport(
        ap50=ap,
        ap_small=buckets["small"][0],
        ap_medium=buckets["medium"][0],
        ap_large=buckets["large"][0],
        precision=op.precision,
        recall=op.recall,
        f1=op.f1,
        operating_threshold=op.threshold,
        tp=op.tp,
        fp=op.fp,
        fn=op.fn,
        valid={"ap50": ok, **{f"ap_{k}": v[1] for k, v in buckets.items()}},
    )


def evaluate(dets: Sequence, anns: Sequence, iou_thresh: float = IOU_THRESH) -> MetricsReport:
    return evaluate_matches(match_dataset(dets, anns, iou_thresh))


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------
def write_detections(path: str | Path, image_ids: Sequence[str], dets: Sequence[list[Detection]]) -> None:
    """One JSON object per detection: image_id, x1, y1, x2, y2, score."""
    with open(path, "w") as fh:
        for image_id, ds in zip(image_ids, dets):
            for d in ds:
                rec = {"image_id": image_id, **dict(zip(BOX_KEYS, d.box.as_list())), "score": d.score}
                if d.class_id:
                    rec["class_id"] = d.class_id
                fh.write(json.dumps(rec) + "\n")


def read_detections(path: str | Path) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            box = Box(*(float(rec[k]) for k in BOX_KEYS))
            det = Detection(box, float(rec["score"]), int(rec.get("class_id", 0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}:{n}: bad detection record ({exc})") from exc
        out.setdefault(str(rec["image_id"]), []).append(det)
    return out


def write_report(path: str | Path, report: MetricsReport) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


def write_pr_csv(path: str | Path, points: Sequence[OperatingPoint]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "precision", "recall", "f1", "tp", "fp", "fn"])
        for p in points:
            w.writerow([repr(p.threshold), repr(p.precision), repr(p.recall), repr(p.f1), p.tp, p.fp, p.fn])
