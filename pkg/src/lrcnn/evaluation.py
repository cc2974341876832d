"""Detection evaluation: greedy matching, all-point average precision, and
precision-recall curves (the 2010-style metric: area under the right-maximized
precision envelope over all score thresholds).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import CLASS_NAMES, Annotation
from .detector import Detection
from .rpn import iou_matrix


@dataclass
class MatchResult:
    det_order: np.ndarray  # detection indices in descending-score order
    is_tp: np.ndarray  # per ordered detection
    gt_matched: np.ndarray  # per ground-truth box


def match_detections(dets: list[Detection], gt_boxes: np.ndarray, iou_thresh: float = 0.5) -> MatchResult:
    """Greedy per-image matching in descending score order.

    A detection is a true positive iff its best-IoU *unmatched* gt reaches
    the threshold; that gt is then consumed. IoU ties pick the lower gt
    index; score ties the lower detection index.
    """
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n_det, n_gt = len(dets), gt_boxes.shape[0]
    order = np.lexsort((np.arange(n_det), -np.array([d.score for d in dets])))
    matched = np.zeros(n_gt, dtype=bool)
    is_tp = np.zeros(n_det, dtype=bool)
    if n_gt and n_det:
        ious = iou_matrix(np.array([d.box for d in dets]), gt_boxes)
        for pos, di in enumerate(order):
            avail = np.flatnonzero(~matched)
            if avail.size == 0:
                break
            best = avail[np.argmax(ious[di, avail])]
            if ious[di, best] >= iou_thresh:
                matched[best] = True
                is_tp[pos] = True
    return MatchResult(order, is_tp, matched)


def average_precision(is_tp: np.ndarray, n_gt: int) -> float:
    """All-point AP of detections already sorted by descending score.

    Precision is replaced by its running max from the right (the envelope);
    AP sums envelope precision times each recall increment. No ground truth
    or no detections gives 0.
    """
    if n_gt == 0 or len(is_tp) == 0:
        return 0.0
    tp = np.cumsum(np.asarray(is_tp, dtype=np.float64))
    precision = tp / np.arange(1, len(is_tp) + 1)
    recall = tp / n_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for p, r in zip(envelope, recall):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return float(ap)


@dataclass
class PRCurve:
    scores: np.ndarray  # distinct thresholds, descending
    precision: np.ndarray
    recall: np.ndarray  # non-decreasing


@dataclass
class EvalResult:
    ap: dict[int, float]  # class id -> AP
    mean_ap: float
    curves: dict[int, PRCurve]
    n_gt: dict[int, int]


def _pr_curve(scores: np.ndarray, is_tp: np.ndarray, n_gt: int) -> PRCurve:
    if len(scores) == 0 or n_gt == 0:
        return PRCurve(np.zeros(0), np.zeros(0), np.zeros(0))
    tp = np.cumsum(is_tp.astype(np.float64))
    precision = tp / np.arange(1, len(is_tp) + 1)
    recall = tp / n_gt
    # emit one point per distinct score: the last (most inclusive) index
    last = np.flatnonzero(np.diff(np.append(scores, np.nan)) != 0)
    return PRCurve(scores[last], precision[last], recall[last])


def evaluate(
    detections: dict[str, list[Detection]],
    annotations: dict[str, list[Annotation]],
    iou_thresh: float = 0.5,
) -> EvalResult:
    """Per-class AP over a dataset plus the two-class mean.

    Matching is per image per class; the dataset-level ranking sorts by
    (score desc, image key, original index) for determinism.
    """
    class_ids = sorted(CLASS_NAMES)
    for dets in detections.values():
        for d in dets:
            if d.class_id not in CLASS_NAMES:
                raise ValueError(f"unknown class id in detections: {d.class_id}")
    for anns in annotations.values():
        for a in anns:
            if a.class_id not in CLASS_NAMES:
                raise ValueError(f"unknown class id in annotations: {a.class_id}")
    ap: dict[int, float] = {}
    curves: dict[int, PRCurve] = {}
    n_gt_by_class: dict[int, int] = {}
    image_keys = sorted(set(detections) | set(annotations))
    for c in class_ids:
        rows = []  # (-score, image order, det index, is_tp)
        n_gt = 0
        for ki, key in enumerate(image_keys):
            dets = [d for d in detections.get(key, []) if d.class_id == c]
            gts = np.array(
                [a.box for a in annotations.get(key, []) if a.class_id == c], dtype=np.float64
            ).reshape(-1, 4)
            n_gt += gts.shape[0]
            m = match_detections(dets, gts, iou_thresh)
            for pos, di in enumerate(m.det_order):
                rows.append((-dets[di].score, ki, int(di), bool(m.is_tp[pos])))
        rows.sort()
        scores = np.array([-r[0] for r in rows])
        is_tp = np.array([r[3] for r in rows], dtype=bool)
        ap[c] = average_precision(is_tp, n_gt)
        curves[c] = _pr_curve(scores, is_tp, n_gt)
        n_gt_by_class[c] = n_gt
    mean_ap = float(np.mean([ap[c] for c in class_ids])) if class_ids else 0.0
    return EvalResult(ap, mean_ap, curves, n_gt_by_class)


def write_pr_csv(path, result: EvalResult) -> None:
    with open(path, "w") as f:
        f.write("class,score,precision,recall\n")
        for c in sorted(result.curves):
            curve = result.curves[c]
            for s, p, r in zip(curve.scores, curve.precision, curve.recall):
                f.write(f"{CLASS_NAMES[c]},{s!r},{p!r},{r!r}\n")


def write_summary_json(path, result: EvalResult) -> None:
    payload = {
        "ap_small": result.ap.get(1, 0.0),
        "ap_large": result.ap.get(2, 0.0),
        "map": result.mean_ap,
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
        f.write("\n")
