"""COCO-style detection evaluation: greedy matching, per-class AP, mAP, P/R.

Matching protocol: within each (image, class) pool, detections are taken in
descending score (ties broken by stable input order) and each grabs the
unmatched, non-ignored ground truth with maximal IoU >= threshold. A
detection whose only qualifying overlap is with an ignore-flagged ground
truth is excluded from the precision/recall pool (neither TP nor FP).

AP uses 101-point interpolation: precision at recall r is the maximum
precision among points with recall >= r, sampled at r in {0.00, 0.01, ...,
1.00}. Classes without any (non-ignored) ground truth have no defined AP
and are excluded from the means.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .losses import Box, iou

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_GRID = np.arange(101) / 100.0


@dataclass(frozen=True)
class Detection:
    image_id: object
    class_id: int
    score: float
    box: Box

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


@dataclass(frozen=True)
class GroundTruth:
    image_id: object
    class_id: int
    box: Box
    ignore: bool = False


@dataclass
class MatchResult:
    """Per-detection and per-ground-truth outcome, aligned with input order.

    det_label[i] is 'tp', 'fp' or 'ignored'; det_match[i] is the matched
    ground-truth index for TPs. gt_matched[j] holds the matching detection
    index; gt_missed[j] is True for unmatched non-ignored ground truths.
    """

    det_label: list[str]
    det_match: list[int | None]
    gt_matched: list[int | None]
    gt_missed: list[bool]


def _ranked(dets: list[Detection]) -> list[int]:
    return sorted(range(len(dets)), key=lambda i: -dets[i].score)


def match(dets: list[Detection], gts: list[GroundTruth], iou_thresh: float) -> MatchResult:
    """Greedy score-ordered matching at one IoU threshold."""
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError(f"iou_thresh must lie in (0, 1), got {iou_thresh}")
    gt_pool: dict[tuple, list[int]] = defaultdict(list)
    for j, g in enumerate(gts):
        gt_pool[(g.image_id, g.class_id)].append(j)

    det_label = ["fp"] * len(dets)
    det_match: list[int | None] = [None] * len(dets)
    gt_matched: list[int | None] = [None] * len(gts)

    for i in _ranked(dets):
        d = dets[i]
        candidates = gt_pool.get((d.image_id, d.class_id), ())
        best_j, best_iou = None, iou_thresh
        ignored_hit = False
        for j in candidates:
            ov = iou(d.box, gts[j].box)
            if ov < iou_thresh:
                continue
            if gts[j].ignore:
                ignored_hit = True
                continue
            if gt_matched[j] is not None:
                continue
            if best_j is None or ov > best_iou:
                best_j, best_iou = j, ov
        if best_j is not None:
            det_label[i] = "tp"
            det_match[i] = best_j
            gt_matched[best_j] = i
        elif ignored_hit:
            det_label[i] = "ignored"

    gt_missed = [gt_matched[j] is None and not g.ignore for j, g in enumerate(gts)]
    return MatchResult(det_label, det_match, gt_matched, gt_missed)


def _interpolated_ap(tp_flags: list[bool], n_gt: int) -> float:
    if n_gt == 0:
        raise ValueError("AP undefined without ground truth")
    if not tp_flags:
        return 0.0
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.int64))
    fp = np.cumsum(~np.asarray(tp_flags, dtype=bool))
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # Suffix max over the ranked points gives max precision at recall >= r.
    suffix = np.maximum.accumulate(precision[::-1])[::-1]
    total = 0.0
    for r in RECALL_GRID:
        idx = np.searchsorted(recall, r - 1e-9, side="left")
        total += suffix[idx] if idx < len(suffix) else 0.0
    return total / len(RECALL_GRID)


def average_precision(dets: list[Detection], gts: list[GroundTruth], class_id: int,
                      iou_thresh: float) -> float | None:
    """101-point interpolated AP for one class; None when the class has no GT."""
    class_gts = [g for g in gts if g.class_id == class_id]
    n_gt = sum(not g.ignore for g in class_gts)
    if n_gt == 0:
        return None
    class_dets = [d for d in dets if d.class_id == class_id]
    res = match(class_dets, class_gts, iou_thresh)
    flags = [res.det_label[i] == "tp" for i in _ranked(class_dets)
             if res.det_label[i] != "ignored"]
    return _interpolated_ap(flags, n_gt)


@dataclass
class EvalReport:
    """Per-class AP at each IoU threshold plus the summary metrics."""

    ap: dict[int, dict[float, float]]
    map50: float
    map5095: float
    precision: float
    recall: float
    conf_thresh: float
    num_images: int
    num_gt: int
    pr_curves: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    @property
    def classes(self) -> list[int]:
        return sorted(self.ap)


def _pr_curve(dets, gts, class_id, iou_thresh=0.5):
    class_gts = [g for g in gts if g.class_id == class_id]
    n_gt = sum(not g.ignore for g in class_gts)
    class_dets = [d for d in dets if d.class_id == class_id]
    res = match(class_dets, class_gts, iou_thresh)
    flags = [res.det_label[i] == "tp" for i in _ranked(class_dets)
             if res.det_label[i] != "ignored"]
    if not flags:
        return np.zeros(1), np.zeros(1)
    tp = np.cumsum(np.asarray(flags, dtype=np.int64))
    fp = np.cumsum(~np.asarray(flags, dtype=bool))
    return tp / max(n_gt, 1), tp / (tp + fp)


def evaluate(dets: list[Detection], gts: list[GroundTruth],
             conf_thresh: float = 0.25) -> EvalReport:
    """Full evaluation: AP at 0.50:0.05:0.95, means, and P/R at a confidence.

    Precision and recall are computed by re-matching the detections with
    score >= conf_thresh at IoU 0.5. With zero qualifying detections both
    are reported as 0.
    """
    classes = sorted({g.class_id for g in gts if not g.ignore})
    if not classes:
        raise ValueError("cannot evaluate an empty ground-truth set")

    ap: dict[int, dict[float, float]] = {}
    for c in classes:
        ap[c] = {}
        for t in IOU_THRESHOLDS:
            value = average_precision(dets, gts, c, t)
            assert value is not None  # classes were selected to have GT
            ap[c][t] = value

    map50 = float(np.mean([ap[c][0.5] for c in classes]))
    map5095 = float(np.mean([ap[c][t] for c in classes for t in IOU_THRESHOLDS]))

    kept = [d for d in dets if d.score >= conf_thresh]
    res = match(kept, gts, 0.5)
    n_tp = sum(lbl == "tp" for lbl in res.det_label)
    n_fp = sum(lbl == "fp" for lbl in res.det_label)
    n_gt = sum(not g.ignore for g in gts)
    precision = n_tp / (n_tp + n_fp) if (n_tp + n_fp) else 0.0
    recall = n_tp / n_gt if n_gt else 0.0

    report = EvalReport(
        ap=ap, map50=map50, map5095=map5095,
        precision=float(precision), recall=float(recall),
        conf_thresh=conf_thresh,
        num_images=len({g.image_id for g in gts}),
        num_gt=n_gt,
    )
    for c in classes:
        report.pr_curves[c] = _pr_curve(dets, gts, c)
    return report
