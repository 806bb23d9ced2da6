"""Six-way detection error decomposition with oracle-fix penalties.

Error taxonomy over a base matching at the foreground threshold (default
0.5, background threshold 0.1):

* cls  - false positive with IoU >= t_fg to a wrong-class ground truth
* dupe - IoU >= t_fg to an already-matched same-class ground truth
* loc  - IoU in [t_bg, t_fg) to a same-class ground truth
* both - IoU in [t_bg, t_fg) to a wrong-class ground truth
* bkg  - max IoU < t_bg against every ground truth
* miss - ground truth left unmatched after all assignments

When several bands apply to one detection the precedence is cls, dupe,
loc, both, bkg. Each error type is fixed independently from the same base
labelling (cls: relabel; loc: snap to the overlapped box; both/dupe/bkg:
delete the detection; miss: delete the ground truth) and its penalty is the
mAP@0.5 gained by that single fix. Ignore-flagged ground truths are
excluded from the analysis.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, replace

import numpy as np

from .evalmap import IOU_THRESHOLDS, Detection, GroundTruth, average_precision, match
from .losses import iou

ERROR_TYPES = ("cls", "loc", "both", "dupe", "bkg", "miss")
T_FG = 0.5
T_BG = 0.1


@dataclass
class TideLabels:
    """Base labelling: per-detection error (None for TPs/ignored) plus the
    referenced ground-truth index used by the cls/loc fixes, and the per-GT
    miss flags."""

    det_error: list[str | None]
    det_ref_gt: list[int | None]
    gt_missed: list[bool]


@dataclass
class TideReport:
    base_map50: float
    penalties: dict[str, float]  # percentage points of mAP@0.5
    residual: float  # gap to a perfect score left unexplained by the fixes
    counts: dict[str, int]
    t_fg: float
    t_bg: float


def classify_errors(dets: list[Detection], gts: list[GroundTruth],
                    t_fg: float = T_FG, t_bg: float = T_BG) -> TideLabels:
    """Label every non-TP detection with one error type and flag missed GTs.

    Detections absorbed by ignore regions are not error-labelled, and
    ignore-flagged ground truths take part in neither the error bands nor
    the miss flags.
    """
    base = match(dets, gts, t_fg)

    by_image: dict[object, list[int]] = defaultdict(list)
    for j, g in enumerate(gts):
        if not g.ignore:
            by_image[g.image_id].append(j)

    det_error: list[str | None] = [None] * len(dets)
    det_ref: list[int | None] = [None] * len(dets)
    for i, d in enumerate(dets):
        if base.det_label[i] != "fp":
            continue
        best_same, same_j = 0.0, None
        best_other, other_j = 0.0, None
        for j in by_image.get(d.image_id, ()):
            ov = iou(d.box, gts[j].box)
            if gts[j].class_id == d.class_id:
                if ov > best_same:
                    best_same, same_j = ov, j
            elif ov > best_other:
                best_other, other_j = ov, j
        if best_other >= t_fg:
            det_error[i], det_ref[i] = "cls", other_j
        elif best_same >= t_fg:
            det_error[i], det_ref[i] = "dupe", same_j
        elif t_bg <= best_same < t_fg:
            det_error[i], det_ref[i] = "loc", same_j
        elif t_bg <= best_other < t_fg:
            det_error[i], det_ref[i] = "both", other_j
        else:
            det_error[i] = "bkg"
    return TideLabels(det_error=det_error, det_ref_gt=det_ref,
                      gt_missed=list(base.gt_missed))


def oracle_fix(dets: list[Detection], gts: list[GroundTruth], labels: TideLabels,
               error_type: str) -> tuple[list[Detection], list[GroundTruth]]:
    """Apply the oracle correction for exactly one error type."""
    if error_type not in ERROR_TYPES:
        raise ValueError(f"unknown error type {error_type!r}; expected one of {ERROR_TYPES}")
    if error_type == "miss":
        kept_gts = [g for j, g in enumerate(gts) if not labels.gt_missed[j]]
        return list(dets), kept_gts
    fixed: list[Detection] = []
    for i, d in enumerate(dets):
        err = labels.det_error[i]
        if err != error_type:
            fixed.append(d)
        elif error_type == "cls":
            fixed.append(replace(d, class_id=gts[labels.det_ref_gt[i]].class_id))
        elif error_type == "loc":
            fixed.append(replace(d, box=gts[labels.det_ref_gt[i]].box))
        # both / dupe / bkg: drop the detection
    return fixed, list(gts)


def _map50(dets: list[Detection], gts: list[GroundTruth]) -> float:
    classes = sorted({g.class_id for g in gts if not g.ignore})
    if not classes:
        raise ValueError("cannot evaluate an empty ground-truth set")
    aps = [average_precision(dets, gts, c, IOU_THRESHOLDS[0]) for c in classes]
    return float(np.mean([a for a in aps if a is not None]))


def tide_report(dets: list[Detection], gts: list[GroundTruth],
                t_fg: float = T_FG, t_bg: float = T_BG) -> TideReport:
    """Independent oracle-fix penalties for all six error types."""
    labels = classify_errors(dets, gts, t_fg, t_bg)
    base = _map50(dets, gts)
    penalties: dict[str, float] = {}
    counts: dict[str, int] = {}
    for t in ERROR_TYPES:
        fixed_dets, fixed_gts = oracle_fix(dets, gts, labels, t)
        penalties[t] = (_map50(fixed_dets, fixed_gts) - base) * 100.0
        counts[t] = (sum(labels.gt_missed) if t == "miss"
                     else sum(e == t for e in labels.det_error))
    residual = (1.0 - base) * 100.0 - sum(penalties.values())
    return TideReport(base_map50=base, penalties=penalties, residual=residual,
                      counts=counts, t_fg=t_fg, t_bg=t_bg)
