"""Annotation ingestion and size-distribution statistics.

Record files are line-delimited JSON. A ground-truth record is

    {"image_id": "img1", "class_id": 3, "bbox": [left, top, w, h]}

with an optional boolean "ignore"; detection records additionally carry
"score". Boxes use the top-left convention on disk and are converted to
centre form on load. Malformed lines are reported with their line number;
boxes with non-positive extents are rejected.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .evalmap import Detection, GroundTruth
from .losses import Box

SIZE_THRESHOLDS = (32, 16, 8)
SIZE_RULES = ("max-side", "area")


class AnnotationError(ValueError):
    """A record file could not be parsed; message carries the line number."""


def _parse_box(record: dict, path: str, lineno: int) -> Box:
    bbox = record.get("bbox")
    if not isinstance(bbox, (list, tuple)) or len(bbox) != 4:
        raise AnnotationError(f"{path}:{lineno}: bbox must be [left, top, w, h]")
    left, top, w, h = (float(v) for v in bbox)
    if w <= 0 or h <= 0:
        raise AnnotationError(f"{path}:{lineno}: non-positive box extent {w}x{h}")
    return Box.from_ltwh(left, top, w, h)


def _iter_records(path: str):
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise AnnotationError(f"{path}:{lineno}: malformed record ({e.msg})") from e
            if not isinstance(record, dict):
                raise AnnotationError(f"{path}:{lineno}: record must be a JSON object")
            for key in ("image_id", "class_id", "bbox"):
                if key not in record:
                    raise AnnotationError(f"{path}:{lineno}: missing field {key!r}")
            yield lineno, record


def load_annotations(path: str) -> list[GroundTruth]:
    """Parse a ground-truth record file."""
    out = []
    for lineno, record in _iter_records(path):
        out.append(GroundTruth(
            image_id=record["image_id"],
            class_id=int(record["class_id"]),
            box=_parse_box(record, path, lineno),
            ignore=bool(record.get("ignore", False)),
        ))
    return out


def load_detections(path: str) -> list[Detection]:
    """Parse a detection record file (requires the "score" field)."""
    out = []
    for lineno, record in _iter_records(path):
        if "score" not in record:
            raise AnnotationError(f"{path}:{lineno}: detection record missing 'score'")
        out.append(Detection(
            image_id=record["image_id"],
            class_id=int(record["class_id"]),
            score=float(record["score"]),
            box=_parse_box(record, path, lineno),
        ))
    return out


@dataclass
class StatsReport:
    """Size-distribution summary of an annotation set.

    ``fractions[t]`` is the share of instances below t x t pixels under the
    selected rule; the histogram bins areas at power-of-two edges.
    """

    total: int
    fractions: dict[int, float]
    class_counts: dict[int, int]
    hist_edges: np.ndarray
    hist_counts: np.ndarray
    rule: str


def _is_below(box: Box, t: int, rule: str) -> bool:
    if rule == "max-side":
        return max(box.w, box.h) < t
    return box.w * box.h < t * t  # "area"


def size_stats(anns: list[GroundTruth], thresholds=SIZE_THRESHOLDS,
               rule: str = "max-side") -> StatsReport:
    """Small-object fractions, class counts and a log-spaced area histogram.

    The default rule counts a box as below t when max(w, h) < t; the
    alternative "area" rule uses w*h < t^2 for sensitivity checks.
    """
    if not anns:
        raise ValueError("size_stats needs a nonempty annotation list")
    if rule not in SIZE_RULES:
        raise ValueError(f"rule must be one of {SIZE_RULES}, got {rule!r}")

    fractions = {
        t: sum(_is_below(a.box, t, rule) for a in anns) / len(anns)
        for t in thresholds
    }
    class_counts: dict[int, int] = {}
    for a in anns:
        class_counts[a.class_id] = class_counts.get(a.class_id, 0) + 1

    areas = np.array([a.box.w * a.box.h for a in anns], dtype=np.float64)
    top = int(np.ceil(np.log2(max(areas.max(), 1.0)))) + 1
    edges = np.concatenate([[0.0], np.power(2.0, np.arange(top + 1))])
    counts, _ = np.histogram(areas, bins=edges)

    return StatsReport(total=len(anns), fractions=fractions,
                       class_counts=class_counts, hist_edges=edges,
                       hist_counts=counts, rule=rule)
