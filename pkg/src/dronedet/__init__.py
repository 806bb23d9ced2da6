"""dronedet: forward-only detection kernel and evaluation toolkit.

The package has three legs:

* an NCHW tensor engine and the detector graph built on it (``tensor``,
  ``blocks``, ``arch``) with analytic parameter/MAC accounting (``flops``),
* IoU-family box regression losses with analytic gradients (``losses``),
* detection evaluation: COCO-style mAP (``evalmap``), six-way error
  decomposition (``tide``) and annotation statistics (``datastats``).

All randomness flows through seeded ``numpy.random.Generator`` (PCG64)
instances, so every artifact is bit-reproducible from its seed.
"""

__version__ = "0.1.0"

from .arch import ArchConfig, Model, build_model, decode_detections, forward
from .flops import FlopReport, count_model
from .losses import Box, WiouState, ciou_loss, iou, update_mean, wiou_loss
from .evalmap import Detection, EvalReport, GroundTruth, evaluate
from .tide import TideReport, tide_report
from .datastats import StatsReport, load_annotations, size_stats

__all__ = [
    "ArchConfig",
    "Box",
    "Detection",
    "EvalReport",
    "FlopReport",
    "GroundTruth",
    "Model",
    "StatsReport",
    "TideReport",
    "WiouState",
    "build_model",
    "ciou_loss",
    "count_model",
    "decode_detections",
    "evaluate",
    "forward",
    "iou",
    "load_annotations",
    "size_stats",
    "tide_report",
    "update_mean",
    "wiou_loss",
]
