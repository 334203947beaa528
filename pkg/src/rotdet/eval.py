"""Rotated-box average precision (VOC 2007 11-point) at a hull-IoU threshold."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from rotdet import _kernels
from rotdet.geom import RotatedBox, box_to_corners


@dataclass(frozen=True, eq=False)
class Detection:
    scene_id: str
    cls: int
    score: float
    box: RotatedBox
    points: Optional[np.ndarray] = None


@dataclass(frozen=True)
class GroundTruth:
    scene_id: str
    cls: int
    box: RotatedBox
    difficult: bool = False


def voc07_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    ap = 0.0
    for t in np.arange(0.0, 1.1, 0.1):
        mask = recall >= t - 1e-12
        ap += float(precision[mask].max()) if mask.any() else 0.0
    return ap / 11.0


def match_detections(
    dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_thresh: float
) -> np.ndarray:
    """Outcome per detection in descending-score order: 1 = TP, 0 = FP, -1 = ignored.

    Each detection takes the highest-IoU unmatched non-difficult ground truth
    with IoU >= ``iou_thresh``. A detection with no such candidate that still
    overlaps a difficult ground truth at the threshold is ignored. Equal
    scores keep input order.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    by_scene: Dict[str, List[int]] = defaultdict(list)
    for j, g in enumerate(gts):
        by_scene[g.scene_id].append(j)
    gt_corners = [box_to_corners(g.box) for g in gts]
    taken = np.zeros(len(gts), dtype=bool)
    outcome = np.zeros(len(order), dtype=np.int64)
    for rank, i in enumerate(order):
        d = dets[i]
        cand = by_scene.get(d.scene_id, [])
        if not cand:
            continue
        dc = box_to_corners(d.box)[None]
        ious = _kernels.iou_matrix(dc, np.stack([gt_corners[j] for j in cand]))[0]
        best, best_iou = -1, -1.0
        difficult_hit = False
        for j, iou in zip(cand, ious):
            if iou < iou_thresh:
                continue
            if gts[j].difficult:
                difficult_hit = True
            elif not taken[j] and iou > best_iou:
                best, best_iou = j, iou
        if best >= 0:
            taken[best] = True
            outcome[rank] = 1
        elif difficult_hit:
            outcome[rank] = -1
    return outcome


def ap_per_class(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    iou_thresh: float = 0.5,
    cls: Optional[int] = None,
) -> float:
    """AP for one class; NaN when the class has no non-difficult ground truth."""
    if cls is not None:
        dets = [d for d in dets if d.cls == cls]
        gts = [g for g in gts if g.cls == cls]
    n_pos = sum(not g.difficult for g in gts)
    if n_pos == 0:
        return math.nan
    outcome = match_detections(dets, gts, iou_thresh)
    kept = outcome[outcome >= 0]
    tp = np.cumsum(kept == 1)
    fp = np.cumsum(kept == 0)
    if len(kept) == 0:
        return 0.0
    recall = tp / n_pos
    precision = tp / np.maximum(tp + fp, 1)
    return voc07_ap(recall, precision)


def per_class_ap(
    dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_thresh: float = 0.5
) -> Dict[int, float]:
    classes = sorted({g.cls for g in gts} | {d.cls for d in dets})
    return {c: ap_per_class(dets, gts, iou_thresh, c) for c in classes}


def mean_ap(dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_thresh: float = 0.5) -> float:
    """Unweighted mean over classes with a defined AP."""
    aps = [v for v in per_class_ap(dets, gts, iou_thresh).values() if not math.isnan(v)]
    if not aps:
        raise ValueError("no class has ground truth; mAP is undefined")
    return float(np.mean(aps))
