"""Training losses for point-set detection.

Classification is per-class sigmoid focal loss (background means every class
is a negative). Regression has two terms: an L1 loss between the centres of
the predicted points and the target corners, and the convex-hull GIoU loss.
Every term comes with its gradient so a network can be trained by injecting
these gradients into autograd.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from rotdet import _kernels
from rotdet.geom import RotatedBox, as_points, box_to_corners, convex_hull, polygon_area
from rotdet.geom import convex_intersection, enclosing_hull

if TYPE_CHECKING:
    from rotdet.matching import Assignment

BACKGROUND = -1


@dataclass(frozen=True)
class LossWeights:
    lambda_cls: float = 2.0
    lambda_l1: float = 5.0
    lambda_iou: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self):
        for name in ("lambda_cls", "lambda_l1", "lambda_iou", "focal_gamma"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if not 0.0 < self.focal_alpha < 1.0:
            raise ValueError(f"focal_alpha must lie in (0, 1), got {self.focal_alpha}")


@dataclass(frozen=True)
class LossBreakdown:
    """Per-term losses already divided by ``max(n_pos, 1)``."""

    cls: float
    l1: float
    iou: float
    total: float
    n_pos: int


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _one_hot(targets: np.ndarray, num_classes: int) -> np.ndarray:
    t = np.zeros((len(targets), num_classes))
    pos = targets >= 0
    if np.any(targets >= num_classes):
        raise ValueError(f"target class out of range for {num_classes} classes")
    t[np.nonzero(pos)[0], targets[pos]] = 1.0
    return t


def focal_loss_batch(
    logits: np.ndarray, targets: np.ndarray, alpha: float = 0.25, gamma: float = 2.0
) -> Tuple[np.ndarray, np.ndarray]:
    """Focal loss per row (summed over classes) and its gradient w.r.t. logits.

    ``targets`` holds a class index per row, or ``BACKGROUND`` (-1).
    """
    x = np.asarray(logits, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("logits must be (N, C)")
    t = _one_hot(np.asarray(targets, dtype=np.int64), x.shape[1])
    sign = 2.0 * t - 1.0
    z = sign * x
    a_t = alpha * t + (1.0 - alpha) * (1.0 - t)
    s = _sigmoid(-z)  # 1 - p_t
    sp = _softplus(-z)  # -log p_t
    s_g = s**gamma
    loss = a_t * s_g * sp
    dz = -a_t * s_g * (gamma * (1.0 - s) * sp + s)
    return loss.sum(axis=1), dz * sign


def focal_loss(
    logits: Sequence[float], target_class: Optional[int], alpha: float = 0.25, gamma: float = 2.0
) -> float:
    """Sigmoid focal loss of one query summed over classes.

    ``target_class=None`` means background (all classes negative).
    """
    x = np.asarray(logits, dtype=np.float64).reshape(1, -1)
    if not np.all(np.isfinite(x)):
        raise ValueError("logits must be finite")
    tgt = BACKGROUND if target_class is None else int(target_class)
    if tgt >= x.shape[1] or tgt < BACKGROUND:
        raise ValueError(f"target class {target_class} out of range for {x.shape[1]} classes")
    return float(focal_loss_batch(x, np.array([tgt]), alpha, gamma)[0][0])


def focal_loss_grad(
    logits: Sequence[float], target_class: Optional[int], alpha: float = 0.25, gamma: float = 2.0
) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64).reshape(1, -1)
    tgt = BACKGROUND if target_class is None else int(target_class)
    if tgt >= x.shape[1] or tgt < BACKGROUND:
        raise ValueError(f"target class {target_class} out of range for {x.shape[1]} classes")
    return focal_loss_batch(x, np.array([tgt]), alpha, gamma)[1][0]


def center_l1_loss(pred, target, image_diag: float = 1.0) -> float:
    """L1 distance between the mean points of two sets, divided by ``image_diag``."""
    p = as_points(pred)
    q = as_points(target)
    d = p.mean(axis=0) - q.mean(axis=0)
    return float((abs(d[0]) + abs(d[1])) / image_diag)


def center_l1_grad(pred, target, image_diag: float = 1.0) -> np.ndarray:
    """Gradient of :func:`center_l1_loss` w.r.t. each predicted point (sign(0) = 0)."""
    p = as_points(pred)
    q = as_points(target)
    d = p.mean(axis=0) - q.mean(axis=0)
    return np.broadcast_to(np.sign(d) / (len(p) * image_diag), p.shape).copy()


class GIoUTerms(NamedTuple):
    loss: float
    iou: float
    intersection: float
    union: float
    enclosing: float
    degenerate: bool


def giou_breakdown(pred, target) -> GIoUTerms:
    """Convex-hull GIoU loss together with the areas it is built from."""
    ha = convex_hull(pred)
    hb = convex_hull(target)
    a, b = polygon_area(ha), polygon_area(hb)
    inter = polygon_area(convex_intersection(ha, hb))
    union = a + b - inter
    enc = polygon_area(enclosing_hull(ha, hb))
    if union <= 0.0 or enc <= 0.0:
        return GIoUTerms(2.0, 0.0, inter, union, enc, True)
    iou = inter / union
    return GIoUTerms(1.0 - iou + (enc - union) / enc, iou, inter, union, enc, False)


def giou_loss(pred, target) -> float:
    """``1 - IoU + |R minus union| / |R|`` on the convex hulls of both sets.

    R is the convex hull of both hulls. Two degenerate hulls give 2.
    """
    p = as_points(pred)
    q = as_points(target)
    P = p[_kernels.hull_indices(p, False)]
    Q = q[_kernels.hull_indices(q, False)]
    return float(_kernels.giou_terms(P, Q)[0])


class GIoUGrad(NamedTuple):
    loss: float
    grad: np.ndarray
    degenerate: bool
    on_boundary: bool


def giou_loss_grad(pred, target) -> GIoUGrad:
    """Gradient of :func:`giou_loss` w.r.t. the predicted coordinates.

    Points strictly inside the predicted hull get exactly zero. A point lying
    on a hull edge counts as a vertex (one-sided subgradient) and sets
    ``on_boundary``.
    """
    p = as_points(pred)
    q = as_points(target)
    loss, grad, status = _kernels.giou_points_grad(p, q)
    return GIoUGrad(float(loss), grad, bool(status & 1), bool(status & 2))


def total_loss_arrays(
    logits: np.ndarray,
    points: np.ndarray,
    matched: Sequence[Tuple[int, int]],
    labels: np.ndarray,
    target_corners: np.ndarray,
    w: LossWeights = LossWeights(),
    image_diag: float = 1.0,
    with_grad: bool = False,
):
    """Set-prediction loss over N queries.

    ``labels`` are the (possibly re-assigned) classification targets per
    query; regression terms use every pair in ``matched`` regardless of the
    label. Returns the breakdown, plus ``(d_logits, d_points)`` when
    ``with_grad`` is set.
    """
    logits = np.asarray(logits, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    n = logits.shape[0]
    if points.shape[0] != n or len(labels) != n:
        raise ValueError(
            f"inconsistent lengths: {n} logits, {points.shape[0]} point sets, {len(labels)} labels"
        )
    n_pos = len(matched)
    norm = float(max(n_pos, 1))
    cls_each, d_cls = focal_loss_batch(logits, labels, w.focal_alpha, w.focal_gamma)
    cls_sum = float(cls_each.sum())

    l1_sum = 0.0
    iou_sum = 0.0
    d_points = np.zeros_like(points)
    if n_pos:
        qi = np.array([m[0] for m in matched], dtype=np.int64)
        ti = np.array([m[1] for m in matched], dtype=np.int64)
        if len(set(qi.tolist())) != n_pos or len(set(ti.tolist())) != n_pos:
            raise ValueError("assignment is not one-to-one")
        pp = np.ascontiguousarray(points[qi])
        tc = np.ascontiguousarray(target_corners[ti], dtype=np.float64)
        diff = pp.mean(axis=1) - tc.mean(axis=1)
        l1_sum = float(np.abs(diff).sum() / image_diag)
        g_iou, g_pts, _ = _kernels.giou_grad_pairs(pp, tc)
        iou_sum = float(g_iou.sum())
        if with_grad:
            k = points.shape[1]
            g_l1 = np.sign(diff)[:, None, :] / (k * image_diag)
            d_points[qi] = (w.lambda_l1 * g_l1 + w.lambda_iou * g_pts) / norm

    out = LossBreakdown(
        cls=cls_sum / norm,
        l1=l1_sum / norm,
        iou=iou_sum / norm,
        total=(w.lambda_cls * cls_sum + w.lambda_l1 * l1_sum + w.lambda_iou * iou_sum) / norm,
        n_pos=n_pos,
    )
    if with_grad:
        return out, w.lambda_cls * d_cls / norm, d_points
    return out


def total_loss(
    preds: Sequence[Tuple[Sequence[float], np.ndarray]],
    assignment: "Assignment",
    targets: Sequence[Tuple[int, RotatedBox]],
    w: LossWeights = LossWeights(),
    image_diag: float = 1.0,
) -> LossBreakdown:
    """Loss of a list of ``(logits, points)`` predictions under ``assignment``."""
    if len(assignment.labels) != len(preds):
        raise ValueError(
            f"assignment covers {len(assignment.labels)} queries but {len(preds)} predictions given"
        )
    for _, t in assignment.matched:
        if not 0 <= t < len(targets):
            raise ValueError(f"matched target index {t} out of range")
    if not preds:
        return LossBreakdown(0.0, 0.0, 0.0, 0.0, 0)
    logits = np.stack([np.asarray(lg, dtype=np.float64) for lg, _ in preds])
    points = np.stack([as_points(p) for _, p in preds])
    corners = (
        np.stack([box_to_corners(b) for _, b in targets]) if targets else np.zeros((0, 4, 2))
    )
    return total_loss_arrays(
        logits, points, assignment.matched, np.asarray(assignment.labels), corners, w, image_diag
    )
