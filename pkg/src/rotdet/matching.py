"""Query to ground-truth assignment and IoU-based label re-assignment."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from rotdet import _kernels
from rotdet.geom import RotatedBox, as_points, box_to_corners
from rotdet.loss import BACKGROUND, LossWeights, _sigmoid

Pair = Tuple[int, int]


@dataclass(frozen=True)
class MatchConfig:
    tau: float = 0.5
    weights: LossWeights = field(default_factory=LossWeights)
    reassign: bool = True

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")


@dataclass(frozen=True)
class Assignment:
    """One-to-one ``(query, target)`` pairs plus the per-query class label.

    ``labels[i]`` is a class index or ``BACKGROUND``.
    """

    matched: Tuple[Pair, ...]
    labels: Tuple[int, ...]

    @property
    def n_pos(self) -> int:
        return len(self.matched)


def cost_matrix_arrays(
    logits: np.ndarray,
    points: np.ndarray,
    target_classes: np.ndarray,
    target_corners: np.ndarray,
    w: LossWeights = LossWeights(),
    image_diag: float = 1.0,
) -> np.ndarray:
    """(N, M) matching cost from stacked predictions and targets."""
    probs = _sigmoid(np.asarray(logits, dtype=np.float64))
    pts = np.ascontiguousarray(points, dtype=np.float64)
    tc = np.ascontiguousarray(target_corners, dtype=np.float64)
    cls_cost = -probs[:, np.asarray(target_classes, dtype=np.int64)]
    centers_p = pts.mean(axis=1)
    centers_t = tc.mean(axis=1)
    l1 = np.abs(centers_p[:, None, :] - centers_t[None, :, :]).sum(axis=2) / image_diag
    giou = _kernels.giou_matrix(pts, tc)
    return w.lambda_cls * cls_cost + w.lambda_l1 * l1 + w.lambda_iou * giou


def matching_cost(
    preds: Sequence[Tuple[Sequence[float], np.ndarray]],
    targets: Sequence[Tuple[int, RotatedBox]],
    w: LossWeights = LossWeights(),
    image_diag: float = 1.0,
) -> np.ndarray:
    """Cost of assigning prediction i to target j.

    ``lambda_cls * (-p_i[class_j]) + lambda_l1 * center_l1 + lambda_iou * giou``.
    """
    if not targets:
        raise ValueError("matching cost needs at least one target")
    logits = np.stack([np.asarray(lg, dtype=np.float64) for lg, _ in preds])
    points = np.stack([as_points(p) for _, p in preds])
    classes = np.array([c for c, _ in targets], dtype=np.int64)
    corners = np.stack([box_to_corners(b) for _, b in targets])
    return cost_matrix_arrays(logits, points, classes, corners, w, image_diag)


def hungarian(cost) -> List[Pair]:
    """Minimum-cost one-to-one assignment covering ``min(N, M)`` pairs.

    Shortest augmenting path with row/column potentials, O(n^2 m). Wide and
    tall matrices are both handled (tall ones are solved transposed). Ties go
    to the lowest column index during each scan, so results are deterministic.
    Returns pairs sorted by row.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.size == 0:
        return []
    if c.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix must be finite")
    transposed = c.shape[0] > c.shape[1]
    if transposed:
        c = c.T
    n, m = c.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j]: row assigned to column j (1-based, 0 = free)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = c[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    pairs = [(int(p[j]) - 1, j - 1) for j in range(1, m + 1) if p[j] != 0]
    if transposed:
        pairs = [(b, a) for a, b in pairs]
    return sorted(pairs)


def reassign_arrays(
    points: np.ndarray,
    pairs: Sequence[Pair],
    target_classes: np.ndarray,
    target_corners: np.ndarray,
    n_queries: int,
    tau: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """Labels after re-assignment plus the IoU of every matched pair."""
    labels = np.full(n_queries, BACKGROUND, dtype=np.int64)
    if not pairs:
        return labels, np.zeros(0)
    qi = np.array([a for a, _ in pairs], dtype=np.int64)
    ti = np.array([b for _, b in pairs], dtype=np.int64)
    ious = _kernels.iou_pairs(
        np.ascontiguousarray(points[qi], dtype=np.float64),
        np.ascontiguousarray(target_corners[ti], dtype=np.float64),
    )
    keep = ious > tau
    labels[qi[keep]] = np.asarray(target_classes, dtype=np.int64)[ti[keep]]
    return labels, ious


def reassign_labels(
    preds: Sequence[np.ndarray],
    assignment: Sequence[Pair],
    targets: Sequence[Tuple[int, RotatedBox]],
    cfg: MatchConfig = MatchConfig(),
) -> Assignment:
    """Keep a matched query's class only if its hull IoU with the target exceeds tau.

    An IoU exactly equal to tau drops the label. Unmatched queries are always
    background and the matched pairs are returned unchanged.
    """
    pairs = tuple((int(a), int(b)) for a, b in assignment)
    if not pairs:
        return Assignment(pairs, tuple([BACKGROUND] * len(preds)))
    points = np.stack([as_points(p) for p in preds])
    classes = np.array([c for c, _ in targets], dtype=np.int64)
    corners = np.stack([box_to_corners(b) for _, b in targets])
    if cfg.reassign:
        labels, _ = reassign_arrays(points, pairs, classes, corners, len(preds), cfg.tau)
    else:
        labels = np.full(len(preds), BACKGROUND, dtype=np.int64)
        for q, t in pairs:
            labels[q] = classes[t]
    return Assignment(pairs, tuple(int(x) for x in labels))


def pair_ious(
    preds: Sequence[np.ndarray], pairs: Sequence[Pair], targets: Sequence[Tuple[int, RotatedBox]]
) -> np.ndarray:
    if not pairs:
        return np.zeros(0)
    pp = np.stack([as_points(preds[q]) for q, _ in pairs])
    tc = np.stack([box_to_corners(targets[t][1]) for _, t in pairs])
    return _kernels.iou_pairs(pp, tc)


def empirical_cdf(values: Sequence[float]) -> List[Tuple[float, float]]:
    """Sorted ``(value, fraction <= value)`` rows, one per distinct value."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    n = len(v)
    rows = []
    for k in range(n):
        if k + 1 < n and v[k + 1] == v[k]:
            continue
        rows.append((float(v[k]), (k + 1) / n))
    return rows


def cdf_at(table: Sequence[Tuple[float, float]], x: float) -> float:
    """Fraction of values <= x from an :func:`empirical_cdf` table."""
    frac = 0.0
    for value, f in table:
        if value <= x:
            frac = f
    return frac


def iou_cdf(
    preds: Sequence[np.ndarray],
    assignment,
    targets: Sequence[Tuple[int, RotatedBox]],
) -> List[Tuple[float, float]]:
    """Empirical CDF of convex-hull IoU over matched pairs (empty when none)."""
    pairs = assignment.matched if isinstance(assignment, Assignment) else assignment
    return empirical_cdf(pair_ious(preds, pairs, targets))
