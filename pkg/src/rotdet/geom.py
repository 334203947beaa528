"""Convex geometry for point-set detections.

Point sets are float64 arrays of shape (K, 2) in pixels. Hulls are
:class:`ConvexPolygon` values with counter-clockwise vertices. Union areas are
always computed as ``A + B - I``; no union polygon is ever built.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from rotdet import _kernels
from rotdet._kernels import EPS

__all__ = [
    "EPS",
    "GeometryError",
    "ConvexPolygon",
    "RotatedBox",
    "as_points",
    "convex_hull",
    "polygon_area",
    "convex_intersection",
    "enclosing_hull",
    "convex_hull_iou",
    "min_area_rect",
    "box_to_corners",
]


class GeometryError(ValueError):
    pass


def as_points(points, min_points: int = 1) -> np.ndarray:
    """Validate and convert an (n, 2) array-like of finite coordinates."""
    arr = np.ascontiguousarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise GeometryError(f"expected an (n, 2) point array, got shape {arr.shape}")
    if arr.shape[0] < min_points:
        raise GeometryError(f"need at least {min_points} points, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise GeometryError("point coordinates must be finite")
    return arr


@dataclass(frozen=True, eq=False)
class ConvexPolygon:
    """Convex polygon with CCW vertices.

    ``degenerate`` is set when fewer than three non-collinear vertices remain
    (a point or a segment); such polygons have zero area.
    """

    vertices: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 2)
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)

    @property
    def area(self) -> float:
        return polygon_area(self)

    def __len__(self) -> int:
        return self.vertices.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, ConvexPolygon):
            return NotImplemented
        return self.degenerate == other.degenerate and np.array_equal(
            self.vertices, other.vertices
        )

    def __hash__(self):
        return hash((self.degenerate, self.vertices.tobytes()))


@dataclass(frozen=True)
class RotatedBox:
    """Oriented rectangle; ``theta`` is the direction of the ``w`` side in radians."""

    cx: float
    cy: float
    w: float
    h: float
    theta: float
    degenerate: bool = False

    @property
    def area(self) -> float:
        return self.w * self.h

    def canonical(self) -> "RotatedBox":
        """Enforce ``w >= h`` and ``theta`` in [-pi/2, pi/2).

        Squares have two valid angles; the one with smaller magnitude wins and
        an exact magnitude tie (+-pi/4) resolves to the negative angle.
        """
        w, h, theta = self.w, self.h, self.theta
        if h > w:
            w, h, theta = h, w, theta + math.pi / 2
        theta = _wrap_half_pi(theta)
        if abs(w - h) <= 1e-12 * max(w, 1.0):
            alt = _wrap_half_pi(theta + math.pi / 2)
            if abs(alt) < abs(theta) or (abs(alt) == abs(theta) and alt < theta):
                theta = alt
        return RotatedBox(self.cx, self.cy, w, h, theta, self.degenerate)

    def corners(self) -> np.ndarray:
        return box_to_corners(self)


def _wrap_half_pi(theta: float) -> float:
    t = math.fmod(theta + math.pi / 2, math.pi)
    if t < 0:
        t += math.pi
    t -= math.pi / 2
    if t >= math.pi / 2:
        t -= math.pi
    return t


PolygonLike = Union[ConvexPolygon, np.ndarray]


def convex_hull(points) -> ConvexPolygon:
    """Minimal convex hull (Jarvis march), CCW, collinear points removed.

    Collinear or coincident inputs yield a degenerate polygon holding the
    segment end points (or the single point).
    """
    pts = as_points(points)
    idx = _kernels.hull_indices(pts, False)
    verts = pts[idx]
    return ConvexPolygon(verts, degenerate=verts.shape[0] < 3)


def _hull_of(x: PolygonLike) -> ConvexPolygon:
    if isinstance(x, ConvexPolygon):
        return x
    return convex_hull(x)


def _solid(p: ConvexPolygon) -> np.ndarray:
    """Vertices usable as a 2-D region (empty for degenerate polygons)."""
    if p.degenerate or len(p) < 3:
        return np.empty((0, 2))
    return p.vertices


def polygon_area(p: ConvexPolygon) -> float:
    if p.degenerate:
        return 0.0
    return max(_kernels.shoelace(p.vertices), 0.0)


def convex_intersection(a: ConvexPolygon, b: ConvexPolygon) -> ConvexPolygon:
    """Intersection of two convex polygons by successive half-plane clipping.

    Disjoint inputs, or inputs that only touch along their boundary, give a
    degenerate (possibly empty) result.
    """
    P, Q = _solid(a), _solid(b)
    if len(P) == 0 or len(Q) == 0:
        return ConvexPolygon(np.empty((0, 2)), degenerate=True)
    if _kernels._lex_less(Q, P):
        verts = _kernels._clip(Q, P)[0]
    else:
        verts = _kernels._clip(P, Q)[0]
    if len(verts) == 0:
        return ConvexPolygon(verts, degenerate=True)
    # re-hull to drop duplicate and collinear vertices produced by clipping
    return convex_hull(verts)


def enclosing_hull(a: ConvexPolygon, b: ConvexPolygon) -> ConvexPolygon:
    """Convex hull of the union of both vertex lists."""
    both = np.concatenate([a.vertices, b.vertices])
    if len(both) == 0:
        return ConvexPolygon(both, degenerate=True)
    return convex_hull(both)


def convex_hull_iou(a: PolygonLike, b: PolygonLike) -> float:
    """Intersection over union of two convex hulls; point sets are hulled first.

    Symmetric bit-for-bit. Two degenerate hulls give 0.
    """
    ha, hb = _hull_of(a), _hull_of(b)
    return float(_kernels.iou_hulls(_solid(ha), _solid(hb)))


def box_to_corners(b: RotatedBox) -> np.ndarray:
    """Four corners, CCW, starting from the (-w/2, -h/2) local corner."""
    c, s = math.cos(b.theta), math.sin(b.theta)
    hw, hh = b.w / 2.0, b.h / 2.0
    local = ((-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh))
    return np.array(
        [[b.cx + c * x - s * y, b.cy + s * x + c * y] for x, y in local], dtype=np.float64
    )


def min_area_rect(points) -> RotatedBox:
    """Minimum-area enclosing rectangle via rotating calipers over hull edges.

    The first edge direction reaching the minimum wins; the result is
    canonicalised. Degenerate hulls produce a zero-height box along the
    segment, flagged ``degenerate``.
    """
    pts = as_points(points)
    hull = convex_hull(pts)
    v = hull.vertices
    if hull.degenerate:
        if len(v) == 1:
            return RotatedBox(v[0, 0], v[0, 1], 0.0, 0.0, 0.0, degenerate=True)
        d = v[1] - v[0]
        mid = (v[0] + v[1]) / 2.0
        box = RotatedBox(mid[0], mid[1], float(np.hypot(*d)), 0.0, math.atan2(d[1], d[0]), True)
        return box.canonical()

    origin = v[0]
    rel = v - origin
    edges = np.roll(rel, -1, axis=0) - rel
    lengths = np.hypot(edges[:, 0], edges[:, 1])
    ux = edges / lengths[:, None]
    # project every hull vertex on each edge frame
    along = rel @ ux.T  # (n_vertices, n_edges)
    across = rel @ np.stack([-ux[:, 1], ux[:, 0]], axis=1).T
    lo_a, hi_a = along.min(axis=0), along.max(axis=0)
    lo_c, hi_c = across.min(axis=0), across.max(axis=0)
    areas = (hi_a - lo_a) * (hi_c - lo_c)
    k = int(np.argmin(areas))
    u = ux[k]
    nrm = np.array([-u[1], u[0]])
    center = origin + (lo_a[k] + hi_a[k]) / 2.0 * u + (lo_c[k] + hi_c[k]) / 2.0 * nrm
    box = RotatedBox(
        float(center[0]),
        float(center[1]),
        float(hi_a[k] - lo_a[k]),
        float(hi_c[k] - lo_c[k]),
        math.atan2(u[1], u[0]),
    )
    return box.canonical()
