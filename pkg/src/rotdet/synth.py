"""Synthetic oriented-object scenes and their rasterised feature maps.

Scenes are generated with SplitMix64 so the same seed yields the same scenes
on any platform or language:

    state += 0x9E3779B97F4A7C15 (mod 2**64)
    z = state
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 (mod 2**64)
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB (mod 2**64)
    out = z ^ (z >> 31)

A uniform double in [0, 1) is ``(out >> 11) * 2**-53``. Draw order per scene:
object count, then for every object class, long side, aspect ratio, angle,
centre x, centre y (repeated on rejection).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from rotdet.geom import RotatedBox, box_to_corners, convex_hull, convex_intersection, polygon_area

MASK64 = (1 << 64) - 1

# DOTA category names, used in order for class indices.
DOTA_CLASSES = (
    "small-vehicle",
    "ship",
    "storage-tank",
    "plane",
    "large-vehicle",
    "harbor",
    "bridge",
    "helicopter",
    "tennis-court",
    "basketball-court",
    "ground-track-field",
    "baseball-diamond",
    "soccer-ball-field",
    "roundabout",
    "swimming-pool",
)

# (long side min, long side max, aspect min, aspect max) at a 256 px image.
SHAPE_PROFILES = (
    (16.0, 28.0, 1.6, 2.4),
    (40.0, 72.0, 3.0, 5.0),
    (20.0, 36.0, 1.0, 1.3),
)


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def random(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi] (inclusive)."""
        return lo + int(self.random() * (hi - lo + 1))


@dataclass(frozen=True)
class SceneObject:
    cls: int
    box: RotatedBox
    difficult: bool = False

    @property
    def corners(self) -> np.ndarray:
        return box_to_corners(self.box)


@dataclass(frozen=True)
class Scene:
    scene_id: str
    size: int
    objects: Tuple[SceneObject, ...]

    @property
    def classes(self) -> np.ndarray:
        return np.array([o.cls for o in self.objects], dtype=np.int64)

    @property
    def corners(self) -> np.ndarray:
        if not self.objects:
            return np.zeros((0, 4, 2))
        return np.stack([o.corners for o in self.objects])


def class_names(n: int) -> List[str]:
    return [DOTA_CLASSES[i] if i < len(DOTA_CLASSES) else f"class{i}" for i in range(n)]


def _overlaps(corners: np.ndarray, others: Sequence[np.ndarray], gap: float) -> bool:
    grown = convex_hull(_inflate(corners, gap))
    for o in others:
        if polygon_area(convex_intersection(grown, convex_hull(o))) > 0.0:
            return True
    return False


def _inflate(corners: np.ndarray, gap: float) -> np.ndarray:
    c = corners.mean(axis=0)
    d = corners - c
    n = np.linalg.norm(d, axis=1, keepdims=True)
    return c + d * (1.0 + gap / n)


def generate_scene(
    rng: SplitMix64,
    scene_id: str,
    size: int = 256,
    n_objects: Tuple[int, int] = (1, 8),
    num_classes: int = 3,
    gap: float = 2.0,
    max_tries: int = 200,
) -> Scene:
    """Non-overlapping rotated rectangles fully inside a ``size`` square image."""
    lo, hi = n_objects
    if not 0 <= lo <= hi:
        raise ValueError(f"invalid object count range {n_objects}")
    if num_classes < 1:
        raise ValueError("need at least one class")
    scale = size / 256.0
    count = rng.randint(lo, hi)
    objects: List[SceneObject] = []
    placed: List[np.ndarray] = []
    while len(objects) < count:
        for _ in range(max_tries):
            cls = rng.randint(0, num_classes - 1)
            lmin, lmax, amin, amax = SHAPE_PROFILES[cls % len(SHAPE_PROFILES)]
            w = rng.uniform(lmin, lmax) * scale
            h = w / rng.uniform(amin, amax)
            theta = rng.uniform(-math.pi / 2, math.pi / 2)
            ex = 0.5 * (w * abs(math.cos(theta)) + h * abs(math.sin(theta)))
            ey = 0.5 * (w * abs(math.sin(theta)) + h * abs(math.cos(theta)))
            cx = rng.uniform(ex + 1.0, size - ex - 1.0)
            cy = rng.uniform(ey + 1.0, size - ey - 1.0)
            box = RotatedBox(cx, cy, w, h, theta).canonical()
            corners = box_to_corners(box)
            if not _overlaps(corners, placed, gap):
                objects.append(SceneObject(cls, box))
                placed.append(corners)
                break
        else:
            raise RuntimeError(f"could not place {count} objects in scene {scene_id}")
    return Scene(scene_id, size, tuple(objects))


def generate_scenes(
    seed: int,
    count: int,
    size: int = 256,
    n_objects: Tuple[int, int] = (1, 8),
    num_classes: int = 3,
    prefix: str = "scene",
) -> List[Scene]:
    rng = SplitMix64(seed)
    return [
        generate_scene(rng, f"{prefix}_{i:04d}", size, n_objects, num_classes)
        for i in range(count)
    ]


def dihedral(scene: Scene, k: int) -> Scene:
    """One of the 8 symmetries of the square image: ``k % 4`` quarter turns
    (x, y) -> (size - y, x), followed by a transpose when ``k >= 4``."""
    if not 0 <= k < 8:
        raise ValueError(f"dihedral index must lie in [0, 8), got {k}")
    size = scene.size
    objs = []
    for o in scene.objects:
        b = o.box
        cx, cy, t = b.cx, b.cy, b.theta
        for _ in range(k % 4):
            cx, cy, t = size - cy, cx, t + math.pi / 2
        if k >= 4:
            cx, cy, t = cy, cx, math.pi / 2 - t
        objs.append(SceneObject(o.cls, RotatedBox(cx, cy, b.w, b.h, t).canonical(), o.difficult))
    return Scene(f"{scene.scene_id}~d{k}" if k else scene.scene_id, size, tuple(objs))


def feature_channels(num_classes: int) -> int:
    return num_classes + 6


def rasterize(scene: Scene, num_classes: int, grid: int = 16, supersample: int = 4) -> np.ndarray:
    """Stand-in for encoder output: a (grid*grid, C + 6) feature map.

    Per cell: the covered fraction for each class, then for the object that
    covers the cell most, its centre offset from the cell centre and log size
    (both in cell units) and (cos 2a, sin 2a) of its angle. The object terms
    are scaled by that object's coverage so empty cells are all zero.
    """
    cell = scene.size / grid
    n = grid * supersample
    s = (np.arange(n) + 0.5) * (scene.size / n)
    xs, ys = np.meshgrid(s, s)  # row index = y
    feats = np.zeros((grid, grid, num_classes + 6))
    best = np.zeros((grid, grid))
    centers = (np.arange(grid) + 0.5) * cell
    for obj in scene.objects:
        b = obj.box
        c, si = math.cos(b.theta), math.sin(b.theta)
        dx, dy = xs - b.cx, ys - b.cy
        u = dx * c + dy * si
        v = -dx * si + dy * c
        inside = (np.abs(u) <= b.w / 2) & (np.abs(v) <= b.h / 2)
        cov = inside.reshape(grid, supersample, grid, supersample).mean(axis=(1, 3))
        feats[:, :, obj.cls] += cov
        take = cov > best
        best = np.where(take, cov, best)
        off_x = (b.cx - centers[None, :]) / cell
        off_y = (b.cy - centers[:, None]) / cell
        obj_terms = np.stack(
            np.broadcast_arrays(
                off_x,
                off_y,
                math.log(b.w / cell),
                math.log(b.h / cell),
                math.cos(2 * b.theta),
                math.sin(2 * b.theta),
            ),
            axis=-1,
        )
        feats[:, :, num_classes:] = np.where(
            take[..., None], obj_terms * cov[..., None], feats[:, :, num_classes:]
        )
    return feats.reshape(grid * grid, -1)
