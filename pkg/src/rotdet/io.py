"""File formats: DOTA annotations, prediction records, checkpoints and configs.

SceneFile (DOTA layout, one object per line)::

    x1 y1 x2 y2 x3 y3 x4 y4 category difficult

``imagesource:`` and ``gsd:`` header lines are skipped. The scene id of a
file is its stem.

Prediction file, one detection per line, whitespace-delimited::

    scene_id category score pts K x1 y1 ... xK yK [probs C p1 ... pC]
    scene_id category score box cx cy w h theta [probs C p1 ... pC]

``probs`` optionally carries the per-class sigmoid scores. K must be the
same for every ``pts`` record in a file.

Checkpoints are ``.npz`` archives holding ``format_version``, a JSON
``config`` string and one little-endian float64 array per parameter
under ``param/<name>``.
"""

from __future__ import annotations

import json
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from rotdet.geom import RotatedBox, box_to_corners, min_area_rect
from rotdet.synth import DOTA_CLASSES, Scene, SceneObject

CHECKPOINT_VERSION = 1
DOTA_HEADERS = ("imagesource:", "gsd:")


class ParseError(ValueError):
    """Malformed input; the message names file, line and field."""

    def __init__(self, path, line: int, field: str, msg: str):
        self.path, self.line, self.field = str(path), line, field
        super().__init__(f"{path}:{line}: field '{field}': {msg}")


def class_index(token: str) -> int:
    """DOTA category name or ``classN`` -> class index."""
    if token in DOTA_CLASSES:
        return DOTA_CLASSES.index(token)
    if token.startswith("class") and token[5:].isdigit():
        return int(token[5:])
    raise KeyError(token)


def class_token(idx: int) -> str:
    return DOTA_CLASSES[idx] if idx < len(DOTA_CLASSES) else f"class{idx}"


def _float(path, line, name, tok) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise ParseError(path, line, name, f"expected a number, got {tok!r}") from None
    if not math.isfinite(v):
        raise ParseError(path, line, name, f"non-finite value {tok!r}")
    return v


def _int(path, line, name, tok) -> int:
    try:
        return int(tok)
    except ValueError:
        raise ParseError(path, line, name, f"expected an integer, got {tok!r}") from None


def _class(path, line, tok) -> int:
    try:
        return class_index(tok)
    except KeyError:
        raise ParseError(path, line, "category", f"unknown category {tok!r}") from None


@dataclass(frozen=True, eq=False)
class SceneRecord:
    corners: np.ndarray  # (4, 2)
    category: str
    difficult: bool = False

    def __eq__(self, other):
        return (
            isinstance(other, SceneRecord)
            and np.array_equal(self.corners, other.corners)
            and self.category == other.category
            and self.difficult == other.difficult
        )


_CORNER_FIELDS = ("x1", "y1", "x2", "y2", "x3", "y3", "x4", "y4")


def parse_scene_text(text: str, path="<string>") -> List[SceneRecord]:
    out = []
    for ln, raw in enumerate(text.splitlines(), 1):
        s = raw.strip()
        if not s or s.startswith(DOTA_HEADERS):
            continue
        tok = s.split()
        if len(tok) != 10:
            raise ParseError(path, ln, "record", f"expected 10 fields, got {len(tok)}")
        xy = [_float(path, ln, n, t) for n, t in zip(_CORNER_FIELDS, tok[:8])]
        if tok[9] not in ("0", "1"):
            raise ParseError(path, ln, "difficult", f"expected 0 or 1, got {tok[9]!r}")
        out.append(SceneRecord(np.array(xy).reshape(4, 2), tok[8], tok[9] == "1"))
    return out


def read_scene_file(path) -> List[SceneRecord]:
    return parse_scene_text(Path(path).read_text(), path)


def format_scene_records(records: Sequence[SceneRecord]) -> str:
    lines = []
    for r in records:
        xy = " ".join(repr(float(v)) for v in np.asarray(r.corners).reshape(-1))
        lines.append(f"{xy} {r.category} {int(r.difficult)}")
    return "".join(line + "\n" for line in lines)


def write_scene_file(path, records: Sequence[SceneRecord]):
    Path(path).write_text(format_scene_records(records))


def scene_to_records(scene: Scene) -> List[SceneRecord]:
    return [SceneRecord(o.corners, class_token(o.cls), o.difficult) for o in scene.objects]


def records_to_scene(scene_id: str, records: Sequence[SceneRecord], size: int, path="<string>") -> Scene:
    """Boxes are recovered as the minimum-area rectangle of each annotated quad."""
    objs = []
    for i, r in enumerate(records):
        objs.append(SceneObject(_class(path, i + 1, r.category), min_area_rect(r.corners), r.difficult))
    return Scene(scene_id, size, tuple(objs))


def scene_files(path) -> List[Path]:
    """A single annotation file, or every ``*.txt`` in a directory (sorted)."""
    p = Path(path)
    if p.is_dir():
        return sorted(p.glob("*.txt"))
    return [p]


def read_scenes(path, size: int = 256) -> List[Scene]:
    return [
        records_to_scene(f.stem, read_scene_file(f), size, f) for f in scene_files(path)
    ]


@dataclass(frozen=True, eq=False)
class PredictionRecord:
    scene_id: str
    cls: int
    score: float
    points: Optional[np.ndarray] = None  # (K, 2)
    box: Optional[RotatedBox] = None
    probs: Optional[np.ndarray] = None  # (C,)

    def geometry(self) -> np.ndarray:
        """Point set used for hull arithmetic: the K points or the box corners."""
        if self.points is not None:
            return self.points
        return box_to_corners(self.box)

    def rotated_box(self) -> RotatedBox:
        return self.box if self.box is not None else min_area_rect(self.points)


def parse_predictions(text: str, path="<string>") -> List[PredictionRecord]:
    out: List[PredictionRecord] = []
    k_seen: Optional[int] = None
    for ln, raw in enumerate(text.splitlines(), 1):
        s = raw.strip()
        if not s or s.startswith("#"):
            continue
        tok = s.split()
        if len(tok) < 4:
            raise ParseError(path, ln, "record", f"expected at least 4 fields, got {len(tok)}")
        sid, cls = tok[0], _class(path, ln, tok[1])
        score = _float(path, ln, "score", tok[2])
        if not 0.0 <= score <= 1.0:
            raise ParseError(path, ln, "score", f"score {score} outside [0, 1]")
        kind, rest = tok[3], tok[4:]
        points = box = None
        if kind == "pts":
            if not rest:
                raise ParseError(path, ln, "K", "missing point count")
            k = _int(path, ln, "K", rest[0])
            if k < 1:
                raise ParseError(path, ln, "K", f"point count must be positive, got {k}")
            if k_seen is not None and k != k_seen:
                raise ParseError(path, ln, "K", f"K={k} differs from K={k_seen} earlier in the file")
            k_seen = k
            if len(rest) < 1 + 2 * k:
                raise ParseError(path, ln, "points", f"expected {2 * k} coordinates")
            names = [f"{a}{i + 1}" for i in range(k) for a in "xy"]
            points = np.array(
                [_float(path, ln, n, t) for n, t in zip(names, rest[1 : 1 + 2 * k])]
            ).reshape(k, 2)
            rest = rest[1 + 2 * k :]
        elif kind == "box":
            if len(rest) < 5:
                raise ParseError(path, ln, "box", "expected cx cy w h theta")
            vals = [_float(path, ln, n, t) for n, t in zip(("cx", "cy", "w", "h", "theta"), rest[:5])]
            if vals[2] < 0 or vals[3] < 0:
                raise ParseError(path, ln, "w" if vals[2] < 0 else "h", "negative box size")
            box = RotatedBox(*vals)
            rest = rest[5:]
        else:
            raise ParseError(path, ln, "kind", f"expected 'pts' or 'box', got {kind!r}")
        probs = None
        if rest:
            if rest[0] != "probs" or len(rest) < 2:
                raise ParseError(path, ln, "probs", f"unexpected trailing fields {' '.join(rest)!r}")
            c = _int(path, ln, "C", rest[1])
            if len(rest) != 2 + c:
                raise ParseError(path, ln, "probs", f"expected {c} probabilities, got {len(rest) - 2}")
            probs = np.array([_float(path, ln, f"p{i + 1}", t) for i, t in enumerate(rest[2:])])
            if np.any((probs < 0) | (probs > 1)):
                raise ParseError(path, ln, "probs", "probabilities must lie in [0, 1]")
        out.append(PredictionRecord(sid, cls, score, points, box, probs))
    return out


def read_predictions(path) -> List[PredictionRecord]:
    return parse_predictions(Path(path).read_text(), path)


def format_prediction(p: PredictionRecord) -> str:
    head = f"{p.scene_id} {class_token(p.cls)} {p.score!r}"
    if p.points is not None:
        pts = np.asarray(p.points, dtype=np.float64)
        body = f"pts {len(pts)} " + " ".join(repr(float(v)) for v in pts.reshape(-1))
    else:
        b = p.box
        body = "box " + " ".join(repr(float(v)) for v in (b.cx, b.cy, b.w, b.h, b.theta))
    if p.probs is not None:
        body += f" probs {len(p.probs)} " + " ".join(repr(float(v)) for v in p.probs)
    return f"{head} {body}"


def write_predictions(path, preds: Sequence[PredictionRecord]):
    with open(path, "w") as fh:
        for p in preds:
            fh.write(format_prediction(p) + "\n")


def read_point_list(path) -> np.ndarray:
    """One ``x y`` pair per line; blank lines and ``#`` comments are skipped."""
    text = Path(path).read_text() if str(path) != "-" else sys.stdin.read()
    pts = []
    for ln, raw in enumerate(text.splitlines(), 1):
        s = raw.split("#", 1)[0].strip()
        if not s:
            continue
        tok = s.split()
        if len(tok) != 2:
            raise ParseError(path, ln, "point", f"expected 2 fields, got {len(tok)}")
        pts.append([_float(path, ln, "x", tok[0]), _float(path, ln, "y", tok[1])])
    if not pts:
        raise ParseError(path, 0, "point", "no points")
    return np.array(pts)


# --- training config and checkpoints ---------------------------------------


@dataclass
class RunConfig:
    """Everything ``rotdet train`` needs. Stored as JSON."""

    seed: int = 0
    steps: int = 3000
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 8
    grad_clip: float = 1.0
    augment: bool = True
    data_seed: int = 1
    scenes: int = 200
    image_size: int = 256
    objects: Tuple[int, int] = (1, 8)
    classes: int = 3
    grid: int = 16
    d: int = 64
    heads: int = 4
    layers: int = 4
    k_points: int = 9
    ffn_dim: int = 128
    n_first: int = 60
    n_last: int = 20
    rho: float = 0.6
    tau: float = 0.5
    reassign: bool = True
    weights: Dict[str, float] = field(
        default_factory=lambda: {
            "lambda_cls": 2.0,
            "lambda_l1": 5.0,
            "lambda_iou": 2.0,
            "focal_alpha": 0.25,
            "focal_gamma": 2.0,
        }
    )

    @classmethod
    def from_dict(cls, d: dict, path="<config>") -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        extra = sorted(set(d) - known)
        if extra:
            raise ParseError(path, 0, extra[0], "unknown config key")
        cfg = cls(**d)
        cfg.objects = tuple(cfg.objects)
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["objects"] = list(self.objects)
        return d


def read_config(path) -> RunConfig:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ParseError(path, e.lineno, "json", e.msg) from None
    if not isinstance(d, dict):
        raise ParseError(path, 1, "json", "top level must be an object")
    return RunConfig.from_dict(d, path)


def write_config(path, cfg: RunConfig):
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")


def save_checkpoint(path, state: Dict[str, "np.ndarray"], config: dict):
    arrays = {"format_version": np.array(CHECKPOINT_VERSION, dtype="<i8")}
    arrays["config"] = np.array(json.dumps(config, sort_keys=True))
    for name, t in state.items():
        arrays["param/" + name] = np.asarray(t, dtype="<f8")
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as z:
        version = int(z["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        config = json.loads(str(z["config"]))
        state = {k[len("param/") :]: z[k] for k in z.files if k.startswith("param/")}
    return state, config
