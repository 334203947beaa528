"""Desk-scale training of the query decoder on synthetic scenes.

Losses and their gradients come from :mod:`rotdet.loss` (numpy); they are
pushed into the network with ``torch.autograd.backward``. Every decoder layer
is matched and supervised independently.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from rotdet.eval import Detection, GroundTruth, mean_ap
from rotdet.geom import min_area_rect
from rotdet.loss import LossWeights, total_loss_arrays
from rotdet.matching import MatchConfig, cost_matrix_arrays, hungarian, reassign_arrays
from rotdet.querymodel import DecoderConfig, QueryDecoder, QuerySchedule
from rotdet.synth import Scene, dihedral, feature_channels, rasterize

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 3000
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 8
    grad_clip: float = 1.0
    seed: int = 0
    lr_drop_at: float = 0.8  # fraction of steps after which lr is divided by 10
    augment: bool = True  # train on all 8 flips/quarter turns of every scene


@dataclass
class Dataset:
    scenes: List[Scene]
    features: torch.Tensor  # (S, T, F)
    classes: List[np.ndarray]
    corners: List[np.ndarray]
    size: float

    @classmethod
    def from_scenes(cls, scenes: Sequence[Scene], num_classes: int, grid: int = 16) -> "Dataset":
        feats = np.stack([rasterize(s, num_classes, grid) for s in scenes])
        return cls(
            list(scenes),
            torch.from_numpy(feats).to(torch.get_default_dtype()),
            [s.classes for s in scenes],
            [s.corners for s in scenes],
            float(scenes[0].size) if scenes else 256.0,
        )

    def __len__(self) -> int:
        return len(self.scenes)

    def augmented(self, num_classes: int, grid: int = 16) -> "Dataset":
        """Every scene under the 8 symmetries of the square (identity first)."""
        return Dataset.from_scenes(
            [dihedral(s, k) for s in self.scenes for k in range(8)], num_classes, grid
        )


@dataclass
class LayerMatch:
    pairs: List[tuple]
    labels: np.ndarray
    ious: np.ndarray


def match_layer(
    logits: np.ndarray,
    points: np.ndarray,
    classes: np.ndarray,
    corners: np.ndarray,
    mcfg: MatchConfig,
    diag: float,
) -> LayerMatch:
    n = logits.shape[0]
    if len(classes) == 0:
        return LayerMatch([], np.full(n, -1, dtype=np.int64), np.zeros(0))
    cost = cost_matrix_arrays(logits, points, classes, corners, mcfg.weights, diag)
    pairs = hungarian(cost)
    labels, ious = reassign_arrays(points, pairs, classes, corners, n, mcfg.tau)
    if not mcfg.reassign:
        labels = np.full(n, -1, dtype=np.int64)
        for q, t in pairs:
            labels[q] = classes[t]
    return LayerMatch(pairs, labels, ious)


def batch_loss(outputs, data: Dataset, batch: Sequence[int], mcfg: MatchConfig, with_grad=True):
    """Mean over scenes of the summed per-layer losses.

    Returns ``(loss, per_layer_records, grads)`` where ``grads`` aligns with
    ``[o.logits for o in outputs] + [o.points for o in outputs]``.
    """
    diag = data.size * math.sqrt(2.0)
    B = len(batch)
    total = 0.0
    records = []
    g_logits, g_points = [], []
    for li, o in enumerate(outputs):
        lg = o.logits.detach().double().numpy()
        pt = o.points.detach().double().numpy()
        if not (np.isfinite(lg).all() and np.isfinite(pt).all()):
            raise TrainingDiverged(f"non-finite outputs at decoder layer {li}")
        gl = np.zeros_like(lg)
        gp = np.zeros_like(pt)
        rec = {"cls": 0.0, "l1": 0.0, "iou": 0.0, "total": 0.0, "n_pos": 0, "queries": lg.shape[1]}
        for bi, si in enumerate(batch):
            m = match_layer(lg[bi], pt[bi], data.classes[si], data.corners[si], mcfg, diag)
            res = total_loss_arrays(
                lg[bi], pt[bi], m.pairs, m.labels, data.corners[si], mcfg.weights, diag, with_grad
            )
            if with_grad:
                br, dl, dp = res
                gl[bi] = dl / B
                gp[bi] = dp / B
            else:
                br = res
            rec["cls"] += br.cls / B
            rec["l1"] += br.l1 / B
            rec["iou"] += br.iou / B
            rec["total"] += br.total / B
            rec["n_pos"] += br.n_pos
        total += rec["total"]
        records.append(rec)
        g_logits.append(torch.from_numpy(gl).to(o.logits.dtype))
        g_points.append(torch.from_numpy(gp).to(o.points.dtype))
    return total, records, g_logits + g_points


def scene_loss_fn(model: QueryDecoder, data: Dataset, batch, sched, mcfg, anchors=None) -> float:
    with torch.no_grad():
        outs = model(data.features[list(batch)], sched, anchors=anchors)
    return batch_loss(outs, data, batch, mcfg, with_grad=False)[0]


def backward_step(model, data, batch, sched, mcfg):
    outs = model(data.features[list(batch)], sched)
    loss, records, grads = batch_loss(outs, data, batch, mcfg, with_grad=True)
    tensors = [o.logits for o in outs] + [o.points for o in outs]
    torch.autograd.backward(tensors, grads)
    return loss, records


def gradient_spot_check(
    model: QueryDecoder,
    data: Dataset,
    batch: Sequence[int],
    sched: QuerySchedule,
    mcfg: MatchConfig,
    n_params: int = 20,
    h: float = 1e-4,
    seed: int = 0,
) -> List[dict]:
    """Compare backprop gradients with central differences on random scalars.

    Runs on a float64 copy of the model. The perturbed forwards reuse the
    unperturbed query selection and (detached) reference points, so the
    difference quotient probes the same function backprop differentiates.
    Returns one record per probed parameter with the analytic value, the
    finite difference and their relative error ``|a - f| / max(|a|, |f|, 1e-8)``.
    """
    import copy

    m64 = copy.deepcopy(model).double()
    d64 = Dataset(data.scenes, data.features.double(), data.classes, data.corners, data.size)
    m64.zero_grad()
    backward_step(m64, d64, batch, sched, mcfg)
    with torch.no_grad():
        anchors = m64(d64.features[list(batch)], sched)
    named = [(n, p) for n, p in m64.named_parameters() if p.grad is not None]
    rng = np.random.default_rng(seed)
    # choose among parameters that the loss actually touches
    live = [(n, p) for n, p in named if float(p.grad.abs().max()) > 0]
    sizes = np.array([p.numel() for _, p in live], dtype=float)
    out = []
    for _ in range(n_params):
        pi = rng.choice(len(live), p=sizes / sizes.sum())
        name, p = live[pi]
        flat = int(rng.integers(p.numel()))
        a = float(p.grad.view(-1)[flat])
        with torch.no_grad():
            orig = float(p.view(-1)[flat])
            p.view(-1)[flat] = orig + h
            lp = scene_loss_fn(m64, d64, batch, sched, mcfg, anchors)
            p.view(-1)[flat] = orig - h
            lm = scene_loss_fn(m64, d64, batch, sched, mcfg, anchors)
            p.view(-1)[flat] = orig
        f = (lp - lm) / (2 * h)
        rel = abs(a - f) / max(abs(a), abs(f), 1e-8)
        out.append({"param": name, "index": flat, "analytic": a, "numeric": f, "rel_err": rel})
    return out


@dataclass
class TrainResult:
    model: QueryDecoder
    log: List[dict] = field(default_factory=list)


def build_model(cfg: DecoderConfig, sched: QuerySchedule, seed: int) -> QueryDecoder:
    torch.manual_seed(seed)
    return QueryDecoder(cfg, sched.n_first)


def train_toy(
    data: Dataset,
    cfg: DecoderConfig,
    sched: QuerySchedule,
    mcfg: MatchConfig = MatchConfig(),
    tcfg: TrainConfig = TrainConfig(),
    model: Optional[QueryDecoder] = None,
    on_step: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Train with AdamW and per-layer deep supervision.

    Raises :class:`TrainingDiverged` when the loss becomes non-finite.
    """
    if model is None:
        model = build_model(cfg, sched, tcfg.seed)
    if tcfg.augment:
        data = data.augmented(cfg.classes, int(round(math.sqrt(cfg.memory_tokens))))
    opt = torch.optim.AdamW(model.parameters(), lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    drop = int(tcfg.steps * tcfg.lr_drop_at)
    rng = np.random.default_rng(tcfg.seed)
    order = rng.permutation(len(data))
    pos = 0
    history = []
    t0 = time.time()
    for step in range(tcfg.steps):
        if step == drop:
            for g in opt.param_groups:
                g["lr"] = tcfg.lr * 0.1
        if pos + tcfg.batch_size > len(order):
            order = rng.permutation(len(data))
            pos = 0
        batch = order[pos : pos + tcfg.batch_size].tolist()
        pos += tcfg.batch_size
        opt.zero_grad()
        try:
            loss, records = backward_step(model, data, batch, sched, mcfg)
        except TrainingDiverged as e:
            raise TrainingDiverged(f"{e} at step {step} (batch {batch})") from None
        if not math.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss} at step {step} (batch {batch})")
        if tcfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), tcfg.grad_clip)
        opt.step()
        rec = {
            "step": step,
            "loss": loss,
            "cls": records[-1]["cls"],
            "l1": records[-1]["l1"],
            "iou": records[-1]["iou"],
            "n_pos": records[-1]["n_pos"],
            "layer_losses": [r["total"] for r in records],
            "queries": [r["queries"] for r in records],
            "elapsed": time.time() - t0,
        }
        history.append(rec)
        if on_step is not None:
            on_step(rec)
    return TrainResult(model, history)


def predict(
    model: QueryDecoder,
    data: Dataset,
    sched: QuerySchedule,
    layer: int = -1,
    batch_size: int = 32,
) -> List[Detection]:
    """Detections from one layer: class = argmax, score = max sigmoid, box = min-area rect."""
    dets: List[Detection] = []
    model.eval()
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            idx = list(range(start, min(start + batch_size, len(data))))
            outs = model(data.features[idx], sched)
            o = outs[layer]
            probs = torch.sigmoid(o.logits).double().numpy()
            pts = o.points.double().numpy()
            for bi, si in enumerate(idx):
                sid = data.scenes[si].scene_id
                for q in range(probs.shape[1]):
                    c = int(probs[bi, q].argmax())
                    dets.append(
                        Detection(sid, c, float(probs[bi, q, c]), min_area_rect(pts[bi, q]), pts[bi, q])
                    )
    model.train()
    return dets


def ground_truths(data: Dataset) -> List[GroundTruth]:
    return [
        GroundTruth(s.scene_id, o.cls, o.box, o.difficult) for s in data.scenes for o in s.objects
    ]


def evaluate(model, data: Dataset, sched: QuerySchedule, iou_thresh: float = 0.5) -> float:
    return mean_ap(predict(model, data, sched), ground_truths(data), iou_thresh)


def layer_iou_fractions(
    model: QueryDecoder, data: Dataset, sched: QuerySchedule, mcfg: MatchConfig, thresh: float = 0.5
) -> List[float]:
    """Per layer, fraction of matched pairs whose hull IoU is below ``thresh``."""
    diag = data.size * math.sqrt(2.0)
    fracs = []
    model.eval()
    with torch.no_grad():
        outs = model(data.features, sched)
    model.train()
    for o in outs:
        lg = o.logits.double().numpy()
        pt = o.points.double().numpy()
        vals = []
        for si in range(len(data)):
            m = match_layer(lg[si], pt[si], data.classes[si], data.corners[si], mcfg, diag)
            vals.extend(m.ious.tolist())
        vals = np.asarray(vals)
        fracs.append(float((vals < thresh).mean()) if len(vals) else 0.0)
    return fracs


def make_config(num_classes: int, grid: int, **kw) -> DecoderConfig:
    return DecoderConfig(
        classes=num_classes,
        memory_tokens=grid * grid,
        feature_dim=feature_channels(num_classes),
        **kw,
    )


def write_log(path, records: Sequence[dict]):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


__all__ = [
    "TrainConfig",
    "Dataset",
    "TrainingDiverged",
    "train_toy",
    "predict",
    "evaluate",
    "gradient_spot_check",
    "layer_iou_fractions",
]
