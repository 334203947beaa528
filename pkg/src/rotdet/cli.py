"""``rotdet`` command line.

Exit codes: 0 success, 2 usage error, 3 unreadable or malformed input,
4 numeric or domain error. Output is plain ``key value`` text, floats printed
with ``repr`` so they round-trip.
"""

from __future__ import annotations

import argparse
import math
import sys
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from rotdet import io
from rotdet.geom import GeometryError, convex_hull, min_area_rect
from rotdet.loss import BACKGROUND, LossWeights, giou_breakdown, total_loss_arrays
from rotdet.matching import MatchConfig, cost_matrix_arrays, empirical_cdf, hungarian, reassign_arrays
from rotdet.querymodel import QuerySchedule

EXIT_USAGE, EXIT_PARSE, EXIT_DOMAIN = 2, 3, 4
PROB_FLOOR = 1e-6  # probabilities are clipped before taking logits


def _f(x: float) -> str:
    return repr(float(x))


def _emit(lines: Sequence[str]):
    sys.stdout.write("".join(line + "\n" for line in lines))


def cmd_hull(args) -> int:
    h = convex_hull(io.read_point_list(args.points))
    out = [f"vertices {len(h)}", f"degenerate {int(h.degenerate)}"]
    out += [f"{_f(x)} {_f(y)}" for x, y in h.vertices]
    _emit(out)
    return 0


def cmd_giou(args) -> int:
    t = giou_breakdown(io.read_point_list(args.pred), io.read_point_list(args.target))
    _emit(
        [
            f"loss {_f(t.loss)}",
            f"iou {_f(t.iou)}",
            f"intersection {_f(t.intersection)}",
            f"union {_f(t.union)}",
            f"enclosing {_f(t.enclosing)}",
            f"degenerate {int(t.degenerate)}",
        ]
    )
    return 0


def cmd_minrect(args) -> int:
    b = min_area_rect(io.read_point_list(args.points))
    _emit([f"cx {_f(b.cx)}", f"cy {_f(b.cy)}", f"w {_f(b.w)}", f"h {_f(b.h)}", f"theta {_f(b.theta)}"])
    return 0


def cmd_schedule(args) -> int:
    s = QuerySchedule(args.n_first, args.n_last, args.rho, args.layers)
    _emit([" ".join(str(n) for n in s.counts())])
    return 0


def _weights(args) -> LossWeights:
    return LossWeights(args.lambda_cls, args.lambda_l1, args.lambda_iou, args.alpha, args.gamma)


def _pred_logits(p: io.PredictionRecord, num_classes: int) -> np.ndarray:
    """Logits from the record's class probabilities, or from its score alone."""
    if p.probs is not None:
        if len(p.probs) != num_classes:
            raise ValueError(
                f"prediction for {p.scene_id} has {len(p.probs)} probabilities, expected {num_classes}"
            )
        probs = p.probs
    else:
        probs = np.zeros(num_classes)
        probs[p.cls] = p.score
    probs = np.clip(probs, PROB_FLOOR, 1.0 - PROB_FLOOR)
    return np.log(probs) - np.log1p(-probs)


def _grouped(preds, scenes):
    by_scene: Dict[str, List[io.PredictionRecord]] = defaultdict(list)
    for p in preds:
        by_scene[p.scene_id].append(p)
    gts = {s.scene_id: s for s in scenes}
    return by_scene, gts


def _num_classes(preds, scenes, given) -> int:
    if given:
        return given
    seen = [p.cls for p in preds] + [o.cls for s in scenes for o in s.objects]
    seen += [len(p.probs) - 1 for p in preds if p.probs is not None]
    return max(seen, default=0) + 1


def _match_scene(preds, scene, num_classes, mcfg, diag):
    """Matching, re-assignment and loss for one scene's predictions."""
    n = len(preds)
    k = {len(p.geometry()) for p in preds}
    if len(k) > 1:
        raise ValueError(f"scene {scene.scene_id}: predictions mix point counts {sorted(k)}")
    logits = np.stack([_pred_logits(p, num_classes) for p in preds])
    points = np.stack([p.geometry() for p in preds])
    classes = scene.classes
    corners = scene.corners
    pairs = []
    if len(classes):
        pairs = hungarian(cost_matrix_arrays(logits, points, classes, corners, mcfg.weights, diag))
    labels, ious = reassign_arrays(points, pairs, classes, corners, n, mcfg.tau)
    if not mcfg.reassign:
        labels = np.full(n, BACKGROUND, dtype=np.int64)
        for q, t in pairs:
            labels[q] = classes[t]
    br = total_loss_arrays(logits, points, pairs, labels, corners, mcfg.weights, diag)
    return pairs, labels, ious, br


def _scene_set(args):
    preds = io.read_predictions(args.pred)
    scenes = io.read_scenes(args.gt, args.size)
    by_scene, gts = _grouped(preds, scenes)
    unknown = sorted(set(by_scene) - set(gts))
    if unknown:
        raise ValueError(f"predictions reference scenes without ground truth: {' '.join(unknown)}")
    return preds, scenes, by_scene


def _label(c: int) -> str:
    return "background" if c == BACKGROUND else io.class_token(int(c))


def cmd_match(args) -> int:
    preds, scenes, by_scene = _scene_set(args)
    C = _num_classes(preds, scenes, args.classes)
    mcfg = MatchConfig(args.tau, _weights(args), not args.no_reassign)
    diag = args.size * math.sqrt(2.0)
    out = []
    for s in scenes:
        sp = by_scene.get(s.scene_id, [])
        out.append(f"scene {s.scene_id} queries {len(sp)} targets {len(s.objects)}")
        if not sp:
            continue
        pairs, labels, ious, br = _match_scene(sp, s, C, mcfg, diag)
        for (q, t), iou in zip(pairs, ious):
            out.append(f"pair {q} {t} iou {_f(iou)} label {_label(labels[q])}")
        matched = {q for q, _ in pairs}
        for q in range(len(sp)):
            if q not in matched:
                out.append(f"unmatched {q} label background")
        out.append(
            f"loss n_pos {br.n_pos} cls {_f(br.cls)} l1 {_f(br.l1)} iou {_f(br.iou)} total {_f(br.total)}"
        )
    _emit(out)
    return 0


def cmd_cdf(args) -> int:
    preds, scenes, by_scene = _scene_set(args)
    C = _num_classes(preds, scenes, args.classes)
    mcfg = MatchConfig(weights=_weights(args))
    diag = args.size * math.sqrt(2.0)
    ious: List[float] = []
    for s in scenes:
        sp = by_scene.get(s.scene_id, [])
        if sp and s.objects:
            ious.extend(_match_scene(sp, s, C, mcfg, diag)[2].tolist())
    _emit(["iou fraction"] + [f"{_f(v)} {_f(f)}" for v, f in empirical_cdf(ious)])
    return 0


def cmd_synth(args) -> int:
    from rotdet.synth import generate_scenes

    if args.min_objects > args.max_objects or args.min_objects < 0:
        raise ValueError(f"invalid object range [{args.min_objects}, {args.max_objects}]")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenes = generate_scenes(
        args.seed, args.scenes, args.size, (args.min_objects, args.max_objects), args.classes, args.prefix
    )
    for s in scenes:
        io.write_scene_file(out / f"{s.scene_id}.txt", io.scene_to_records(s))
    _emit([f"scenes {len(scenes)}", f"objects {sum(len(s.objects) for s in scenes)}", f"dir {out}"])
    return 0


def _run_parts(cfg: io.RunConfig):
    from rotdet.train import TrainConfig, make_config

    dcfg = make_config(
        cfg.classes,
        cfg.grid,
        d=cfg.d,
        heads=cfg.heads,
        layers=cfg.layers,
        k_points=cfg.k_points,
        ffn_dim=cfg.ffn_dim,
        image_size=float(cfg.image_size),
    )
    sched = QuerySchedule(cfg.n_first, cfg.n_last, cfg.rho, cfg.layers)
    mcfg = MatchConfig(cfg.tau, LossWeights(**cfg.weights), cfg.reassign)
    tcfg = TrainConfig(
        cfg.steps, cfg.lr, cfg.weight_decay, cfg.batch_size, cfg.grad_clip, cfg.seed, augment=cfg.augment
    )
    return dcfg, sched, mcfg, tcfg


def _state_arrays(model) -> Dict[str, np.ndarray]:
    return {k: v.detach().double().numpy() for k, v in model.state_dict().items()}


def load_model(path):
    """Rebuild a decoder from a checkpoint; returns ``(model, RunConfig)``."""
    import torch

    from rotdet.train import build_model

    state, raw = io.load_checkpoint(path)
    cfg = io.RunConfig.from_dict(raw, path)
    dcfg, sched, _, tcfg = _run_parts(cfg)
    model = build_model(dcfg, sched, tcfg.seed)
    model.load_state_dict({k: torch.from_numpy(np.array(v)).to(torch.get_default_dtype()) for k, v in state.items()})
    return model, cfg


def cmd_train(args) -> int:
    from rotdet.synth import generate_scenes
    from rotdet.train import Dataset, build_model, train_toy, write_log

    cfg = io.read_config(args.config)
    dcfg, sched, mcfg, tcfg = _run_parts(cfg)
    scenes = generate_scenes(cfg.data_seed, cfg.scenes, cfg.image_size, cfg.objects, cfg.classes)
    data = Dataset.from_scenes(scenes, cfg.classes, cfg.grid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(dcfg, sched, tcfg.seed)
    res = train_toy(data, dcfg, sched, mcfg, tcfg, model=model)
    io.save_checkpoint(out / "checkpoint.npz", _state_arrays(res.model), cfg.to_dict())
    write_log(out / "log.jsonl", res.log)
    last = res.log[-1]["loss"] if res.log else float("nan")
    _emit([f"steps {len(res.log)}", f"final_loss {_f(last)}", f"checkpoint {out / 'checkpoint.npz'}"])
    return 0


def cmd_predict(args) -> int:
    import torch

    from rotdet.train import Dataset

    model, cfg = load_model(args.checkpoint)
    _, sched, _, _ = _run_parts(cfg)
    scenes = io.read_scenes(args.scenes, cfg.image_size)
    if not scenes:
        raise ValueError(f"no scenes found in {args.scenes}")
    data = Dataset.from_scenes(scenes, cfg.classes, cfg.grid)
    records = []
    model.eval()
    with torch.no_grad():
        outs = model(data.features, sched)
    o = outs[args.layer]
    probs = torch.sigmoid(o.logits).double().numpy()
    pts = o.points.double().numpy()
    for si, s in enumerate(scenes):
        for q in range(probs.shape[1]):
            c = int(probs[si, q].argmax())
            records.append(io.PredictionRecord(s.scene_id, c, float(probs[si, q, c]), pts[si, q], None, probs[si, q]))
    io.write_predictions(args.out, records)
    _emit([f"detections {len(records)}", f"file {args.out}"])
    return 0


def cmd_eval(args) -> int:
    from rotdet.eval import Detection, GroundTruth, per_class_ap

    preds, scenes, _ = _scene_set(args)
    dets = [Detection(p.scene_id, p.cls, p.score, p.rotated_box(), p.points) for p in preds]
    gts = [GroundTruth(s.scene_id, o.cls, o.box, o.difficult) for s in scenes for o in s.objects]
    aps = per_class_ap(dets, gts, args.thresh)
    defined = [v for v in aps.values() if not math.isnan(v)]
    if not defined:
        raise ValueError("no class has ground truth; mAP is undefined")
    out = [f"ap {io.class_token(c)} {'undefined' if math.isnan(v) else _f(v)}" for c, v in aps.items()]
    out.append(f"map {_f(float(np.mean(defined)))}")
    _emit(out)
    return 0


def _add_weights(p):
    w = LossWeights()
    p.add_argument("--lambda-cls", type=float, default=w.lambda_cls)
    p.add_argument("--lambda-l1", type=float, default=w.lambda_l1)
    p.add_argument("--lambda-iou", type=float, default=w.lambda_iou)
    p.add_argument("--alpha", type=float, default=w.focal_alpha, help="focal alpha")
    p.add_argument("--gamma", type=float, default=w.focal_gamma, help="focal gamma")


def _add_pred_gt(p):
    p.add_argument("pred", help="prediction file")
    p.add_argument("gt", help="DOTA annotation file or directory of them")
    p.add_argument("--size", type=int, default=256, help="image side in pixels")
    p.add_argument("--classes", type=int, default=0, help="number of classes (default: inferred)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rotdet", description="Oriented detection toolkit.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("hull", help="convex hull of a point list")
    p.add_argument("points", help="file with one 'x y' per line ('-' for stdin)")
    p.set_defaults(func=cmd_hull)

    p = sub.add_parser("giou", help="convex-hull GIoU loss between two point lists")
    p.add_argument("pred", help="predicted point list")
    p.add_argument("target", help="target point list")
    p.set_defaults(func=cmd_giou)

    p = sub.add_parser("minrect", help="minimum-area rectangle of a point list")
    p.add_argument("points", help="file with one 'x y' per line ('-' for stdin)")
    p.set_defaults(func=cmd_minrect)

    p = sub.add_parser("schedule", help="per-layer query counts")
    p.add_argument("n_first", type=int)
    p.add_argument("n_last", type=int)
    p.add_argument("rho", type=float)
    p.add_argument("layers", type=int)
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("match", help="matching, label re-assignment and loss per scene")
    _add_pred_gt(p)
    p.add_argument("--tau", type=float, default=0.5, help="IoU at or below which a match becomes background")
    p.add_argument("--no-reassign", action="store_true", help="keep every matched label")
    _add_weights(p)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("cdf", help="CDF of matched-pair hull IoU")
    _add_pred_gt(p)
    _add_weights(p)
    p.set_defaults(func=cmd_cdf)

    p = sub.add_parser("synth", help="write synthetic scenes as DOTA files")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", type=int, default=10)
    p.add_argument("--min-objects", type=int, default=1)
    p.add_argument("--max-objects", type=int, default=8)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--prefix", default="scene")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the toy decoder from a JSON config")
    p.add_argument("config", help="JSON run config")
    p.add_argument("--out", required=True, help="output directory for checkpoint and log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="run a checkpoint on DOTA scenes")
    p.add_argument("checkpoint")
    p.add_argument("scenes", help="DOTA file or directory")
    p.add_argument("--out", required=True, help="prediction file to write")
    p.add_argument("--layer", type=int, default=-1, help="decoder layer to read (default: last)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="per-class AP and mAP")
    _add_pred_gt(p)
    p.add_argument("--thresh", type=float, default=0.5, help="IoU threshold for a true positive")
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except io.ParseError as e:
        print(f"rotdet: parse error: {e}", file=sys.stderr)
        return EXIT_PARSE
    except OSError as e:
        print(f"rotdet: cannot read input: {e}", file=sys.stderr)
        return EXIT_PARSE
    except (GeometryError, ValueError, IndexError, KeyError) as e:
        print(f"rotdet: {e}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
