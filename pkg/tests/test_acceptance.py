"""Acceptance criteria, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line (visible even under output
capture) and then asserts, so the pytest status and the printed verdict agree.
The training criteria (8 to 10) share one cache of toy runs.
"""

import math
import time

import numpy as np
import pytest
import torch

from rotdet.geom import RotatedBox, box_to_corners, convex_hull, convex_intersection, enclosing_hull
from rotdet.loss import BACKGROUND, center_l1_grad, center_l1_loss, focal_loss, focal_loss_grad, giou_loss, giou_loss_grad
from rotdet.matching import MatchConfig, hungarian, reassign_labels
from rotdet.querymodel import OpCounter, QueryDecoder, QuerySchedule
from rotdet.synth import generate_scenes
from rotdet.train import Dataset, TrainConfig, evaluate, layer_iou_fractions, make_config, train_toy

from oracles import (
    brute_force_assignment_cost,
    edge_hull_vertices,
    central_difference,
    monte_carlo_areas,
    rel_err,
)

# toy benchmark settings
TOY_STEPS = 3000
TOY_SEEDS = (0, 1, 2)
TOY_CFG = make_config(3, 16, d=64, heads=4, layers=4)
TOY_SCHED = QuerySchedule(60, 20, 0.6, 4)


@pytest.fixture
def verdict(capsys):
    def report(n: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        assert ok, detail

    return report


def square(x0, y0, x1, y1):
    return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=float)


def random_point_set(rng, n_max=64):
    n = int(rng.integers(3, n_max + 1))
    kind = rng.integers(3)
    if kind == 0:
        return rng.uniform(-50, 50, (n, 2))
    if kind == 1:
        # many points on a circle plus some inside
        a = rng.uniform(0, 2 * math.pi, n)
        r = np.where(rng.random(n) < 0.6, 10.0, rng.uniform(0, 10, n))
        return np.column_stack([r * np.cos(a), r * np.sin(a)])
    # integer lattice, rich in collinear triples; the oracle wants distinct points
    return np.unique(rng.integers(-5, 6, (n, 2)).astype(float), axis=0)


# 1 ---------------------------------------------------------------------------


def test_criterion_1_geometry_oracles(verdict):
    t0 = time.time()
    rng = np.random.default_rng(20240)
    hull_bad = 0
    for _ in range(500):
        pts = random_point_set(rng)
        got = {tuple(v) for v in convex_hull(pts).vertices.tolist()}
        if got != edge_hull_vertices(pts):
            hull_bad += 1

    worst = 0.0
    n_sigma_fail = 0
    for pair in range(100):
        a = convex_hull(rng.uniform(0, 10, (int(rng.integers(3, 12)), 2)))
        b = convex_hull(rng.uniform(0, 10, (int(rng.integers(3, 12)), 2)) + rng.uniform(-4, 4, 2))
        inter = convex_intersection(a, b).area
        enc = enclosing_hull(a, b)
        exact = {"intersection": inter, "union": a.area + b.area - inter, "enclosing": enc.area}
        mc = monte_carlo_areas(a.vertices, b.vertices, enc.vertices, 10_000_000, seed=pair)
        for name, value in exact.items():
            est, se = mc[name]
            z = abs(est - value) / se
            worst = max(worst, z)
            n_sigma_fail += z > 3.0
    elapsed = time.time() - t0
    ok = hull_bad == 0 and n_sigma_fail == 0 and elapsed < 300
    verdict(
        1,
        ok,
        f"hull mismatches {hull_bad}/500; area checks beyond 3 sigma {n_sigma_fail}/300 "
        f"(worst {worst:.2f} sigma); {elapsed:.0f} s",
    )


# 2 ---------------------------------------------------------------------------


def test_criterion_2_giou_fixtures(verdict):
    touching = giou_loss(square(0, 0, 1, 1), square(1, 0, 2, 1))
    offset = giou_loss(square(0, 0, 2, 2), square(1, 1, 3, 3))
    ok = abs(touching - 1.0) <= 1e-12 and abs(offset - 68 / 63) <= 1e-12
    verdict(2, ok, f"touching squares {touching!r} (want 1.0); [0,2]^2 vs [1,3]^2 {offset!r} (want 68/63 = {68 / 63!r})")


# 3 ---------------------------------------------------------------------------


def test_criterion_3_gradient_checks(verdict):
    t0 = time.time()
    rng = np.random.default_rng(33)
    giou_worst = l1_worst = focal_worst = 0.0
    checked = 0
    while checked < 100:
        box = RotatedBox(*rng.uniform(20, 40, 2), rng.uniform(6, 20), rng.uniform(3, 10), rng.uniform(-1.5, 1.5))
        tgt = box_to_corners(box)
        pred = np.array([box.cx, box.cy]) + rng.normal(0, 4, 2) + rng.normal(0, 6, (9, 2))
        g = giou_loss_grad(pred, tgt)
        if g.degenerate or g.on_boundary:
            continue
        giou_worst = max(giou_worst, rel_err(g.grad, central_difference(lambda v: giou_loss(v, tgt), pred, 1e-5)))
        fd = central_difference(lambda v: center_l1_loss(v, tgt, 362.0), pred, 1e-5)
        l1_worst = max(l1_worst, rel_err(center_l1_grad(pred, tgt, 362.0), fd))
        checked += 1
    for _ in range(100):
        x = rng.normal(0, 2, 4)
        t = int(rng.integers(-1, 4))
        tc = None if t < 0 else t
        fd = central_difference(lambda v: focal_loss(v, tc), x, 1e-6)
        focal_worst = max(focal_worst, rel_err(focal_loss_grad(x, tc), fd))
    elapsed = time.time() - t0
    ok = giou_worst < 1e-4 and l1_worst < 1e-4 and focal_worst < 1e-6 and elapsed < 60
    verdict(
        3,
        ok,
        f"giou {giou_worst:.2e}, center_l1 {l1_worst:.2e} (limit 1e-4); focal {focal_worst:.2e} (limit 1e-6); {elapsed:.1f} s",
    )


# 4 ---------------------------------------------------------------------------


def test_criterion_4_hungarian_exact(verdict):
    rng = np.random.default_rng(44)
    bad = 0
    for i in range(200):
        n, m = (int(v) for v in rng.integers(1, 10, size=2))
        if min(n, m) > 7:
            n = 7
        c = rng.normal(size=(n, m)) if i % 2 else rng.integers(0, 4, (n, m)).astype(float)
        pairs = hungarian(c)
        got = math.fsum(c[r, k] for r, k in pairs)
        bad += got != brute_force_assignment_cost(c) or len(pairs) != min(n, m)
    verdict(4, bad == 0, f"{bad}/200 instances differ from exhaustive search")


# 5 ---------------------------------------------------------------------------


def test_criterion_5_schedule(verdict):
    counts = QuerySchedule(300, 100, 0.5, 6).counts()
    rng = np.random.default_rng(55)
    bad = 0
    for _ in range(1000):
        last = int(rng.integers(1, 500))
        s = QuerySchedule(last + int(rng.integers(0, 500)), last, float(rng.uniform(0.01, 0.99)), int(rng.integers(1, 12)))
        c = s.counts()
        bad += any(a < b for a, b in zip(c, c[1:]))
    ok = counts == [300, 200, 150, 125, 113, 106] and bad == 0
    verdict(5, ok, f"counts {counts}; {bad}/1000 random schedules not monotone")


# 6 ---------------------------------------------------------------------------


def test_criterion_6_reassign_boundary(verdict):
    target = [(1, RotatedBox(1, 1, 2, 2, 0.0))]  # [0,2]^2
    half = square(0, 0, 2, 1)  # IoU exactly 0.5
    at = reassign_labels([half], [(0, 0)], target, MatchConfig(tau=0.5)).labels
    # IoU = tau + 1e-6, with tau = 0.5 - 1e-6
    above = reassign_labels([half], [(0, 0)], target, MatchConfig(tau=0.5 - 1e-6)).labels
    ok = at == (BACKGROUND,) and above == (1,)
    verdict(6, ok, f"IoU == tau -> {at}; IoU == tau + 1e-6 -> {above}")


# 7 ---------------------------------------------------------------------------


def test_criterion_7_compute_reduction(verdict):
    torch.manual_seed(7)
    model = QueryDecoder(TOY_CFG, TOY_SCHED.n_first)
    feats = torch.rand(2, TOY_CFG.memory_tokens, TOY_CFG.feature_dim)
    pruned, flat = OpCounter(), OpCounter()
    with torch.no_grad():
        model(feats, TOY_SCHED, pruned)
        model(feats, QuerySchedule(TOY_SCHED.n_first, TOY_SCHED.n_first, TOY_SCHED.rho, TOY_SCHED.layers), flat)
    n = TOY_SCHED.counts()
    worst = 0.0
    for i in range(1, TOY_SCHED.layers):
        ratio = pruned.layer_total(i, "self_attn") / flat.layer_total(i, "self_attn")
        want = (n[i] / n[0]) ** 2
        worst = max(worst, abs(ratio / want - 1.0))
    ok = worst <= 0.01 and pruned.total() < flat.total()
    verdict(
        7,
        ok,
        f"self-attention ratio worst deviation {worst:.2e} (limit 1e-2); "
        f"total multiply-adds {pruned.total()} pruned vs {flat.total()} constant",
    )


# 8 to 10: toy training -----------------------------------------------------

_runs = {}


@pytest.fixture(scope="module")
def toy_data():
    train = Dataset.from_scenes(generate_scenes(1, 200), 3)
    held_out = Dataset.from_scenes(generate_scenes(2, 100, prefix="heldout"), 3)
    return train, held_out


@pytest.fixture(scope="module")
def large_held_out():
    # same stream as the held-out set, continued to 1000 scenes (the first 100 coincide)
    return Dataset.from_scenes(generate_scenes(2, 1000, prefix="heldout"), 3)


def toy_run(toy_data, seed: int, reassign: bool):
    key = (seed, reassign)
    if key not in _runs:
        train, held_out = toy_data
        t0 = time.time()
        res = train_toy(train, TOY_CFG, TOY_SCHED, MatchConfig(reassign=reassign), TrainConfig(steps=TOY_STEPS, seed=seed))
        elapsed = time.time() - t0
        _runs[key] = (res.model, evaluate(res.model, held_out, TOY_SCHED), elapsed)
    return _runs[key]


@pytest.mark.slow
def test_criterion_8_toy_map(verdict, toy_data):
    _, m_ap, elapsed = toy_run(toy_data, 0, True)
    ok = m_ap >= 0.9 and elapsed < 1800
    verdict(8, ok, f"held-out mAP@0.5 {m_ap:.4f} (need >= 0.9) after {TOY_STEPS} steps in {elapsed:.0f} s")


@pytest.mark.slow
def test_criterion_9_later_layers_fit_better(verdict, toy_data, large_held_out):
    model, _, _ = toy_run(toy_data, 0, True)
    fracs = layer_iou_fractions(model, large_held_out, TOY_SCHED, MatchConfig())
    ok = fracs[-1] < fracs[0]
    detail = ", ".join(f"{f:.4f}" for f in fracs)
    verdict(9, ok, f"fraction of matched pairs with IoU < 0.5 per layer on {len(large_held_out)} held-out scenes: {detail}")


@pytest.mark.slow
def test_criterion_10_reassignment_non_inferior(verdict, toy_data):
    rows = []
    for seed in TOY_SEEDS:
        on = toy_run(toy_data, seed, True)[1]
        off = toy_run(toy_data, seed, False)[1]
        rows.append((seed, on, off))
    ok = all(on >= off - 0.01 for _, on, off in rows)
    detail = "; ".join(f"seed {s}: with {on:.4f} without {off:.4f}" for s, on, off in rows)
    verdict(10, ok, detail)
