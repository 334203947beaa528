import math

import numpy as np
import pytest

from rotdet.geom import RotatedBox, box_to_corners
from rotdet.loss import BACKGROUND, LossWeights, center_l1_loss, giou_loss
from rotdet.matching import (
    Assignment,
    MatchConfig,
    cdf_at,
    empirical_cdf,
    hungarian,
    iou_cdf,
    matching_cost,
    reassign_labels,
)

from oracles import brute_force_assignment_cost


def total(cost, pairs):
    return math.fsum(cost[r, c] for r, c in pairs)


class TestHungarian:
    def test_two_by_two(self):
        assert hungarian(np.array([[1.0, 2.0], [2.0, 1.0]])) == [(0, 0), (1, 1)]

    def test_diagonal_dominant(self):
        c = np.array([[0.1, 5, 5], [5, 0.2, 5], [5, 5, 0.3]])
        assert hungarian(c) == [(0, 0), (1, 1), (2, 2)]

    def test_ties_prefer_low_indices(self):
        assert hungarian(np.ones((3, 3))) == [(0, 0), (1, 1), (2, 2)]
        assert hungarian(np.array([[1.0, 2, 3], [1, 2, 3]])) == [(0, 0), (1, 1)]

    def test_empty(self):
        assert hungarian(np.zeros((0, 3))) == []
        assert hungarian(np.zeros((4, 0))) == []

    def test_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n, m = rng.integers(1, 8, size=2)
            c = rng.normal(size=(n, m))
            pairs = hungarian(c)
            assert len(pairs) == min(n, m)
            assert len({r for r, _ in pairs}) == len(pairs) == len({c_ for _, c_ in pairs})
            assert total(c, pairs) == brute_force_assignment_cost(c)

    def test_brute_force_integer_ties(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            n, m = rng.integers(1, 7, size=2)
            c = rng.integers(0, 3, size=(n, m)).astype(float)
            assert total(c, hungarian(c)) == brute_force_assignment_cost(c)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            c = rng.normal(size=(9, 5))
            perm = rng.permutation(5)
            base = hungarian(c)
            permuted = hungarian(c[:, perm])
            inv = np.argsort(perm)
            assert sorted((r, int(perm[k])) for r, k in permuted) == base
            assert total(c[:, perm], permuted) == pytest.approx(total(c, base), abs=1e-12)
            assert all(inv[perm[k]] == k for _, k in permuted)

    def test_scale_invariance(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            c = rng.normal(size=(6, 4))
            assert hungarian(c) == hungarian(c * float(rng.uniform(0.01, 100)))

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            hungarian(np.array([[np.nan, 1.0]]))


class TestCost:
    def test_perfect_query(self):
        box = RotatedBox(10, 10, 6, 3, 0.2)
        logits = np.array([-50.0, 50.0])
        c = matching_cost([(logits, box_to_corners(box))], [(1, box)])
        assert c[0, 0] == pytest.approx(-2.0, abs=1e-12)

    def test_compositional(self):
        rng = np.random.default_rng(4)
        w = LossWeights()
        targets = [(int(rng.integers(3)), RotatedBox(*rng.uniform(10, 50, 2), 8, 4, rng.uniform(-1, 1))) for _ in range(3)]
        preds = [(rng.normal(size=3), rng.uniform(0, 60, (5, 2))) for _ in range(4)]
        diag = 90.0
        c = matching_cost(preds, targets, w, diag)
        assert c.shape == (4, 3)
        for i, (lg, pts) in enumerate(preds):
            for j, (cls, box) in enumerate(targets):
                tc = box_to_corners(box)
                p = 1 / (1 + np.exp(-lg[cls]))
                want = -w.lambda_cls * p + w.lambda_l1 * center_l1_loss(pts, tc, diag) + w.lambda_iou * giou_loss(pts, tc)
                assert abs(c[i, j] - want) <= 1e-12


def sq(x0, y0, x1, y1):
    return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=float)


BOX02 = RotatedBox(1, 1, 2, 2, 0.0)  # [0,2]^2


class TestReassign:
    def test_exact_overlap_kept(self):
        a = reassign_labels([box_to_corners(BOX02)], [(0, 0)], [(2, BOX02)])
        assert a.labels == (2,)

    def test_low_iou_dropped(self):
        a = reassign_labels([sq(1, 1, 3, 3)], [(0, 0)], [(2, BOX02)])  # IoU 1/7
        assert a.labels == (BACKGROUND,)
        assert a.matched == ((0, 0),)

    def test_boundary_strict(self):
        # [0,2]x[0,1] vs [0,2]^2 has IoU exactly 0.5
        half = sq(0, 0, 2, 1)
        assert reassign_labels([half], [(0, 0)], [(1, BOX02)], MatchConfig(tau=0.5)).labels == (BACKGROUND,)
        assert reassign_labels([half], [(0, 0)], [(1, BOX02)], MatchConfig(tau=0.5 - 1e-6)).labels == (1,)

    def test_unmatched_background(self):
        a = reassign_labels([box_to_corners(BOX02), sq(5, 5, 6, 6)], [(0, 0)], [(0, BOX02)])
        assert a.labels == (0, BACKGROUND)

    def test_monotone_in_tau(self):
        rng = np.random.default_rng(5)
        targets = [(int(rng.integers(3)), RotatedBox(*rng.uniform(10, 30, 2), 8, 5, rng.uniform(-1, 1))) for _ in range(4)]
        preds = [box_to_corners(b) + rng.normal(0, 2.0, (4, 2)) for _, b in targets]
        pairs = [(i, i) for i in range(4)]
        prev = None
        for tau in np.linspace(0, 1, 21):
            a = reassign_labels(preds, pairs, targets, MatchConfig(tau=float(tau)))
            assert a.matched == tuple(pairs)
            if prev is not None:
                assert all(not (p == BACKGROUND and c != BACKGROUND) for p, c in zip(prev, a.labels))
            prev = a.labels
        assert reassign_labels(preds, pairs, targets, MatchConfig(tau=0.0)).labels == tuple(c for c, _ in targets)
        assert set(reassign_labels(preds, pairs, targets, MatchConfig(tau=1.0)).labels) == {BACKGROUND}

    def test_disabled(self):
        a = reassign_labels([sq(1, 1, 3, 3)], [(0, 0)], [(2, BOX02)], MatchConfig(reassign=False))
        assert a.labels == (2,)

    def test_tau_validated(self):
        with pytest.raises(ValueError):
            MatchConfig(tau=1.5)


class TestCDF:
    def test_single(self):
        assert empirical_cdf([0.8]) == [(0.8, 1.0)]

    def test_fraction_at_half(self):
        t = empirical_cdf([0.2, 0.6, 0.6, 0.9])
        assert cdf_at(t, 0.5) == 0.25
        assert t[-1][1] == 1.0
        assert [f for _, f in t] == sorted(f for _, f in t)

    def test_empty(self):
        assert iou_cdf([], Assignment((), ()), []) == []

    def test_from_assignment(self):
        preds = [box_to_corners(BOX02), sq(1, 1, 3, 3)]
        targets = [(0, BOX02), (0, RotatedBox(1, 1, 2, 2, 0.0))]
        t = iou_cdf(preds, Assignment(((0, 0), (1, 1)), (0, BACKGROUND)), targets)
        assert t[0][0] == pytest.approx(1 / 7, abs=1e-12)
        assert t == [(t[0][0], 0.5), (1.0, 1.0)]
