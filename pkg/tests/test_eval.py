import math

import numpy as np
import pytest

from rotdet.eval import Detection, GroundTruth, ap_per_class, match_detections, mean_ap, per_class_ap
from rotdet.geom import RotatedBox

from oracles import voc07_from_staircase


def box(x, y, w=10.0, h=10.0, t=0.0):
    return RotatedBox(x, y, w, h, t)


def det(x, score, cls=0, scene="a", y=0.0):
    return Detection(scene, cls, score, box(x, y))


def gt(x, cls=0, scene="a", difficult=False, y=0.0):
    return GroundTruth(scene, cls, box(x, y), difficult)


def test_single_perfect():
    assert ap_per_class([det(0, 0.9)], [gt(0)]) == 1.0


def test_low_iou_misses():
    # shift 10 * (1 - 2 * 0.3 / 1.3) gives IoU 0.3 for unit-height overlap
    shift = 10 * (1 - 0.6 / 1.3)
    assert ap_per_class([det(shift, 0.9)], [gt(0)]) == 0.0


def test_staircase_oracle():
    gts = [gt(0), gt(100), gt(200)]
    # scores descending: TP, FP, TP, FP, TP
    dets = [det(0, 0.9), det(50, 0.8), det(100, 0.7), det(150, 0.6), det(200, 0.5)]
    assert ap_per_class(dets, gts) == pytest.approx(voc07_from_staircase([1, 0, 1, 0, 1], 3), abs=1e-12)
    # by hand: envelope 1 for t <= 0.3, 2/3 for t in 0.4..0.6, 3/5 above
    assert ap_per_class(dets, gts) == pytest.approx((4 * 1.0 + 3 * 2 / 3 + 4 * 0.6) / 11, abs=1e-12)


def test_duplicates_are_false_positives():
    out = match_detections([det(0, 0.9), det(0.5, 0.8), det(0, 0.7)], [gt(0)], 0.5)
    assert out.tolist() == [1, 0, 0]


def test_difficult_ignored():
    dets = [det(0, 0.9), det(100, 0.8)]
    gts = [gt(0, difficult=True), gt(100)]
    assert match_detections(dets, gts, 0.5).tolist() == [-1, 1]
    assert ap_per_class(dets, gts) == 1.0


def test_undefined_class():
    assert math.isnan(ap_per_class([det(0, 0.9, cls=1)], [gt(0)], cls=1))
    with pytest.raises(ValueError):
        mean_ap([det(0, 0.9)], [gt(0, difficult=True)])


def test_two_classes_mean():
    dets = [det(0, 0.9, cls=0), det(300, 0.9, cls=1)]
    gts = [gt(0, cls=0), gt(100, cls=1)]
    assert per_class_ap(dets, gts) == {0: 1.0, 1: 0.0}
    assert mean_ap(dets, gts) == 0.5


def test_scenes_kept_apart():
    assert ap_per_class([det(0, 0.9, scene="b")], [gt(0, scene="a")]) == 0.0


def test_random_benchmark_mean_matches_per_class():
    rng = np.random.default_rng(0)
    gts, dets = [], []
    for s in range(6):
        for _ in range(4):
            c, x, y = int(rng.integers(3)), rng.uniform(0, 200), rng.uniform(0, 200)
            gts.append(GroundTruth(f"s{s}", c, box(x, y, 12, 6, rng.uniform(-1, 1)), bool(rng.random() < 0.1)))
            dets.append(Detection(f"s{s}", c, float(rng.random()), box(x + rng.normal(0, 2), y + rng.normal(0, 2), 12, 6, rng.uniform(-1, 1))))
    per = [ap_per_class(dets, gts, 0.5, c) for c in range(3)]
    assert mean_ap(dets, gts) == pytest.approx(np.nanmean(per), abs=1e-12)
    prev = 1.0
    for t in np.linspace(0.05, 0.95, 19):
        v = mean_ap(dets, gts, t)
        assert 0.0 <= v <= 1.0
        assert v <= prev + 1e-12
        prev = v


def test_equal_scores_keep_input_order():
    dets = [det(0, 0.5), det(0.2, 0.5)]
    assert match_detections(dets, [gt(0)], 0.5).tolist() == [1, 0]
    assert match_detections(dets[::-1], [gt(0)], 0.5).tolist() == [1, 0]
