import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

import reference as ref
from conftest import random_boxes
from prlab import evaluation as E
from prlab.geometry import BBox
from prlab.synth import Scene


def det(sid, cls, box, score):
    return E.Detection(sid, cls, BBox(*box), score)


def random_instance(rng, n_det=20, n_gt=8, n_cls=3, jitter=True):
    gt_boxes = random_boxes(rng, int(rng.integers(0, n_gt + 1)))
    gt_cls = rng.integers(0, n_cls, len(gt_boxes))
    ignore = rng.random(len(gt_boxes)) < 0.15
    scene = Scene(100, 100, gt_boxes, gt_cls, ignore, "s")
    dets = []
    for _ in range(int(rng.integers(0, n_det + 1))):
        if len(gt_boxes) and jitter and rng.random() < 0.6:
            j = int(rng.integers(len(gt_boxes)))
            box = np.clip(gt_boxes[j] + rng.normal(0, 3, 4), 0, 100)
            box = [min(box[0], box[2] - 0.5), min(box[1], box[3] - 0.5), box[2], box[3]]
            cls = int(gt_cls[j]) if rng.random() < 0.8 else int(rng.integers(n_cls))
        else:
            box, cls = random_boxes(rng, 1)[0].tolist(), int(rng.integers(n_cls))
        dets.append(det("s", cls, box, float(np.round(rng.random(), 1))))  # rounding forces ties
    return scene, dets


def as_reference(scene, dets):
    gts = [(int(c), b.tolist(), bool(i)) for c, b, i in zip(scene.classes, scene.boxes, scene.ignore)]
    return gts, [(d.score, d.class_id, d.box.to_array().tolist()) for d in dets]


def test_single_tp():
    s = Scene(50, 50, [[0, 0, 10, 10]], [1], scene_id="s")
    m = E.match_detections([det("s", 1, [0, 0, 10, 10], 0.9)], s, 0.5)
    assert m.status.tolist() == [E._kernels.TP] and m.gt_matched.tolist() == [True]


def test_double_detection():
    s = Scene(50, 50, [[0, 0, 10, 10]], [1], scene_id="s")
    m = E.match_detections([det("s", 1, [0, 0, 10, 10], 0.5), det("s", 1, [0, 0, 10, 9], 0.9)], s, 0.5)
    assert m.status.tolist() == [E._kernels.FP, E._kernels.TP]


def test_match_against_oracle(kernels):
    rng = np.random.default_rng(3)
    names = {E._kernels.TP: "TP", E._kernels.FP: "FP", E._kernels.IGNORED: "ignored"}
    for _ in range(300):
        scene, dets = random_instance(rng)
        m = E.match_detections(dets, scene, 0.5)
        gts, rdets = as_reference(scene, dets)
        st_ref, which = ref.match(rdets, gts, 0.5)
        assert [names[int(s)] for s in m.status] == st_ref
        assert m.gt_index.tolist() == which


def test_ap_examples():
    s = {"s": Scene(50, 50, [[0, 0, 10, 10]], [0], scene_id="s")}
    assert E.ap_11point([det("s", 0, [0, 0, 10, 10], 0.9)], s)[0] == 1.0
    assert E.ap_11point([], s)[0] == 0.0


def test_ap_hand_staircase():
    gt = [[0, 0, 10, 10], [20, 20, 30, 30], [40, 40, 50, 50]]
    s = {"s": Scene(100, 100, gt, [0, 0, 0], scene_id="s")}
    dets = [det("s", 0, [0, 0, 10, 10], 0.9), det("s", 0, [60, 60, 70, 70], 0.8),
            det("s", 0, [20, 20, 30, 30], 0.7), det("s", 0, [80, 80, 90, 90], 0.6)]
    # P/R: (1, 1/3) (1/2, 1/3) (2/3, 2/3) (1/2, 2/3) -> four points at 1, three at 2/3
    assert E.ap_11point(dets, s)[0] == pytest.approx(6 / 11, abs=1e-15)


def test_ap_absent_class_excluded():
    s = {"s": Scene(50, 50, [[0, 0, 10, 10]], [0], scene_id="s")}
    ap = E.ap_11point([det("s", 0, [0, 0, 10, 10], 0.9), det("s", 5, [0, 0, 5, 5], 0.3)], s)
    assert ap[5] is None and E.mean_ap(ap) == 1.0


def test_ap_against_oracle(kernels):
    rng = np.random.default_rng(4)
    for _ in range(200):
        scene, dets = random_instance(rng)
        scenes = {"s": scene}
        ap = E.ap_11point(dets, scenes, 0.5)
        gts, _ = as_reference(scene, dets)
        rdets = [(d.scene_id, d.class_id, d.box.to_array().tolist(), d.score) for d in dets]
        for cls, v in ap.items():
            expected = ref.corpus_ap(rdets, {"s": gts}, cls, 0.5)
            if expected is None:
                assert v is None
            else:
                assert abs(v - float(expected)) < 1e-12


def test_difficult_excluded_from_denominator():
    s = {"s": Scene(50, 50, [[0, 0, 10, 10], [20, 20, 30, 30]], [0, 0], [False, True], "s")}
    dets = [det("s", 0, [20, 20, 30, 30], 0.9), det("s", 0, [0, 0, 10, 10], 0.8)]
    assert E.ap_11point(dets, s)[0] == 1.0


def test_all_point_interpolation():
    gt = [[0, 0, 10, 10], [20, 20, 30, 30]]
    s = {"s": Scene(100, 100, gt, [0, 0], scene_id="s")}
    dets = [det("s", 0, [0, 0, 10, 10], 0.9), det("s", 0, [60, 60, 70, 70], 0.8),
            det("s", 0, [20, 20, 30, 30], 0.7)]
    # recall 1/2 at precision 1, recall 1 at precision 2/3
    assert E.ap_11point(dets, s, interpolation="all")[0] == pytest.approx(0.5 + 0.5 * 2 / 3)


def test_map_range_perfect():
    s = {"s": Scene(50, 50, [[0, 0, 10, 10], [20, 20, 40, 30]], [0, 1], scene_id="s")}
    dets = [det("s", 0, [0, 0, 10, 10], 0.9), det("s", 1, [20, 20, 40, 30], 0.8)]
    mean, per_t = E.map_range(dets, s)
    assert mean == 1.0 and per_t == [1.0] * 11


def test_map_range_threshold_membership():
    s = {"s": Scene(100, 100, [[0, 0, 100, 100]], [0], scene_id="s")}
    d = det("s", 0, [0, 0, 100, 72], 0.9)  # IoU 0.72
    _, per_t = E.map_range([d], s)
    assert per_t == [1.0] * 5 + [0.0] * 6
    assert E.RANGE_THRESHOLDS[4] == Fraction(7, 10)


def test_map_range_below_ap50_on_random_instances():
    rng = np.random.default_rng(5)
    for _ in range(100):
        scene, dets = random_instance(rng)
        if not np.any(~scene.ignore):
            continue
        mean, _ = E.map_range(dets, {"s": scene})
        ap50 = E.mean_ap(E.ap_11point(dets, {"s": scene}, 0.5))
        assert mean <= ap50 + 1e-12


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_ap_depends_only_on_ranking(seed):
    rng = np.random.default_rng(seed)
    scene, dets = random_instance(rng)
    moved = [E.Detection(d.scene_id, d.class_id, d.box, math.exp(3 * d.score) / 100) for d in dets]
    assert E.ap_11point(dets, {"s": scene}) == E.ap_11point(moved, {"s": scene})


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_duplicate_of_tp_never_helps(seed):
    rng = np.random.default_rng(seed)
    scene, dets = random_instance(rng)
    m = E.match_detections(dets, scene, 0.5)
    tps = np.flatnonzero(m.status == E._kernels.TP)
    if not len(tps):
        return
    d = dets[int(tps[0])]
    dup = E.Detection(d.scene_id, d.class_id, d.box, d.score * 0.5)
    before = E.ap_11point(dets, {"s": scene})
    after = E.ap_11point(dets + [dup], {"s": scene})
    assert after[d.class_id] <= before[d.class_id] + 1e-15


@settings(max_examples=100, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_tp_count_bounded_by_gt(kernels, seed):
    rng = np.random.default_rng(seed)
    scene, dets = random_instance(rng)
    m = E.match_detections(dets, scene, 0.5)
    for cls in set(d.class_id for d in dets):
        n_tp = sum(1 for d, s in zip(dets, m.status) if d.class_id == cls and s == E._kernels.TP)
        assert n_tp <= int(np.sum((scene.classes == cls) & ~scene.ignore))


def test_recall_examples():
    gt = np.array([[0, 0, 10, 10], [30, 30, 50, 50]], dtype=float)
    s = {"s": Scene(100, 100, gt, [0, 1], scene_id="s")}
    assert E.recall_at_k({"s": (gt, np.array([0.2, 0.1]))}, s, 0.5, 100) == 1.0
    miss = np.array([[80, 80, 90, 90], [0, 0, 10, 10]], dtype=float)
    assert E.recall_at_k({"s": (miss, np.array([0.9, 0.1]))}, s, 0.5, 1) == 0.0


def test_recall_no_gt_errors():
    with pytest.raises(ValueError, match="no ground truth"):
        E.recall_at_k({}, {"s": Scene(10, 10)}, 0.5, 10)


def test_recall_against_counting_oracle():
    rng = np.random.default_rng(6)
    for _ in range(100):
        gts = random_boxes(rng, 6)
        props = random_boxes(rng, 30)
        scores = np.round(rng.random(30), 1)
        k = int(rng.integers(1, 31))
        got = E.recall_at_k({"s": (props, scores)}, {"s": Scene(100, 100, gts, np.zeros(6), scene_id="s")},
                            0.5, k)
        expected = ref.recall_at_k({"s": list(zip(props.tolist(), scores.tolist()))},
                                   {"s": gts.tolist()}, 0.5, k)
        assert got == float(expected)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_recall_monotone_in_k(seed):
    rng = np.random.default_rng(seed)
    s = {"s": Scene(100, 100, random_boxes(rng, 5), np.zeros(5), scene_id="s")}
    p = {"s": (random_boxes(rng, 25), rng.random(25))}
    vals = [E.recall_at_k(p, s, 0.3, k) for k in range(1, 26)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))


def test_imbalance_symmetry():
    run = [np.array([0.45, 0.55, 0.95]), np.array([0.65, 0.42])]
    rep = E.imbalance_report(run, run)
    np.testing.assert_array_equal(rep.base_avg, rep.novel_avg)
    for key in ("share_ratio_novel_base", "hi_lo_ratio_novel_base", "count_ratio_novel_base_ge05"):
        assert rep.stats[key] == 1.0


def test_imbalance_hand_tally():
    base = [np.array([0.41, 0.45, 0.52, 0.61, 0.75, 0.93, 0.97, 1.0, 0.2]), np.array([0.99])]
    novel = [np.array([0.40, 0.44, 0.48, 0.55, 0.58, 0.66, 0.91, 0.3, 0.1, 0.05])]
    rep = E.imbalance_report(base, novel)
    # bins [0.4,0.5) [0.5,0.6) [0.6,0.7) [0.7,0.8) [0.8,0.9) [0.9,1.0]
    np.testing.assert_allclose(rep.base_avg, np.array([2, 1, 1, 1, 0, 4]) / 2)
    np.testing.assert_allclose(rep.novel_avg, [3, 2, 1, 0, 0, 1])
    assert rep.stats["base_share_04_06"] == pytest.approx(3 / 9)
    assert rep.stats["novel_share_04_06"] == pytest.approx(5 / 7)
    assert rep.stats["base_ratio_09_04"] == pytest.approx(2.0)
    assert rep.stats["novel_ratio_09_04"] == pytest.approx(1 / 3)
    assert rep.stats["count_ratio_novel_base_ge05"] == pytest.approx(4 / 3.5)


def test_evaluate_report_and_trace():
    s = {"a": Scene(50, 50, [[0, 0, 10, 10]], [0], scene_id="a"),
         "b": Scene(50, 50, [[5, 5, 25, 25]], [1], scene_id="b")}
    dets = [det("a", 0, [0, 0, 10, 10], 0.9), det("b", 1, [5, 5, 25, 20], 0.8), det("b", 0, [0, 0, 4, 4], 0.1)]
    rep = E.evaluate(dets, s, {0: "cat", 1: "dog"}, recall_k=10, groups={"pets": [1]}, with_trace=True)
    assert rep.ap50 == {0: 1.0, 1: 1.0}
    assert rep.recall["recall@10"] == 1.0
    assert rep.groups["pets"]["map50"] == 1.0
    # one record per detection per distinct threshold
    assert len(rep.trace) == 3 * 11
    assert {r["detection"] for r in rep.trace if r["iou_thresh"] == 0.5} == {0, 1, 2}
    d = rep.to_dict()
    assert d["per_class_ap50"] == {"cat": 1.0, "dog": 1.0}
    assert "AP[.50:1.0]" in rep.table()


def test_evaluate_empty_detections_scores_zero():
    s = {"a": Scene(50, 50, [[0, 0, 10, 10]], [0], scene_id="a")}
    rep = E.evaluate([], s, recall_k=100)
    assert rep.map50 == 0.0 and rep.map_range == 0.0 and rep.recall["recall@100"] == 0.0
