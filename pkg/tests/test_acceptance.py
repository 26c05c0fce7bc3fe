"""The eleven acceptance criteria, each at its stated tolerance.

Every test records a one-line verdict that is repeated in the pytest terminal
summary. The training criteria (5 to 8) share one set of per-seed runs.
"""
import json
import time
from dataclasses import dataclass, replace

import numpy as np
import pytest

import reference as ref
from conftest import random_boxes
from prlab import cascade as cas
from prlab import cli, experiment
from prlab import evaluation as E
from prlab import proposals as prop
from prlab.config import ExperimentConfig
from prlab.geometry import decode_deltas, encode_deltas
from prlab.ingest import load_voc, parse_coco_json
from prlab.protocol import base_train, novel_finetune, run_detector
from test_ingest import FIX, scene_fields

SEEDS = tuple(range(10))
K = 5


# ---------------------------------------------------------------- 1-4: oracles

def test_c1_metric_oracle(verdict):
    rng = np.random.default_rng(2024)
    names = {E._kernels.TP: "TP", E._kernels.FP: "FP", E._kernels.IGNORED: "ignored"}
    t0 = time.perf_counter()
    worst, mismatches = 0.0, 0
    for _ in range(1000):
        n_gt = int(rng.integers(0, 9))
        gt = random_boxes(rng, n_gt)
        gcls = rng.integers(0, 3, n_gt)
        ign = rng.random(n_gt) < 0.15
        scene = E.Scene(100, 100, gt, gcls, ign, "s")
        dets = []
        for _ in range(int(rng.integers(0, 21))):
            if n_gt and rng.random() < 0.6:
                j = int(rng.integers(n_gt))
                b = np.clip(gt[j] + rng.normal(0, 3, 4), 0, 100)
                b = [min(b[0], b[2] - 0.5), min(b[1], b[3] - 0.5), b[2], b[3]]
                c = int(gcls[j])
            else:
                b, c = random_boxes(rng, 1)[0].tolist(), int(rng.integers(3))
            dets.append(E.Detection("s", c, E.BBox(*b), float(np.round(rng.random(), 1))))
        m = E.match_detections(dets, scene, 0.5)
        gts = [(int(c), b.tolist(), bool(i)) for c, b, i in zip(gcls, gt, ign)]
        st, which = ref.match([(d.score, d.class_id, d.box.to_array().tolist()) for d in dets], gts, 0.5)
        mismatches += [names[int(s)] for s in m.status] != st or m.gt_index.tolist() != which
        rdets = [(d.scene_id, d.class_id, d.box.to_array().tolist(), d.score) for d in dets]
        for cls, ap in E.ap_11point(dets, {"s": scene}, 0.5).items():
            expected = ref.corpus_ap(rdets, {"s": gts}, cls, 0.5)
            if (ap is None) != (expected is None):
                mismatches += 1
            elif ap is not None:
                worst = max(worst, abs(ap - float(expected)))
    dt = time.perf_counter() - t0
    ok = mismatches == 0 and worst < 1e-12 and dt < 30
    assert verdict(1, ok, f"1000 instances, match mismatches {mismatches}, max AP error {worst:.1e}, {dt:.1f}s")


def test_c2_nms_oracle(verdict):
    from test_proposals import nms_reference

    rng = np.random.default_rng(2025)
    cases = []
    for _ in range(1000):
        n = int(rng.integers(1, 51))
        cases.append((random_boxes(rng, n), np.round(rng.random(n), 2)))
    expected = [nms_reference(b, s, 0.5) for b, s in cases]
    t0 = time.perf_counter()
    got = [prop.nms(b, s, 0.5).tolist() for b, s in cases]
    dt = time.perf_counter() - t0
    bad = sum(g != e for g, e in zip(got, expected))
    assert verdict(2, bad == 0 and dt < 10, f"1000 instances, {bad} index mismatches, {dt:.2f}s")


def _fd_check(params_of, loss_of, step_of, eps=1e-5):
    """Worst relative error between the update direction of one SGD step
    (lr = 1) and a central finite difference of the loss."""
    grads = step_of()
    worst = 0.0
    for name, arr in params_of().items():
        for idx in np.ndindex(arr.shape):
            vals = [loss_of(name, idx, sign * eps) for sign in (1, -1)]
            num = (vals[0] - vals[1]) / (2 * eps)
            ana = grads[name][idx]
            worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-4))
    return worst


def test_c3_gradients(verdict):
    rng = np.random.default_rng(2026)
    rpn_worst = stage_worst = 0.0
    for _ in range(50):
        n, f = int(rng.integers(3, 9)), int(rng.integers(2, 6))
        x = rng.standard_normal((n, f))
        y = (rng.random(n) < 0.5).astype(float)
        t = rng.standard_normal((n, 4)) * 2
        head = prop.RpnHead(rng.standard_normal(f), float(rng.normal()), rng.standard_normal((4, f)),
                            rng.standard_normal(4))

        def rpn_loss(name, idx, d, head=head, x=x, y=y, t=t):
            h = head.copy()
            if name == "b_obj":
                h.b_obj += d
            else:
                getattr(h, name)[idx] += d
            loss, _ = prop.rpn_loss_and_grad(h, x, y, t)
            return loss.cls + loss.reg

        def rpn_update(head=head, x=x, y=y, t=t):
            new, _ = prop.rpn_step(head, x, y, t, 1.0, 1.0)
            return {k: head.params()[k] - v for k, v in new.params().items()}

        rpn_worst = max(rpn_worst, _fd_check(head.params, rpn_loss, rpn_update))

        k = int(rng.integers(1, 4))
        labels = rng.integers(0, k + 1, n)
        shead = cas.StageHead(rng.standard_normal((k + 1, f)), rng.standard_normal(k + 1),
                              rng.standard_normal((4, f)), rng.standard_normal(4))

        def stage_loss(name, idx, d, shead=shead, x=x, labels=labels, t=t):
            h = shead.copy()
            getattr(h, name)[idx] += d
            loss, _ = cas.stage_loss_and_grad(h, x, labels, t)
            return loss.cls + loss.reg

        def stage_update(shead=shead, x=x, labels=labels, t=t):
            new, _ = cas.stage_step(shead, cas.StageConfig(0.5, 1.0), x, labels, t, 1.0)
            return {k: shead.params()[k] - v for k, v in new.params().items()}

        stage_worst = max(stage_worst, _fd_check(shead.params, stage_loss, stage_update))
    ok = rpn_worst < 1e-5 and stage_worst < 1e-5
    assert verdict(3, ok, f"50 batches each, max rel error rpn {rpn_worst:.1e}, stage {stage_worst:.1e}")


def test_c4_delta_roundtrip(verdict):
    rng = np.random.default_rng(2027)
    n = 100_000
    a = random_boxes(rng, n, size=200, min_side=2)
    b = random_boxes(rng, n, size=200, min_side=2)
    err = float(np.max(np.abs(decode_deltas(a, encode_deltas(a, b)) - b)))
    assert verdict(4, err < 1e-9, f"{n} pairs, max roundtrip error {err:.1e}")


# ---------------------------------------------------------------- 5-8: training runs

@dataclass
class SeedRun:
    c5_seconds: float
    c7_seconds: float
    base_share: np.ndarray
    novel_share: np.ndarray
    imbalance: dict
    metrics: dict  # gamma -> ablation metrics, refinement on
    single_stage: dict  # ablation metrics, refinement off, default gamma
    rpn_untouched: bool


def _seed_run(seed: int) -> SeedRun:
    cfg = ExperimentConfig().with_seed(seed)
    gamma = cfg.train.gamma_rpn
    t0 = time.perf_counter()
    work = experiment.make_workload(cfg)
    shots = work.shots(K, seed)
    det, _ = base_train(cfg.train, work.split, work.train, work.features)
    t_base = time.perf_counter() - t0

    metrics, tuned = {}, {}
    t_tune = {}
    for g in (0.0, gamma):
        t = time.perf_counter()
        train = replace(cfg.train, gamma_rpn=g)
        tuned[g], _ = novel_finetune(det, train, work.split, shots)
        ev = run_detector(tuned[g], work.balanced_test, train, seed)
        metrics[g] = experiment.ablation_metrics(experiment.report_for(ev, cfg), cfg)
        t_tune[g] = time.perf_counter() - t

    t = time.perf_counter()
    base_pass = run_detector(det, work.base_test, cfg.train, seed)
    novel_pass = run_detector(tuned[gamma], work.novel_test, cfg.train, seed)
    t_hist = time.perf_counter() - t

    # frozen-RPN imbalance: the gamma = 0 detector on base-only and novel-only scenes
    frozen = replace(cfg.train, gamma_rpn=0.0)
    on_base = run_detector(tuned[0.0], work.base_test, frozen, seed)
    on_novel = run_detector(tuned[0.0], work.novel_test, frozen, seed)
    imb = E.imbalance_report(list(on_base.proposals.values()), list(on_novel.proposals.values()))

    one = cfg.train.single_stage()
    det1, _ = base_train(one, work.split, work.train, work.features)
    tuned1, _ = novel_finetune(det1, one, work.split, shots)
    ev1 = run_detector(tuned1, work.balanced_test, one, seed)
    single = experiment.ablation_metrics(experiment.report_for(ev1, cfg), cfg)

    return SeedRun(
        c5_seconds=t_base + t_tune[gamma] + t_hist,
        c7_seconds=t_base + t_tune[0.0] + t_tune[gamma],
        base_share=base_pass.stage_histogram().share_ge_075,
        novel_share=novel_pass.stage_histogram().share_ge_075,
        imbalance=imb.stats,
        metrics=metrics,
        single_stage=single,
        rpn_untouched=tuned[0.0].rpn.equal(det.rpn),
    )


@pytest.fixture(scope="module")
def runs():
    return {s: _seed_run(s) for s in SEEDS}


def test_c5_cascade_rebalancing(runs, verdict):
    r = runs[0]  # seed 0 is the default configuration
    # snapshot 0 enters stage 1, snapshot 2 enters stage 3
    gain_base = r.base_share[2] - r.base_share[0]
    gain_novel = r.novel_share[2] - r.novel_share[0]
    ok = gain_base >= 0.20 and gain_novel >= 0.20 and r.c5_seconds < 180
    assert verdict(5, ok, f"share IoU>=0.75 stage1->3: base {r.base_share[0]:.1%}->{r.base_share[2]:.1%}, "
                          f"novel {r.novel_share[0]:.1%}->{r.novel_share[2]:.1%}, {r.c5_seconds:.0f}s")


def test_c6_imbalance(runs, verdict):
    def mean(key):
        return float(np.mean([runs[s].imbalance[key] for s in SEEDS]))

    bs, ns = mean("base_share_04_06"), mean("novel_share_04_06")
    br, nr = mean("base_ratio_09_04"), mean("novel_ratio_09_04")
    ok = ns > bs and nr < br
    assert verdict(6, ok, f"[0.4,0.6) share novel {ns:.3f} vs base {bs:.3f}; "
                          f"[0.9,1.0]/[0.4,0.5) novel {nr:.2f} vs base {br:.2f} ({len(SEEDS)} seeds)")


def test_c7_gamma_ablation(runs, verdict):
    gamma = ExperimentConfig().train.gamma_rpn

    def mean(g, key):
        return float(np.mean([runs[s].metrics[g][key] for s in SEEDS]))

    ap0, ap1 = mean(0.0, "novel_ap50"), mean(gamma, "novel_ap50")
    rc0, rc1 = mean(0.0, "novel_recall"), mean(gamma, "novel_recall")
    frozen = all(runs[s].rpn_untouched for s in SEEDS)
    seconds = sum(runs[s].c7_seconds for s in SEEDS)
    ok = ap1 > ap0 and rc1 > rc0 and frozen and seconds < 600
    assert verdict(7, ok, f"novel AP50 {ap0:.3f}->{ap1:.3f}, recall@100 {rc0:.3f}->{rc1:.3f}, "
                          f"RPN frozen at gamma 0: {frozen}, {seconds:.0f}s")


def test_c8_refinement_ablation(runs, verdict):
    gamma = ExperimentConfig().train.gamma_rpn
    t3 = float(np.mean([runs[s].metrics[gamma]["novel_ap"] for s in SEEDS]))
    t1 = float(np.mean([runs[s].single_stage["novel_ap"] for s in SEEDS]))
    assert verdict(8, t3 > t1, f"novel AP[.50:1.0] T=3 {t3:.3f} vs T=1 {t1:.3f} ({len(SEEDS)} seeds)")


# ---------------------------------------------------------------- 9-11

def test_c9_loss_audit(verdict):
    from prlab import protocol as P
    from prlab.synth import substream

    cfg = ExperimentConfig()
    train = replace(cfg.train, base_iterations=100)
    work = experiment.make_workload(cfg)
    _, trace = base_train(train, work.split, work.train, work.features)
    det = P.init_detector(train, work.features, work.split.base_classes, 128, 128)
    pick = substream(train.seed, P._BASE_KEY)
    worst = 0.0
    for it, rec in enumerate(trace):
        scene = work.train[int(pick.integers(len(work.train)))]
        rb, sbs = P._Batch(), [P._Batch() for _ in det.cascade.stages]
        P._collect(det, scene, train, train.doubled_base, substream(train.seed, P._BASE_KEY, it, 0), rb, sbs)
        rpn_loss, _ = prop.rpn_loss_and_grad(det.rpn, *rb.arrays())
        total = rpn_loss.cls + rpn_loss.reg
        for (scfg, head), b in zip(det.cascade.stages, sbs):
            sl, _ = cas.stage_loss_and_grad(head, *b.arrays())
            total += scfg.lam * (sl.cls + sl.reg)
        worst = max(worst, abs(total - rec.total))
        det, _ = P.train_iteration(det, [scene], train, train.lr_base, 1.0, train.doubled_base,
                                   [substream(train.seed, P._BASE_KEY, it, 0)], "base", it)
    ok = len(trace) == 100 and worst < 1e-10
    assert verdict(9, ok, f"{len(trace)} iterations, max |recomputed - reported| {worst:.1e}")


def test_c10_parser_fixtures(tmp_path, verdict):
    voc = load_voc(FIX / "voc")
    coco = parse_coco_json((FIX / "coco" / "instances.json").read_bytes())
    fields_ok = (
        scene_fields(voc.scenes["000001"]) == (500.0, 375.0, [[48.0, 240.0, 195.0, 371.0],
                                                              [8.0, 12.0, 352.0, 375.0]],
                                               [0, 1], [False, False], "000001")
        and voc.scenes["000002"].ignore.tolist() == [False, True]
        and len(voc.scenes["000003"].boxes) == 0
        and coco.classes.names == ["person", "dog"]
        and scene_fields(coco.scenes["7"]) == (640.0, 480.0, [[10.0, 20.0, 40.5, 60.0],
                                                              [100.0, 100.0, 150.0, 180.0]],
                                               [1, 0], [False, True], "7")
    )
    out = tmp_path / "report.json"
    code = cli.main(["eval", "--gt", str(FIX / "eval3" / "gt.json"), "--format", "synthetic",
                     "--dets", str(FIX / "eval3" / "dets.json"), "--out", str(out)])
    rep = json.loads(out.read_text())
    ap_ok = code == 0 and rep["per_class_ap50"] == {"cat": 10 / 11, "dog": 6 / 11} and rep["map50"] == 8 / 11
    assert verdict(10, fields_ok and ap_ok,
                   f"fixtures field-exact: {fields_ok}; cat {rep['per_class_ap50']['cat']:.6f} (10/11), "
                   f"dog {rep['per_class_ap50']['dog']:.6f} (6/11)")


def test_c11_determinism(tmp_path, verdict):
    cfg = {"train": {"base_iterations": 60, "finetune_iterations": 30},
           "data": {"base_train_scenes": 30, "test_scenes": 10, "k": [1, 2, 3, 5]}}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    outs = []
    for i, threads in enumerate(("1", "1", "4")):
        out = tmp_path / f"run{i}"
        assert cli.main(["simulate", "--config", str(path), "--seed", "11", "--out", str(out),
                         "--threads", threads]) == 0
        outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    ok = outs[0] == outs[1] == outs[2] and len(outs[0]) == 6
    assert verdict(11, ok, f"{len(outs[0])} files byte-identical across 2 runs and threads 1 vs 4: {ok}")
