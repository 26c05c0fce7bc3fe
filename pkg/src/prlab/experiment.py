"""End-to-end runs on synthetic scenes: one simulation and the ablation grid.

Every random draw derives from the experiment seed, so results do not depend
on how many worker processes execute the independent pieces.
"""
from __future__ import annotations

import csv
import io
import json
import math
import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from prlab import cascade as cas
from prlab.config import ExperimentConfig
from prlab.evaluation import EvalReport, ImbalanceReport, evaluate, imbalance_report, recall_at_k
from prlab.protocol import (Detector, EvalPass, LossRecord, TrainConfig, base_train, novel_finetune,
                            run_detector)
from prlab.synth import ClassSplit, FeatureModel, Scene, generate_dataset, make_feature_model, sample_k_shot

ABLATION_METRICS = ("novel_ap50", "base_ap50", "novel_ap", "novel_recall")

# dataset streams: 0 base training, 1 test sets, 2 the K-shot pool
_TRAIN_STREAM, _TEST_STREAM, _POOL_STREAM = 0, 1, 2


def worker_count(requested: int | None = None) -> int:
    """Parallelism degree: ``requested`` (default: CPU count), capped by ``PRLAB_THREADS``."""
    raw = os.environ.get("PRLAB_THREADS", "").strip()
    cap = None
    if raw:
        try:
            cap = int(raw)
        except ValueError:
            raise ValueError(f"PRLAB_THREADS must be an integer, got {raw!r}") from None
        if cap < 1:
            raise ValueError("PRLAB_THREADS must be >= 1")
    if requested is None:
        requested = cap if cap is not None else os.cpu_count() or 1
    if requested < 1:
        raise ValueError("worker count must be >= 1")
    return requested if cap is None else min(requested, cap)


def parallel_map(fn: Callable, items: Sequence, workers: int) -> list:
    """Ordered map, in-process for one worker or one item."""
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    ctx = multiprocessing.get_context("fork")
    with ProcessPoolExecutor(max_workers=min(workers, len(items)), mp_context=ctx) as pool:
        return list(pool.map(fn, items))


@dataclass
class Workload:
    """All scenes one seed needs."""

    split: ClassSplit
    features: FeatureModel
    train: list[Scene]
    pool: list[Scene]
    base_test: list[Scene]
    novel_test: list[Scene]
    balanced_test: list[Scene]

    def shots(self, k: int, seed: int) -> list[Scene]:
        return sample_k_shot(self.pool, self.split, k, seed)


def make_workload(cfg: ExperimentConfig) -> Workload:
    sc, split, data = cfg.synth, cfg.split, cfg.data
    return Workload(
        split,
        make_feature_model(sc, split),
        generate_dataset(sc, split, data.base_train_scenes, "base", _TRAIN_STREAM),
        generate_dataset(sc, split, data.shot_pool_scenes, "balanced", _POOL_STREAM),
        generate_dataset(sc, split, data.test_scenes, "base", _TEST_STREAM),
        generate_dataset(sc, split, data.test_scenes, "novel", _TEST_STREAM),
        generate_dataset(sc, split, data.test_scenes, "balanced", _TEST_STREAM),
    )


def report_for(ev: EvalPass, cfg: ExperimentConfig) -> EvalReport:
    """Detection metrics with base/novel groups plus RPN proposal recall."""
    split, ec = cfg.split, cfg.eval
    names = {c: f"c{c}" for c in split.all_classes}
    rep = evaluate(ev.detections, ev.scenes, names, ec.iou, ec.range, ec.recall_k,
                   groups={"base": split.base_classes, "novel": split.novel_classes},
                   interpolation=ec.interpolation)
    props = ev.proposal_map()
    for suffix, cls in (("", None), ("_base", split.base_classes), ("_novel", split.novel_classes)):
        try:
            val = recall_at_k(props, ev.scenes, ec.recall_iou, ec.recall_k, cls)
        except ValueError:
            val = math.nan
        rep.recall[f"rpn_recall@{ec.recall_k}{suffix}"] = val
    return rep


def ablation_metrics(rep: EvalReport, cfg: ExperimentConfig) -> dict[str, float]:
    def num(v):
        return math.nan if v is None else float(v)

    return {
        "novel_ap50": num(rep.groups["novel"]["map50"]),
        "base_ap50": num(rep.groups["base"]["map50"]),
        "novel_ap": num(rep.groups["novel"].get("map_range")),
        "novel_recall": rep.recall[f"rpn_recall@{cfg.eval.recall_k}_novel"],
    }


# ---------------------------------------------------------------- simulation

@dataclass
class FinetuneRun:
    k: int
    detector: Detector
    trace: list[LossRecord]
    report: EvalReport
    novel_hist: cas.StageHistogram


@dataclass
class SimulationResult:
    config: ExperimentConfig
    base_detector: Detector
    base_trace: list[LossRecord]
    base_hist: cas.StageHistogram
    imbalance: ImbalanceReport
    runs: list[FinetuneRun]

    def losses_csv(self) -> str:
        rows = [dict(k="", **r.row()) for r in self.base_trace]
        for run in self.runs:
            rows.extend(dict(k=run.k, **r.row()) for r in run.trace)
        return _csv(rows)

    def stage_hist_csv(self) -> str:
        rows = []
        named = [("base", self.base_hist)] + [(f"novel_k{r.k}", r.novel_hist) for r in self.runs]
        for name, hist in named:
            for stage, lo, hi, count, share in hist.rows():
                rows.append({"run": name, "stage": stage, "bin_lo": lo, "bin_hi": hi, "count": count,
                             "share_ge_075": share})
        return _csv(rows)

    def eval_json(self) -> str:
        doc = {"reports": [dict(k=r.k, **r.report.to_dict(include_trace=False)) for r in self.runs]}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def detector_json(self) -> str:
        doc = {"base": self.base_detector.summary(),
               "finetuned": [dict(k=r.k, **r.detector.summary()) for r in self.runs]}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def artifacts(self) -> dict[str, str]:
        return {
            "config.resolved.json": self.config.to_json(),
            "losses.csv": self.losses_csv(),
            "eval.json": self.eval_json(),
            "stage_hist.csv": self.stage_hist_csv(),
            "imbalance.csv": self.imbalance.to_csv(),
            "detector.json": self.detector_json(),
        }


def _csv(rows: list[dict]) -> str:
    fields: list[str] = []
    for r in rows:
        fields.extend(k for k in r if k not in fields)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n", restval="")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def _finetune_job(args) -> FinetuneRun:
    cfg, work, det, k = args
    shots = work.shots(k, cfg.seed)
    tuned, trace = novel_finetune(det, cfg.train, work.split, shots)
    ev = run_detector(tuned, work.balanced_test, cfg.train, cfg.seed)
    novel = run_detector(tuned, work.novel_test, cfg.train, cfg.seed)
    return FinetuneRun(k, tuned, trace, report_for(ev, cfg), novel.stage_histogram())


def run_simulation(cfg: ExperimentConfig, workers: int | None = None) -> SimulationResult:
    """Base training, then one balanced fine-tune per K in ``cfg.data.k``.

    The imbalance report compares base-detector proposals on base-only and
    novel-only test scenes, which is the frozen-RPN regime.
    """
    work = make_workload(cfg)
    det, trace = base_train(cfg.train, work.split, work.train, work.features)
    base_pass = run_detector(det, work.base_test, cfg.train, cfg.seed)
    novel_pass = run_detector(det, work.novel_test, cfg.train, cfg.seed)
    imb = imbalance_report(list(base_pass.proposals.values()), list(novel_pass.proposals.values()))
    runs = parallel_map(_finetune_job, [(cfg, work, det, k) for k in cfg.data.k], worker_count(workers))
    return SimulationResult(cfg, det, trace, base_pass.stage_histogram(), imb, runs)


# ---------------------------------------------------------------- ablation

@dataclass(frozen=True)
class Cell:
    gamma_rpn: float
    refine: bool
    k: int
    seed: int


def cell_train_config(cfg: ExperimentConfig, cell: Cell) -> TrainConfig:
    train = replace(cfg.train, gamma_rpn=cell.gamma_rpn, seed=cell.seed)
    return train if cell.refine else train.single_stage()


def _base_job(args) -> Detector:
    cfg, refine = args
    work = make_workload(cfg)
    train = cfg.train if refine else cfg.train.single_stage()
    return base_train(train, work.split, work.train, work.features)[0]


def _cell_job(args) -> dict:
    cfg, cell, det = args
    work = make_workload(cfg)
    train = cell_train_config(cfg, cell)
    tuned, _ = novel_finetune(det, train, work.split, work.shots(cell.k, cell.seed))
    ev = run_detector(tuned, work.balanced_test, train, cell.seed)
    return ablation_metrics(report_for(ev, cfg), cfg)


def run_ablation(cfg: ExperimentConfig, workers: int | None = None) -> list[dict]:
    """Detail rows for every (gamma, refinement, K, seed) cell, then one
    aggregate row per (gamma, refinement, K) with mean and population std.

    Base training depends only on (refinement, seed) and is shared by the
    cells that need it.
    """
    ab = cfg.ablation
    n = worker_count(workers)
    seeded = {s: cfg.with_seed(s) for s in ab.seeds}
    base_keys = [(r, s) for r in ab.refine for s in ab.seeds]
    bases = dict(zip(base_keys, parallel_map(_base_job, [(seeded[s], r) for r, s in base_keys], n)))
    cells = [Cell(float(g), bool(r), int(k), int(s))
             for g in ab.gammas for r in ab.refine for k in ab.k for s in ab.seeds]
    metrics = parallel_map(_cell_job, [(seeded[c.seed], c, bases[(c.refine, c.seed)]) for c in cells], n)

    rows = []
    for c, m in zip(cells, metrics):
        rows.append({"kind": "detail", "gamma_rpn": c.gamma_rpn, "refine": c.refine, "k": c.k,
                     "seed": c.seed, "n_seeds": 1, **m})
    for g in ab.gammas:
        for r in ab.refine:
            for k in ab.k:
                group = [row for row in rows[:len(cells)]
                         if row["gamma_rpn"] == float(g) and row["refine"] == bool(r) and row["k"] == int(k)]
                agg = {"kind": "aggregate", "gamma_rpn": float(g), "refine": bool(r), "k": int(k),
                       "seed": "", "n_seeds": len(group)}
                for name in ABLATION_METRICS:
                    vals = np.array([row[name] for row in group], dtype=np.float64)
                    agg[name] = float(np.mean(vals))
                    agg[f"{name}_std"] = float(np.std(vals))
                rows.append(agg)
    return rows


def ablation_csv(rows: list[dict]) -> str:
    fields = ["kind", "gamma_rpn", "refine", "k", "seed", "n_seeds"]
    for m in ABLATION_METRICS:
        fields += [m, f"{m}_std"]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n", restval="")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def ablation_json(rows: list[dict]) -> str:
    def clean(v):
        return None if isinstance(v, float) and math.isnan(v) else v

    return json.dumps({"rows": [{k: clean(v) for k, v in r.items()} for r in rows]}, indent=2) + "\n"
