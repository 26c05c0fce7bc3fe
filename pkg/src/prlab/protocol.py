"""Two-phase training: full base training, then balanced K-shot fine-tuning.

One iteration forwards every head with the current parameters (RPN on all
anchors, proposals, then each cascade stage on the previous stage's regressed
boxes), collects the per-head batches and only then applies one SGD step to
each head. The reported total is ``gamma * RPN terms + sum_t lambda_t * stage
terms``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from prlab import cascade as cas
from prlab import proposals as prop
from prlab.evaluation import Detection, ap_11point, map_range, mean_ap, recall_at_k
from prlab.geometry import BBox
from prlab.synth import ClassSplit, FeatureModel, Scene, box_features, substream

PHASE_ORDER = ("init", "base", "novel")
_BASE_KEY, _TUNE_KEY, _EVAL_KEY = 0xBA5E, 0xF17E, 0xE7A1


@dataclass(frozen=True)
class TrainConfig:
    base_iterations: int = 1000
    finetune_iterations: int = 1200
    lr_base: float = 0.2
    lr_finetune: float = 0.1
    gamma_rpn: float = 0.5
    rpn_frozen: bool = False
    heads_trainable: tuple[int, ...] | None = None  # stage indices (0-based); None = all
    doubled_base: bool = False
    doubled_finetune: bool = True
    alphas: tuple[float, ...] = cas.DEFAULT_ALPHAS
    lambdas: tuple[float, ...] = cas.DEFAULT_LAMBDAS
    anchor_stride: float = 8.0
    anchor_scales: tuple[float, ...] = (16.0, 32.0, 64.0)
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    pos_thresh: float = 0.7
    neg_thresh: float = 0.3
    alpha_rpn: float = 0.5
    rpn_batch: int = 64
    rpn_pos_fraction: float = 0.5
    nms_thresh: float = 0.7
    pre_nms_topk: int = 600
    post_nms_count: int = 100
    add_gt_proposals: bool = False
    score_floor: float = 0.05
    det_nms_thresh: float = 0.5
    max_dets: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.lr_base < 0 or self.lr_finetune < 0:
            raise ValueError("learning rates must be non-negative")
        if self.gamma_rpn < 0:
            raise ValueError("gamma_rpn must be non-negative")
        if len(self.alphas) != len(self.lambdas) or not self.alphas:
            raise ValueError("alphas and lambdas must be non-empty and of equal length")
        if self.base_iterations < 0 or self.finetune_iterations < 0:
            raise ValueError("iteration counts must be non-negative")

    @property
    def stage_configs(self) -> list[cas.StageConfig]:
        return [cas.StageConfig(a, l) for a, l in zip(self.alphas, self.lambdas)]

    def single_stage(self) -> "TrainConfig":
        """The refinement-off variant: one stage, alpha 0.5, lambda 1."""
        return replace(self, alphas=(0.5,), lambdas=(1.0,))


@dataclass
class Detector:
    features: FeatureModel
    rpn: prop.RpnHead
    cascade: cas.Cascade
    grid: prop.AnchorGrid
    phase: str = "init"

    def copy(self) -> "Detector":
        return Detector(self.features, self.rpn.copy(), self.cascade.copy(), self.grid, self.phase)

    @property
    def classes(self) -> tuple[int, ...]:
        return self.cascade.classes

    def summary(self) -> dict:
        def norm(params):
            return {k: float(np.linalg.norm(v)) for k, v in params.items()}

        return {
            "phase": self.phase,
            "classes": list(self.classes),
            "num_anchors": len(self.grid),
            "feature_dim": self.features.feature_dim,
            "rpn_param_norms": norm(self.rpn.params()),
            "stages": [{"alpha": c.alpha, "lambda": c.lam, "param_norms": norm(h.params())}
                       for c, h in self.cascade.stages],
        }


def init_detector(cfg: TrainConfig, features: FeatureModel, classes: Sequence[int], width: float,
                  height: float) -> Detector:
    grid = prop.build_anchor_grid(width, height, cfg.anchor_stride, cfg.anchor_scales, cfg.anchor_ratios)
    rpn = prop.RpnHead.zeros(features.feature_dim, alpha_rpn=cfg.alpha_rpn, pos_thresh=cfg.pos_thresh,
                             neg_thresh=cfg.neg_thresh)
    return Detector(features, rpn, cas.Cascade.zeros(cfg.stage_configs, classes, features.feature_dim), grid)


@dataclass
class LossRecord:
    phase: str
    iteration: int
    rpn: prop.StepLoss
    stages: list[prop.StepLoss]
    total: float

    def row(self) -> dict:
        out = {"phase": self.phase, "iteration": self.iteration, "rpn_cls": self.rpn.cls,
               "rpn_reg": self.rpn.reg, "rpn_scale": self.rpn.scale}
        for t, s in enumerate(self.stages, 1):
            out[f"stage{t}_cls"] = s.cls
            out[f"stage{t}_reg"] = s.reg
            out[f"stage{t}_lambda"] = s.scale
        out["total"] = self.total
        return out


@dataclass
class _Batch:
    x: list[np.ndarray] = field(default_factory=list)
    y: list[np.ndarray] = field(default_factory=list)
    t: list[np.ndarray] = field(default_factory=list)

    def add(self, x, y, t):
        self.x.append(x)
        self.y.append(y)
        self.t.append(t)

    def arrays(self):
        return np.concatenate(self.x), np.concatenate(self.y), np.concatenate(self.t)


def _feature_fn(model: FeatureModel, scene: Scene, rng: np.random.Generator):
    return lambda boxes: box_features(model, scene, boxes, rng)


def _collect(det: Detector, scene: Scene, cfg: TrainConfig, doubled: bool, rng: np.random.Generator,
             rpn_batch: _Batch, stage_batches: list[_Batch]) -> None:
    grid = det.grid
    xa = box_features(det.features, scene, grid.anchors, rng)
    m = prop.match_anchors(grid.anchors, scene.boxes, det.rpn.pos_thresh, det.rpn.neg_thresh)
    idx = prop.sample_anchor_batch(m.labels, rng, cfg.rpn_batch, cfg.rpn_pos_fraction)
    rpn_batch.add(xa[idx], (m.labels[idx] == prop.POSITIVE).astype(np.float64), m.targets[idx])

    props = prop.generate_proposals(det.rpn, grid, xa, cfg.nms_thresh, cfg.pre_nms_topk,
                                    cfg.post_nms_count, doubled)
    boxes = props.boxes
    if cfg.add_gt_proposals and len(scene):
        boxes = np.vstack([boxes, scene.boxes])
    bounds = (scene.width, scene.height)
    # row lookup shifted by one so background (-1) and unknown classes map to row 0
    index = det.cascade.label_index()
    lut = np.zeros(max(max(index), int(scene.classes.max(initial=-1))) + 2, dtype=np.int64)
    for c, row in index.items():
        lut[c + 1] = row
    for (scfg, head), batch in zip(det.cascade.stages, stage_batches):
        x = box_features(det.features, scene, boxes, rng)
        lab = cas.assign_stage_labels(boxes, scene.boxes, scene.classes, scfg.alpha)
        y = lut[lab.classes + 1]
        batch.add(x, y, np.where((y > 0)[:, None], lab.targets, 0.0))
        boxes = cas.apply_regression(boxes, head.deltas(x), bounds)


def train_iteration(det: Detector, scenes: Sequence[Scene], cfg: TrainConfig, lr: float, gamma: float,
                    doubled: bool, rngs: Sequence[np.random.Generator], phase: str, iteration: int,
                    rpn_trainable: bool = True, heads_trainable: Sequence[int] | None = None
                    ) -> tuple[Detector, LossRecord]:
    """Forward every head on ``scenes`` with current weights, then step each head once.

    ``rngs`` holds one generator per scene; it drives feature noise and anchor
    sampling for that scene.
    """
    if len(rngs) != len(scenes):
        raise ValueError("need one generator per scene")
    rpn_batch = _Batch()
    stage_batches = [_Batch() for _ in det.cascade.stages]
    for scene, rng in zip(scenes, rngs):
        _collect(det, scene, cfg, doubled, rng, rpn_batch, stage_batches)
    x, y, t = rpn_batch.arrays()
    rpn_gamma = gamma if rpn_trainable else 0.0
    new_rpn, rpn_loss = prop.rpn_step(det.rpn, x, y, t, lr, rpn_gamma)
    new_stages = []
    stage_losses = []
    for s, ((scfg, head), batch) in enumerate(zip(det.cascade.stages, stage_batches)):
        x, y, t = batch.arrays()
        train = heads_trainable is None or s in heads_trainable
        new_head, loss = cas.stage_step(head, scfg, x, y, t, lr if train else 0.0)
        new_stages.append((scfg, new_head))
        stage_losses.append(loss)
    total = rpn_loss.total + sum(sl.total for sl in stage_losses)
    new = Detector(det.features, new_rpn, cas.Cascade(new_stages, det.cascade.classes), det.grid, det.phase)
    return new, LossRecord(phase, iteration, rpn_loss, stage_losses, total)


def base_train(cfg: TrainConfig, split: ClassSplit, dataset: Sequence[Scene], features: FeatureModel
               ) -> tuple[Detector, list[LossRecord]]:
    """Train RPN (gamma = 1) and all stages on base-class scenes only."""
    if not dataset:
        raise ValueError("empty base dataset")
    base = set(split.base_classes)
    for s in dataset:
        if not set(int(c) for c in s.classes) <= base:
            raise ValueError(f"scene {s.scene_id!r} contains non-base classes")
    det = init_detector(cfg, features, split.base_classes, dataset[0].width, dataset[0].height)
    # scene choice and per-iteration noise use separate streams, so runs that
    # differ only in head updates see the same data
    rng = substream(cfg.seed, _BASE_KEY)
    trace = []
    for it in range(cfg.base_iterations):
        scene = dataset[int(rng.integers(len(dataset)))]
        det, rec = train_iteration(det, [scene], cfg, cfg.lr_base, 1.0, cfg.doubled_base,
                                   [substream(cfg.seed, _BASE_KEY, it, 0)], "base", it)
        trace.append(rec)
    det.phase = "base"
    return det, trace


def widen(det: Detector, new_classes: Sequence[int]) -> Detector:
    """Append zero-initialised classifier rows for ``new_classes``."""
    extra = [c for c in new_classes if c not in det.classes]
    stages = [(c, h.widened(len(extra))) for c, h in det.cascade.stages]
    return Detector(det.features, det.rpn.copy(), cas.Cascade(stages, det.classes + tuple(extra)),
                    det.grid, det.phase)


def novel_finetune(det: Detector, cfg: TrainConfig, split: ClassSplit, shots: Sequence[Scene]
                   ) -> tuple[Detector, list[LossRecord]]:
    """Fine-tune a base detector on a balanced K-shot set.

    Each batch holds one scene with novel objects and one without (when both
    kinds exist). The RPN loss is scaled by ``gamma_rpn``; ``gamma_rpn = 0`` or
    ``rpn_frozen`` leaves the RPN untouched.
    """
    if det.phase != "base":
        raise ValueError(f"novel fine-tuning needs a base detector, got phase {det.phase!r}")
    if not shots:
        raise ValueError("empty K-shot set")
    det = widen(det, split.novel_classes)
    novel = set(split.novel_classes)
    novel_pool = [s for s in shots if novel & set(int(c) for c in s.classes)]
    base_pool = [s for s in shots if not novel & set(int(c) for c in s.classes)]
    pools = [p for p in (base_pool, novel_pool) if p]
    rng = substream(cfg.seed, _TUNE_KEY)
    trace = []
    for it in range(cfg.finetune_iterations):
        batch = [p[int(rng.integers(len(p)))] for p in pools]
        rngs = [substream(cfg.seed, _TUNE_KEY, it, j) for j in range(len(batch))]
        det, rec = train_iteration(det, batch, cfg, cfg.lr_finetune, cfg.gamma_rpn, cfg.doubled_finetune,
                                   rngs, "novel", it, rpn_trainable=not cfg.rpn_frozen,
                                   heads_trainable=cfg.heads_trainable)
        trace.append(rec)
    det.phase = "novel"
    return det, trace


@dataclass
class EvalPass:
    """Everything an evaluation pass over a scene list produces."""

    scenes: dict[str, Scene]
    proposals: dict[str, prop.ProposalSet]  # RPN output, annotated with max GT IoU
    snapshots: dict[str, list[prop.ProposalSet]]
    detections: list[Detection]

    def proposal_map(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        return {k: (p.boxes, p.scores) for k, p in self.proposals.items()}

    def stage_histogram(self, bins=None) -> cas.StageHistogram:
        hist = None
        for snaps in self.snapshots.values():
            h = cas.stage_iou_histogram(snaps, bins)
            hist = h if hist is None else hist + h
        return hist


def run_detector(det: Detector, scenes: Sequence[Scene], cfg: TrainConfig, seed: int) -> EvalPass:
    """Proposals, cascade snapshots and final detections for every scene."""
    out = EvalPass({}, {}, {}, [])
    for i, scene in enumerate(scenes):
        sid = scene.scene_id
        rng = substream(seed, _EVAL_KEY, i)
        xa = box_features(det.features, scene, det.grid.anchors, rng)
        props = prop.generate_proposals(det.rpn, det.grid, xa, cfg.nms_thresh, cfg.pre_nms_topk,
                                        cfg.post_nms_count, False, scene.boxes)
        res = cas.run_cascade(det.cascade, props, _feature_fn(det.features, scene, rng),
                              (scene.width, scene.height), scene.boxes, cfg.score_floor,
                              cfg.det_nms_thresh, cfg.max_dets)
        out.scenes[sid] = scene
        out.proposals[sid] = props
        out.snapshots[sid] = res.snapshots
        d = res.detections
        out.detections.extend(Detection(sid, int(c), BBox.from_array(b), float(s))
                              for b, c, s in zip(d.boxes, d.classes, d.scores))
    return out


def summarize(ev: EvalPass, split: ClassSplit, recall_k: int = 100, recall_iou: float = 0.7
              ) -> dict[str, float]:
    """Novel/base AP50, novel range AP and proposal recall@k at ``recall_iou``."""
    ap50 = ap_11point(ev.detections, ev.scenes, 0.5)
    novel_range, _ = map_range(ev.detections, ev.scenes, split.novel_classes)
    props = ev.proposal_map()
    out = {
        "novel_ap50": _nan(mean_ap(ap50, split.novel_classes)),
        "base_ap50": _nan(mean_ap(ap50, split.base_classes)),
        "novel_ap": _nan(novel_range),
    }
    for name, cls in (("novel_recall", split.novel_classes), ("all_recall", split.all_classes)):
        try:
            out[name] = recall_at_k(props, ev.scenes, recall_iou, recall_k, cls)
        except ValueError:
            out[name] = math.nan
    return out


def _nan(v):
    return math.nan if v is None else float(v)


def config_dict(cfg: TrainConfig) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg).items()}
