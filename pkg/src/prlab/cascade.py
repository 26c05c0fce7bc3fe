"""Sequential refinement stages with ascending IoU thresholds.

Stage ``t`` owns a softmax classifier over ``background + classes`` and a
class-agnostic linear box regressor, both reading the feature extracted at the
box it receives. Each stage regresses the boxes handed over by the previous
one, so the final regression is the composition of all stage regressors.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from typing import Callable, NamedTuple, Sequence

import numpy as np

from prlab.geometry import clip_boxes, decode_deltas, encode_deltas, iou_matrix
from prlab.proposals import ProposalSet, StepLoss, nms, smooth_l1, smooth_l1_grad

FeatureFn = Callable[[np.ndarray], np.ndarray]

DEFAULT_ALPHAS = (0.5, 0.6, 0.7)
DEFAULT_LAMBDAS = (1.0, 0.5, 0.25)
HIGH_QUALITY_IOU = 0.75
POSITIVE_ROI_IOU = 0.4
MIN_BOX_SIDE = 1e-3


@dataclass(frozen=True)
class StageConfig:
    alpha: float
    lam: float

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")


@dataclass
class StageHead:
    """``w_cls`` row 0 is background; row ``i + 1`` is the i-th detector class."""

    w_cls: np.ndarray
    b_cls: np.ndarray
    w_reg: np.ndarray
    b_reg: np.ndarray

    def __post_init__(self):
        self.w_cls = np.asarray(self.w_cls, dtype=np.float64)
        self.b_cls = np.asarray(self.b_cls, dtype=np.float64)
        self.w_reg = np.asarray(self.w_reg, dtype=np.float64)
        self.b_reg = np.asarray(self.b_reg, dtype=np.float64)
        k, f = self.w_cls.shape
        if self.b_cls.shape != (k,) or self.w_reg.shape != (4, f) or self.b_reg.shape != (4,):
            raise ValueError("inconsistent stage head shapes")

    @classmethod
    def zeros(cls, num_classes: int, feature_dim: int) -> "StageHead":
        return cls(np.zeros((num_classes + 1, feature_dim)), np.zeros(num_classes + 1),
                   np.zeros((4, feature_dim)), np.zeros(4))

    @property
    def num_classes(self) -> int:
        return self.w_cls.shape[0] - 1

    def copy(self) -> "StageHead":
        return StageHead(self.w_cls.copy(), self.b_cls.copy(), self.w_reg.copy(), self.b_reg.copy())

    def params(self) -> dict[str, np.ndarray]:
        return {"w_cls": self.w_cls, "b_cls": self.b_cls, "w_reg": self.w_reg, "b_reg": self.b_reg}

    def equal(self, other: "StageHead") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.params().values(), other.params().values()))

    def widened(self, extra: int) -> "StageHead":
        """Append ``extra`` zero-initialised class rows."""
        f = self.w_cls.shape[1]
        return StageHead(np.vstack([self.w_cls, np.zeros((extra, f))]),
                         np.concatenate([self.b_cls, np.zeros(extra)]),
                         self.w_reg.copy(), self.b_reg.copy())

    def logits(self, x: np.ndarray) -> np.ndarray:
        return x @ self.w_cls.T + self.b_cls

    def deltas(self, x: np.ndarray) -> np.ndarray:
        return x @ self.w_reg.T + self.b_reg


@dataclass
class Cascade:
    stages: list[tuple[StageConfig, StageHead]]
    classes: tuple[int, ...]

    def __post_init__(self):
        if not self.stages:
            raise ValueError("a cascade needs at least one stage")
        alphas = [cfg.alpha for cfg, _ in self.stages]
        if any(b <= a for a, b in zip(alphas, alphas[1:])):
            raise ValueError(f"stage IoU thresholds must strictly increase, got {alphas}")
        for _, head in self.stages:
            if head.num_classes != len(self.classes):
                raise ValueError("stage head width does not match the class list")

    @classmethod
    def zeros(cls, configs: Sequence[StageConfig], classes: Sequence[int], feature_dim: int) -> "Cascade":
        return cls([(c, StageHead.zeros(len(classes), feature_dim)) for c in configs], tuple(classes))

    def __len__(self) -> int:
        return len(self.stages)

    def copy(self) -> "Cascade":
        return Cascade([(c, h.copy()) for c, h in self.stages], self.classes)

    def label_index(self) -> dict[int, int]:
        return {c: i + 1 for i, c in enumerate(self.classes)}

    def sub(self, start: int, stop: int | None = None) -> "Cascade":
        return replace(self, stages=self.stages[start:stop])


class StageLabels(NamedTuple):
    gt_index: np.ndarray  # -1 for background
    classes: np.ndarray  # class id, -1 for background
    targets: np.ndarray  # (N, 4); zero rows for background


def assign_stage_labels(boxes, gt_boxes, gt_classes, alpha: float) -> StageLabels:
    """Foreground = max GT IoU >= alpha, labelled with that GT (lowest index on ties)."""
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must lie in [0, 1]")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n = len(boxes)
    gt_index = np.full(n, -1, dtype=np.int64)
    classes = np.full(n, -1, dtype=np.int64)
    targets = np.zeros((n, 4))
    if n == 0 or len(gt_boxes) == 0:
        return StageLabels(gt_index, classes, targets)
    ious = iou_matrix(boxes, gt_boxes)
    best = np.argmax(ious, axis=1)
    fg = (ious[np.arange(n), best] >= alpha) & (ious[np.arange(n), best] > 0)
    gt_index[fg] = best[fg]
    classes[fg] = np.asarray(gt_classes, dtype=np.int64)[best[fg]]
    if fg.any():
        targets[fg] = encode_deltas(boxes[fg], gt_boxes[best[fg]])
    return StageLabels(gt_index, classes, targets)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def stage_loss_and_grad(head: StageHead, features, labels, targets, weights=None):
    """Mean cross-entropy over the batch plus smooth-L1 averaged over foreground.

    ``labels`` are row indices of ``w_cls`` (0 = background). Returns
    ``(StepLoss(cls, reg, 1.0), grads)``.
    """
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    s = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    z = head.logits(x)
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    loss_cls = float(np.sum(s * (lse - z[np.arange(n), labels])) / n)
    dz = softmax(z)
    dz[np.arange(n), labels] -= 1.0
    dz *= (s / n)[:, None]
    grads = {"w_cls": dz.T @ x, "b_cls": dz.sum(axis=0)}
    fg = labels > 0
    n_fg = int(fg.sum())
    if n_fg:
        xf = x[fg]
        r = head.deltas(xf) - np.asarray(targets, dtype=np.float64)[fg]
        sf = s[fg][:, None]
        loss_reg = float(np.sum(sf * smooth_l1(r)) / n_fg)
        dr = sf * smooth_l1_grad(r) / n_fg
        grads["w_reg"] = dr.T @ xf
        grads["b_reg"] = dr.sum(axis=0)
    else:
        loss_reg = 0.0
        grads["w_reg"] = np.zeros_like(head.w_reg)
        grads["b_reg"] = np.zeros_like(head.b_reg)
    return StepLoss(loss_cls, loss_reg, 1.0), grads


def stage_step(head: StageHead, cfg: StageConfig, features, labels, targets, lr: float,
               weights=None, train_cls: bool = True, train_reg: bool = True) -> tuple[StageHead, StepLoss]:
    """One SGD step on ``lambda * (L_cls + L_reg)``; returns a new head."""
    if lr < 0:
        raise ValueError("lr must be non-negative")
    if len(labels) == 0:
        return head.copy(), StepLoss(0.0, 0.0, cfg.lam)
    loss, grads = stage_loss_and_grad(head, features, labels, targets, weights)
    loss = loss._replace(scale=cfg.lam)
    new = head.copy()
    step = lr * cfg.lam
    if step != 0.0:
        if train_cls:
            new.w_cls = head.w_cls - step * grads["w_cls"]
            new.b_cls = head.b_cls - step * grads["b_cls"]
        if train_reg:
            new.w_reg = head.w_reg - step * grads["w_reg"]
            new.b_reg = head.b_reg - step * grads["b_reg"]
    return new, loss


def apply_regression(boxes, deltas, bounds) -> np.ndarray:
    """Decode and clip; rows that collapse below :data:`MIN_BOX_SIDE` keep their input box."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    out = clip_boxes(decode_deltas(boxes, deltas), bounds[0], bounds[1])
    bad = ((out[:, 2] - out[:, 0]) < MIN_BOX_SIDE) | ((out[:, 3] - out[:, 1]) < MIN_BOX_SIDE)
    out[bad] = boxes[bad]
    return out


def stage_forward(head: StageHead, boxes, features, bounds) -> tuple[np.ndarray, np.ndarray]:
    """Class probabilities at ``boxes`` and the regressed boxes."""
    x = np.asarray(features, dtype=np.float64)
    return softmax(head.logits(x)), apply_regression(boxes, head.deltas(x), bounds)


def refine(head: StageHead, proposals: ProposalSet, feature_fn: FeatureFn, bounds, gt_boxes=None,
           stage: int = 1) -> ProposalSet:
    """Re-extract features at each box, regress, clip; never drops a proposal.

    Output scores are ``1 - P(background)``.
    """
    if len(proposals) == 0:
        return ProposalSet(proposals.boxes, proposals.scores, stage=stage)
    probs, boxes = stage_forward(head, proposals.boxes, feature_fn(proposals.boxes), bounds)
    out = ProposalSet(boxes, 1.0 - probs[:, 0], stage=stage)
    return out.annotated(gt_boxes) if gt_boxes is not None else out


class Detections(NamedTuple):
    boxes: np.ndarray
    classes: np.ndarray
    scores: np.ndarray

    @classmethod
    def empty(cls) -> "Detections":
        return cls(np.zeros((0, 4)), np.zeros(0, dtype=np.int64), np.zeros(0))


class CascadeOutput(NamedTuple):
    snapshots: list[ProposalSet]  # snapshots[t] enters stage t + 1; the last is the final output
    detections: Detections


def detections_from_probs(probs, boxes, classes: Sequence[int], score_floor: float = 0.05,
                          nms_thresh: float = 0.5, max_dets: int = 100) -> Detections:
    """Per-class thresholding and NMS, then the ``max_dets`` best overall."""
    out_boxes, out_cls, out_scores = [], [], []
    for i, cls in enumerate(classes):
        sc = probs[:, i + 1]
        idx = np.flatnonzero(sc > score_floor)
        if not len(idx):
            continue
        keep = idx[nms(boxes[idx], sc[idx], nms_thresh)]
        out_boxes.append(boxes[keep])
        out_cls.append(np.full(len(keep), cls, dtype=np.int64))
        out_scores.append(sc[keep])
    if not out_scores:
        return Detections.empty()
    b, c, s = np.concatenate(out_boxes), np.concatenate(out_cls), np.concatenate(out_scores)
    order = np.argsort(-s, kind="stable")[:max_dets]
    return Detections(b[order], c[order], s[order])


def run_cascade(cascade: Cascade, proposals: ProposalSet, feature_fn: FeatureFn, bounds,
                gt_boxes=None, score_floor: float = 0.05, nms_thresh: float = 0.5,
                max_dets: int = 100, first_stage: int = 1) -> CascadeOutput:
    """Push proposals through every stage in order.

    Final detections take class scores from the last stage's classifier and
    boxes from its regressor. ``first_stage`` only numbers the snapshots, so a
    cascade can be run in pieces.
    """
    current = proposals.annotated(gt_boxes) if gt_boxes is not None else proposals
    snapshots = [current]
    probs = None
    for t, (_, head) in enumerate(cascade.stages):
        if len(current) == 0:
            snapshots.append(current)
            continue
        probs, boxes = stage_forward(head, current.boxes, feature_fn(current.boxes), bounds)
        current = ProposalSet(boxes, 1.0 - probs[:, 0], stage=first_stage + t)
        if gt_boxes is not None:
            current = current.annotated(gt_boxes)
        snapshots.append(current)
    if probs is None:
        return CascadeOutput(snapshots, Detections.empty())
    dets = detections_from_probs(probs, current.boxes, cascade.classes, score_floor, nms_thresh, max_dets)
    return CascadeOutput(snapshots, dets)


@dataclass
class StageHistogram:
    """Counts of positive RoIs (max GT IoU >= 0.4) per snapshot and IoU bin.

    Row ``t`` (1-based in :meth:`rows`) describes the RoIs entering stage ``t``;
    the last row is the cascade output.
    """

    edges: np.ndarray
    counts: np.ndarray  # (num_snapshots, num_bins)
    n_high: np.ndarray  # per snapshot, RoIs with IoU >= 0.75
    n_positive: np.ndarray  # per snapshot, RoIs with IoU >= 0.4

    @property
    def share_ge_075(self) -> np.ndarray:
        out = np.zeros(len(self.n_positive))
        np.divide(self.n_high, self.n_positive, out=out, where=self.n_positive > 0)
        return out

    def __add__(self, other: "StageHistogram") -> "StageHistogram":
        if not np.array_equal(self.edges, other.edges):
            raise ValueError("histograms use different bins")
        return StageHistogram(self.edges, self.counts + other.counts,
                              self.n_high + other.n_high, self.n_positive + other.n_positive)

    def rows(self) -> list[tuple[int, float, float, int, float]]:
        share = self.share_ge_075
        return [
            (s + 1, float(self.edges[b]), float(self.edges[b + 1]), int(self.counts[s, b]), float(share[s]))
            for s in range(self.counts.shape[0]) for b in range(self.counts.shape[1])
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage", "bin_lo", "bin_hi", "count", "share_ge_075"])
        w.writerows(self.rows())
        return buf.getvalue()


def default_bins() -> np.ndarray:
    return np.round(np.linspace(0.0, 1.0, 11), 10)


def stage_iou_histogram(snapshots: Sequence[ProposalSet] | Sequence[np.ndarray], bins=None) -> StageHistogram:
    """Histogram the max GT IoU of positive RoIs in every snapshot.

    ``bins`` are edges partitioning [0, 1]; the last bin is closed.
    """
    edges = default_bins() if bins is None else np.asarray(bins, dtype=np.float64)
    if edges[0] != 0.0 or edges[-1] != 1.0 or np.any(np.diff(edges) <= 0):
        raise ValueError("bins must be increasing edges from 0 to 1")
    counts = np.zeros((len(snapshots), len(edges) - 1), dtype=np.int64)
    n_high = np.zeros(len(snapshots), dtype=np.int64)
    n_pos = np.zeros(len(snapshots), dtype=np.int64)
    for s, snap in enumerate(snapshots):
        v = snap.max_gt_iou if isinstance(snap, ProposalSet) else np.asarray(snap, dtype=np.float64)
        v = v[v >= POSITIVE_ROI_IOU]
        counts[s] = np.histogram(v, bins=edges)[0]
        n_high[s] = int(np.sum(v >= HIGH_QUALITY_IOU))
        n_pos[s] = len(v)
    return StageHistogram(edges, counts, n_high, n_pos)
