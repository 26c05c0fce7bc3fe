"""Anchors, anchor matching, the linear RPN head, NMS and proposal generation."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from prlab import _kernels
from prlab.geometry import BBox, box_areas, clip_boxes, decode_deltas, encode_deltas, iou_matrix

SMOOTH_L1_BETA = 1.0

# anchor labels
NEGATIVE = 0
POSITIVE = 1
IGNORE = -1


@dataclass(frozen=True)
class AnchorGrid:
    width: float
    height: float
    stride: float
    scales: tuple[float, ...]
    ratios: tuple[float, ...]
    anchors: np.ndarray

    def __len__(self) -> int:
        return len(self.anchors)


def build_anchor_grid(width, height, stride, scales: Sequence[float], ratios: Sequence[float]) -> AnchorGrid:
    """Anchors centred at ``stride/2 + i*stride``, clipped to the scene.

    Order is row-major over positions, then scale, then ratio. A ratio ``r``
    gives ``w = s*sqrt(r)``, ``h = s/sqrt(r)`` (area preserved).
    """
    if stride <= 0:
        raise ValueError("stride must be positive")
    if not scales or not ratios:
        raise ValueError("scales and ratios must be non-empty")
    nx = max(int(width // stride), 1)
    ny = max(int(height // stride), 1)
    cx = stride / 2 + stride * np.arange(nx)
    cy = stride / 2 + stride * np.arange(ny)
    shapes = np.array([(s * np.sqrt(r), s / np.sqrt(r)) for s in scales for r in ratios])
    yy, xx = np.meshgrid(cy, cx, indexing="ij")
    centers = np.stack([xx.ravel(), yy.ravel()], axis=1)
    c = np.repeat(centers, len(shapes), axis=0)
    wh = np.tile(shapes, (len(centers), 1))
    anchors = np.concatenate([c - wh / 2, c + wh / 2], axis=1)
    anchors = clip_boxes(anchors, width, height)
    return AnchorGrid(float(width), float(height), float(stride), tuple(map(float, scales)),
                      tuple(map(float, ratios)), anchors)


class AnchorMatch(NamedTuple):
    labels: np.ndarray  # POSITIVE / NEGATIVE / IGNORE
    matched_gt: np.ndarray  # gt index for positives, -1 otherwise
    targets: np.ndarray  # (A, 4) deltas, zero rows for non-positives
    max_iou: np.ndarray


def match_anchors(anchors, gt_boxes, pos_thresh: float = 0.7, neg_thresh: float = 0.3) -> AnchorMatch:
    if not 0 <= neg_thresh < pos_thresh <= 1:
        raise ValueError("need 0 <= neg_thresh < pos_thresh <= 1")
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    a = len(anchors)
    labels = np.full(a, IGNORE, dtype=np.int64)
    matched = np.full(a, -1, dtype=np.int64)
    targets = np.zeros((a, 4))
    if len(gt_boxes) == 0:
        labels[:] = NEGATIVE
        return AnchorMatch(labels, matched, targets, np.zeros(a))
    ious = iou_matrix(anchors, gt_boxes)
    best_gt = np.argmax(ious, axis=1)
    max_iou = ious[np.arange(a), best_gt]
    labels[max_iou < neg_thresh] = NEGATIVE
    pos = max_iou >= pos_thresh
    labels[pos] = POSITIVE
    matched[pos] = best_gt[pos]
    # forced match: every reachable GT claims its best anchor not already claimed
    # by a lower GT index (anchor ties go to the lower anchor index)
    forced = np.zeros(a, dtype=bool)
    for g in range(len(gt_boxes)):
        col = ious[:, g]
        for ai in np.argsort(-col, kind="stable"):
            if col[ai] <= 0:
                break
            if not forced[ai]:
                forced[ai] = True
                labels[ai] = POSITIVE
                matched[ai] = g
                break
    sel = labels == POSITIVE
    if sel.any():
        targets[sel] = encode_deltas(anchors[sel], gt_boxes[matched[sel]])
    return AnchorMatch(labels, matched, targets, max_iou)


def sample_anchor_batch(labels, rng: np.random.Generator, batch_size: int = 64,
                        pos_fraction: float = 0.5) -> np.ndarray:
    """Indices of a batch with at most ``pos_fraction`` positives, padded with negatives."""
    pos = np.flatnonzero(labels == POSITIVE)
    neg = np.flatnonzero(labels == NEGATIVE)
    n_pos = min(len(pos), int(batch_size * pos_fraction))
    n_neg = min(len(neg), batch_size - n_pos)
    pick_pos = rng.choice(pos, size=n_pos, replace=False) if n_pos else pos[:0]
    pick_neg = rng.choice(neg, size=n_neg, replace=False) if n_neg else neg[:0]
    return np.concatenate([pick_pos, pick_neg]).astype(np.int64)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return np.exp(-np.logaddexp(0.0, -z))


def smooth_l1(r, beta: float = SMOOTH_L1_BETA):
    a = np.abs(r)
    return np.where(a < beta, 0.5 * r * r / beta, a - 0.5 * beta)


def smooth_l1_grad(r, beta: float = SMOOTH_L1_BETA):
    return np.clip(r / beta, -1.0, 1.0)


class StepLoss(NamedTuple):
    """Unscaled classification/regression terms and the multiplier applied."""

    cls: float
    reg: float
    scale: float

    @property
    def total(self) -> float:
        return self.scale * (self.cls + self.reg)


@dataclass
class RpnHead:
    w_obj: np.ndarray
    b_obj: float
    w_reg: np.ndarray  # (4, F)
    b_reg: np.ndarray  # (4,)
    alpha_rpn: float = 0.5
    pos_thresh: float = 0.7
    neg_thresh: float = 0.3

    def __post_init__(self):
        self.w_obj = np.asarray(self.w_obj, dtype=np.float64)
        self.b_obj = float(self.b_obj)
        self.w_reg = np.asarray(self.w_reg, dtype=np.float64)
        self.b_reg = np.asarray(self.b_reg, dtype=np.float64)
        if self.w_reg.shape != (4, self.w_obj.shape[0]) or self.b_reg.shape != (4,):
            raise ValueError("inconsistent RPN weight shapes")
        if not 0 <= self.neg_thresh < self.pos_thresh <= 1:
            raise ValueError("need 0 <= neg_thresh < pos_thresh <= 1")

    @classmethod
    def zeros(cls, feature_dim: int, **kw) -> "RpnHead":
        return cls(np.zeros(feature_dim), 0.0, np.zeros((4, feature_dim)), np.zeros(4), **kw)

    @property
    def feature_dim(self) -> int:
        return self.w_obj.shape[0]

    def copy(self) -> "RpnHead":
        return replace(self, w_obj=self.w_obj.copy(), w_reg=self.w_reg.copy(), b_reg=self.b_reg.copy())

    def params(self) -> dict[str, np.ndarray]:
        return {"w_obj": self.w_obj, "b_obj": np.array([self.b_obj]), "w_reg": self.w_reg,
                "b_reg": self.b_reg}

    def equal(self, other: "RpnHead") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.params().values(), other.params().values()))


def rpn_forward(head: RpnHead, features) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != head.feature_dim:
        raise ValueError(f"feature width {x.shape[-1]} does not match head ({head.feature_dim})")
    return sigmoid(x @ head.w_obj + head.b_obj), x @ head.w_reg.T + head.b_reg


def rpn_loss_and_grad(head: RpnHead, features, labels, targets, weights=None):
    """Mean BCE over the batch plus smooth-L1 averaged over positives.

    ``labels`` are 1/0; ``weights`` optionally rescales each anchor's terms.
    Returns ``(StepLoss(cls, reg, 1.0), grads)`` with grads keyed like
    :meth:`RpnHead.params`.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    n = len(y)
    s = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    z = x @ head.w_obj + head.b_obj
    bce = np.logaddexp(0.0, z) - y * z
    loss_cls = float(np.sum(s * bce) / n)
    dz = s * (sigmoid(z) - y) / n
    grads = {"w_obj": dz @ x, "b_obj": np.array([dz.sum()])}
    pos = y > 0.5
    n_pos = int(pos.sum())
    if n_pos:
        xp = x[pos]
        r = xp @ head.w_reg.T + head.b_reg - np.asarray(targets, dtype=np.float64)[pos]
        sp = s[pos][:, None]
        loss_reg = float(np.sum(sp * smooth_l1(r)) / n_pos)
        dr = sp * smooth_l1_grad(r) / n_pos
        grads["w_reg"] = dr.T @ xp
        grads["b_reg"] = dr.sum(axis=0)
    else:
        loss_reg = 0.0
        grads["w_reg"] = np.zeros_like(head.w_reg)
        grads["b_reg"] = np.zeros_like(head.b_reg)
    return StepLoss(loss_cls, loss_reg, 1.0), grads


def rpn_step(head: RpnHead, features, labels, targets, lr: float, gamma_rpn: float = 1.0,
             weights=None) -> tuple[RpnHead, StepLoss]:
    """One SGD step on ``gamma_rpn * (L_cls + L_reg)``; returns a new head."""
    if lr < 0 or gamma_rpn < 0:
        raise ValueError("lr and gamma_rpn must be non-negative")
    if len(labels) == 0:
        return head.copy(), StepLoss(0.0, 0.0, gamma_rpn)
    loss, grads = rpn_loss_and_grad(head, features, labels, targets, weights)
    loss = loss._replace(scale=gamma_rpn)
    new = head.copy()
    step = lr * gamma_rpn
    if step != 0.0:
        new.w_obj = head.w_obj - step * grads["w_obj"]
        new.b_obj = float(head.b_obj - step * grads["b_obj"][0])
        new.w_reg = head.w_reg - step * grads["w_reg"]
        new.b_reg = head.b_reg - step * grads["b_reg"]
    return new, loss


def nms(boxes, scores, thresh: float, max_keep: int | None = None) -> np.ndarray:
    """Greedy NMS: indices kept, in descending score order (ties by index).

    With ``max_keep`` the scan stops after that many boxes; the result is the
    same prefix a full run would return.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if len(boxes) != len(scores):
        raise ValueError("boxes and scores differ in length")
    if len(boxes) == 0:
        return np.zeros(0, dtype=np.int64)
    return _kernels.nms(boxes, scores, thresh, -1 if max_keep is None else int(max_keep))


@dataclass(frozen=True)
class Proposal:
    box: BBox
    objectness: float
    max_gt_iou: float
    matched_gt: int | None
    source_stage: int


@dataclass
class ProposalSet:
    """Column-oriented batch of proposals for one scene."""

    boxes: np.ndarray
    scores: np.ndarray
    max_gt_iou: np.ndarray = field(default=None)
    matched_gt: np.ndarray = field(default=None)
    stage: int = 0

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        n = len(self.boxes)
        if self.max_gt_iou is None:
            self.max_gt_iou = np.zeros(n)
        if self.matched_gt is None:
            self.matched_gt = np.full(n, -1, dtype=np.int64)
        self.max_gt_iou = np.asarray(self.max_gt_iou, dtype=np.float64)
        self.matched_gt = np.asarray(self.matched_gt, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.boxes)

    def annotated(self, gt_boxes) -> "ProposalSet":
        """Copy with ``max_gt_iou``/``matched_gt`` recomputed against ``gt_boxes``."""
        gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
        n = len(self.boxes)
        if len(gt_boxes) == 0 or n == 0:
            return ProposalSet(self.boxes, self.scores, np.zeros(n), np.full(n, -1), self.stage)
        ious = iou_matrix(self.boxes, gt_boxes)
        best = np.argmax(ious, axis=1)
        best_iou = ious[np.arange(n), best]
        return ProposalSet(self.boxes, self.scores, best_iou, np.where(best_iou > 0, best, -1), self.stage)

    def take(self, idx) -> "ProposalSet":
        idx = np.asarray(idx, dtype=np.int64)
        return ProposalSet(self.boxes[idx], self.scores[idx], self.max_gt_iou[idx],
                           self.matched_gt[idx], self.stage)

    def to_list(self) -> list[Proposal]:
        return [
            Proposal(BBox.from_array(b), float(s), float(v), int(m) if m >= 0 else None, self.stage)
            for b, s, v, m in zip(self.boxes, self.scores, self.max_gt_iou, self.matched_gt)
        ]


def generate_proposals(head: RpnHead, grid: AnchorGrid, features, nms_thresh: float = 0.7,
                       pre_nms_topk: int = 600, post_nms_count: int = 100, doubled: bool = False,
                       gt_boxes=None) -> ProposalSet:
    """Score and regress every anchor, then top-k, NMS and truncate.

    ``doubled`` doubles ``post_nms_count``. Boxes that clip to zero area are
    dropped. When ``gt_boxes`` is given proposals carry their max GT IoU.
    """
    if pre_nms_topk < 1 or post_nms_count < 1:
        raise ValueError("proposal counts must be >= 1")
    scores, deltas = rpn_forward(head, features)
    boxes = clip_boxes(decode_deltas(grid.anchors, deltas), grid.width, grid.height)
    valid = np.flatnonzero(box_areas(boxes) > 0)
    order = valid[_kernels.descending_order(scores[valid])][:pre_nms_topk]
    count = post_nms_count * (2 if doubled else 1)
    keep = order[nms(boxes[order], scores[order], nms_thresh, count)]
    props = ProposalSet(boxes[keep], scores[keep])
    if gt_boxes is not None:
        props = props.annotated(gt_boxes)
    return props
