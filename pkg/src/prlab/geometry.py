"""Axis-aligned boxes, IoU and the (dx, dy, dw, dh) regression codec.

Boxes are continuous corner coordinates ``(x1, y1, x2, y2)``; area is
``(x2 - x1) * (y2 - y1)`` with no +1 pixel convention. The scalar API works on
:class:`BBox`/:class:`BoxDelta`; the ``*_boxes``/``*_deltas`` functions are the
vectorised forms used everywhere else, operating on ``(N, 4)`` float arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from prlab import _kernels

# dw, dh are clamped to this before exponentiation
DELTA_CLAMP = math.log(1000.0 / 16.0)


class DegenerateBoxError(ValueError):
    pass


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box coordinates {vals}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValueError(f"inverted box {vals}")

    @classmethod
    def from_array(cls, arr) -> "BBox":
        x1, y1, x2, y2 = (float(v) for v in arr)
        return cls(x1, y1, x2, y2)

    def to_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height


class BoxDelta(NamedTuple):
    dx: float
    dy: float
    dw: float
    dh: float


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0 whenever the union has zero area."""
    return float(_kernels.pairwise_iou_np(a.to_array(), b.to_array())[0, 0])


def iou_matrix(a, b) -> np.ndarray:
    """IoU of every row of ``a`` against every row of ``b``, shape (N, M)."""
    return _kernels.pairwise_iou(a, b)


def encode_deltas(anchors, targets) -> np.ndarray:
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    wa = anchors[:, 2] - anchors[:, 0]
    ha = anchors[:, 3] - anchors[:, 1]
    if np.any(wa <= 0) or np.any(ha <= 0):
        raise DegenerateBoxError("degenerate anchor")
    wt = targets[:, 2] - targets[:, 0]
    ht = targets[:, 3] - targets[:, 1]
    if np.any(wt <= 0) or np.any(ht <= 0):
        raise DegenerateBoxError("degenerate target")
    cxa = anchors[:, 0] + 0.5 * wa
    cya = anchors[:, 1] + 0.5 * ha
    cxt = targets[:, 0] + 0.5 * wt
    cyt = targets[:, 1] + 0.5 * ht
    return np.stack(
        [(cxt - cxa) / wa, (cyt - cya) / ha, np.log(wt / wa), np.log(ht / ha)], axis=1
    )


def decode_deltas(anchors, deltas, stats: dict | None = None) -> np.ndarray:
    """Inverse of :func:`encode_deltas`.

    ``dw``/``dh`` above :data:`DELTA_CLAMP` are clamped; when ``stats`` is given
    the number of clamped entries is added to ``stats["clamped"]``.
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    wa = anchors[:, 2] - anchors[:, 0]
    ha = anchors[:, 3] - anchors[:, 1]
    if np.any(wa <= 0) or np.any(ha <= 0):
        raise DegenerateBoxError("degenerate anchor")
    dwh = deltas[:, 2:]
    over = dwh > DELTA_CLAMP
    if stats is not None:
        stats["clamped"] = stats.get("clamped", 0) + int(over.sum())
    dwh = np.minimum(dwh, DELTA_CLAMP)
    # written as corner offsets so that a zero delta returns the anchor bit for bit
    sx = deltas[:, 0] * wa
    sy = deltas[:, 1] * ha
    gx = 0.5 * wa * (np.exp(dwh[:, 0]) - 1.0)
    gy = 0.5 * ha * (np.exp(dwh[:, 1]) - 1.0)
    return np.stack([anchors[:, 0] + sx - gx, anchors[:, 1] + sy - gy,
                     anchors[:, 2] + sx + gx, anchors[:, 3] + sy + gy], axis=1)


def clip_boxes(boxes, width: float, height: float) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    out = np.empty_like(boxes)
    out[:, 0::2] = np.clip(boxes[:, 0::2], 0.0, width)
    out[:, 1::2] = np.clip(boxes[:, 1::2], 0.0, height)
    return out


def box_areas(boxes) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def encode_delta(anchor: BBox, target: BBox) -> BoxDelta:
    return BoxDelta(*encode_deltas(anchor.to_array(), target.to_array())[0].tolist())


def decode_delta(anchor: BBox, d: BoxDelta, stats: dict | None = None) -> BBox:
    return BBox.from_array(decode_deltas(anchor.to_array(), np.asarray(d, dtype=np.float64), stats)[0])


def clip(b: BBox, width: float, height: float) -> BBox:
    if width <= 0 or height <= 0:
        raise ValueError("clip bounds must be positive")
    return BBox.from_array(clip_boxes(b.to_array(), width, height)[0])
