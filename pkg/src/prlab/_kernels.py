"""Hot loops: pairwise IoU, greedy NMS, greedy detection matching and feature mixing.

Every kernel exists twice, a numba ``*_jit`` loop and a vectorised ``*_np``
version, with identical floating-point arithmetic so both give bitwise equal
results. The public names dispatch on :data:`prlab._jit.USE_NUMBA`.
"""
import numpy as np

from prlab._jit import USE_NUMBA, njit

# match status codes
FP = 0
TP = 1
IGNORED = 2


def pairwise_iou_np(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.maximum(iw, 0.0) * np.maximum(ih, 0.0)
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros(inter.shape)
    ok = union > 0.0
    np.divide(inter, union, out=out, where=ok)
    return out


@njit
def pairwise_iou_jit(a, b):
    n = a.shape[0]
    m = b.shape[0]
    out = np.zeros((n, m))
    for i in range(n):
        area_a = (a[i, 2] - a[i, 0]) * (a[i, 3] - a[i, 1])
        for j in range(m):
            iw = min(a[i, 2], b[j, 2]) - max(a[i, 0], b[j, 0])
            ih = min(a[i, 3], b[j, 3]) - max(a[i, 1], b[j, 1])
            if iw <= 0.0 or ih <= 0.0:
                continue
            inter = iw * ih
            area_b = (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1])
            union = area_a + area_b - inter
            if union > 0.0:
                out[i, j] = inter / union
    return out


def descending_order(scores):
    """Indices sorting ``scores`` high to low, ties kept in input order."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def nms_np(boxes, scores, thresh, max_keep=-1):
    """Greedy NMS; stops early once ``max_keep`` boxes are kept (-1: no limit)."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = descending_order(scores)
    keep = []
    while order.size and len(keep) != max_keep:
        i = order[0]
        keep.append(i)
        if order.size == 1:
            break
        ious = pairwise_iou_np(boxes[i:i + 1], boxes[order[1:]])[0]
        order = order[1:][ious <= thresh]
    return np.asarray(keep, dtype=np.int64)


@njit
def _nms_loop(boxes, order, thresh, max_keep):
    n = order.shape[0]
    # sorted, contiguous copies keep the inner loop cache-friendly
    x1 = np.empty(n)
    y1 = np.empty(n)
    x2 = np.empty(n)
    y2 = np.empty(n)
    area = np.empty(n)
    for k in range(n):
        i = order[k]
        x1[k] = boxes[i, 0]
        y1[k] = boxes[i, 1]
        x2[k] = boxes[i, 2]
        y2[k] = boxes[i, 3]
        area[k] = (x2[k] - x1[k]) * (y2[k] - y1[k])
    suppressed = np.zeros(n, dtype=np.bool_)
    keep = np.empty(n, dtype=np.int64)
    nkeep = 0
    for oi in range(n):
        if suppressed[oi]:
            continue
        keep[nkeep] = order[oi]
        nkeep += 1
        if nkeep == max_keep:
            break
        for oj in range(oi + 1, n):
            if suppressed[oj]:
                continue
            iw = min(x2[oi], x2[oj]) - max(x1[oi], x1[oj])
            ih = min(y2[oi], y2[oj]) - max(y1[oi], y1[oj])
            if iw <= 0.0 or ih <= 0.0:
                continue
            inter = iw * ih
            union = area[oi] + area[oj] - inter
            if union > 0.0 and inter / union > thresh:
                suppressed[oj] = True
    return keep[:nkeep]


def nms_jit(boxes, scores, thresh, max_keep=-1):
    boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    return _nms_loop(boxes, descending_order(scores), float(thresh), int(max_keep))


def greedy_match_np(ious, gt_ignore, thresh):
    """Match detections (rows, already in priority order) to GTs (columns).

    Each detection takes the highest-IoU still-unmatched GT (ignored GTs are
    always available); lowest column wins ties. Returns ``(status, gt_index)``
    with ``gt_index = -1`` for false positives.
    """
    ious = np.asarray(ious, dtype=np.float64)
    n, m = ious.shape
    status = np.zeros(n, dtype=np.int64)
    gt_index = np.full(n, -1, dtype=np.int64)
    taken = np.zeros(m, dtype=bool)
    gt_ignore = np.asarray(gt_ignore, dtype=bool)
    for d in range(n):
        if m == 0:
            break
        cand = np.where(taken, -1.0, ious[d])
        j = int(np.argmax(cand))
        if cand[j] >= thresh and cand[j] >= 0.0:
            gt_index[d] = j
            if gt_ignore[j]:
                status[d] = IGNORED
            else:
                status[d] = TP
                taken[j] = True
    return status, gt_index


@njit
def _greedy_match_loop(ious, gt_ignore, thresh):
    n = ious.shape[0]
    m = ious.shape[1]
    status = np.zeros(n, dtype=np.int64)
    gt_index = np.full(n, -1, dtype=np.int64)
    taken = np.zeros(m, dtype=np.bool_)
    for d in range(n):
        best = -1.0
        bj = -1
        for j in range(m):
            if taken[j]:
                continue
            if ious[d, j] > best:
                best = ious[d, j]
                bj = j
        if bj >= 0 and best >= thresh:
            gt_index[d] = bj
            if gt_ignore[bj]:
                status[d] = IGNORED
            else:
                status[d] = TP
                taken[bj] = True
    return status, gt_index


def greedy_match_jit(ious, gt_ignore, thresh):
    ious = np.ascontiguousarray(ious, dtype=np.float64)
    return _greedy_match_loop(ious, np.asarray(gt_ignore, dtype=np.bool_), float(thresh))


def _pairwise_iou_jit_wrapper(a, b):
    a = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 4)
    return pairwise_iou_jit(a, b)


def mix_features_np(v, rho, sigma, cls, prototypes, background, eps):
    """Rows ``v * (rho * mu_cls) + (1 - v) * mu_bg + sigma * eps``."""
    mu = rho[:, None] * prototypes[cls]
    return v[:, None] * mu + (1.0 - v)[:, None] * background + sigma[:, None] * eps


@njit
def _mix_features_loop(v, rho, sigma, cls, prototypes, background, eps):
    n, dim = eps.shape
    out = np.empty((n, dim))
    for i in range(n):
        c = cls[i]
        w = 1.0 - v[i]
        for k in range(dim):
            out[i, k] = v[i] * (rho[i] * prototypes[c, k]) + w * background[k] + sigma[i] * eps[i, k]
    return out


def mix_features_jit(v, rho, sigma, cls, prototypes, background, eps):
    return _mix_features_loop(v, rho, sigma, np.asarray(cls, dtype=np.int64), prototypes, background,
                              np.ascontiguousarray(eps))


if USE_NUMBA:
    pairwise_iou = _pairwise_iou_jit_wrapper
    nms = nms_jit
    greedy_match = greedy_match_jit
    mix_features = mix_features_jit
else:
    pairwise_iou = pairwise_iou_np
    nms = nms_np
    greedy_match = greedy_match_np
    mix_features = mix_features_np
