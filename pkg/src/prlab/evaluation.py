"""Detection metrics: PASCAL matching, 11-point AP, AP over an IoU range,
recall@k for proposals and the proposal-quality imbalance statistics.

Recall points and IoU thresholds are handled as exact rationals (integer
comparisons), so results do not depend on how ``0.1 * i`` rounds.
"""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from prlab import _kernels
from prlab.geometry import BBox, iou_matrix
from prlab.synth import Scene

STATUS_NAMES = {_kernels.FP: "FP", _kernels.TP: "TP", _kernels.IGNORED: "ignored"}
# 0.50, 0.55, ..., 1.00
RANGE_THRESHOLDS = tuple(Fraction(50 + 5 * i, 100) for i in range(11))


@dataclass(frozen=True)
class Detection:
    scene_id: str
    class_id: int
    box: BBox
    score: float

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError("non-finite detection score")


@dataclass
class MatchResult:
    status: np.ndarray  # per detection, input order: FP / TP / IGNORED
    gt_index: np.ndarray  # matched GT index or -1
    iou: np.ndarray  # IoU with the matched GT (0 for FP)
    gt_matched: np.ndarray  # per GT


def _thresh_value(t) -> float:
    return float(t)


def match_detections(dets: Sequence[Detection], scene: Scene, iou_thresh: float) -> MatchResult:
    """Greedy PASCAL matching inside one scene.

    Detections are visited by descending score (input order on ties); each
    takes the highest-IoU unmatched GT of its class. Hitting an ignored
    (difficult/crowd) GT marks the detection as ignored instead of TP/FP.
    """
    n = len(dets)
    status = np.zeros(n, dtype=np.int64)
    gt_index = np.full(n, -1, dtype=np.int64)
    ious_out = np.zeros(n)
    gt_matched = np.zeros(len(scene), dtype=bool)
    if n == 0:
        return MatchResult(status, gt_index, ious_out, gt_matched)
    scores = np.array([d.score for d in dets])
    classes = np.array([d.class_id for d in dets])
    boxes = np.array([d.box.to_array() for d in dets]).reshape(-1, 4)
    order = _kernels.descending_order(scores)
    for cls in np.unique(classes):
        di = order[classes[order] == cls]
        gi = np.flatnonzero(scene.classes == cls)
        if len(gi) == 0:
            continue
        ious = iou_matrix(boxes[di], scene.boxes[gi])
        st, g = _kernels.greedy_match(ious, scene.ignore[gi], _thresh_value(iou_thresh))
        status[di] = st
        hit = g >= 0
        gt_index[di[hit]] = gi[g[hit]]
        ious_out[di[hit]] = ious[np.flatnonzero(hit), g[hit]]
        gt_matched[gi[g[(st == _kernels.TP)]]] = True
    return MatchResult(status, gt_index, ious_out, gt_matched)


def _precision_recall_counts(status_ranked: np.ndarray):
    s = status_ranked[status_ranked != _kernels.IGNORED]
    tp = np.cumsum(s == _kernels.TP)
    fp = np.cumsum(s == _kernels.FP)
    return tp, fp


def ap_from_ranked(status_ranked: np.ndarray, n_gt: int, interpolation: str = "11point") -> float | None:
    """AP from TP/FP flags in rank order; ``None`` when there is no GT."""
    if n_gt == 0:
        return None
    tp, fp = _precision_recall_counts(status_ranked)
    if len(tp) == 0:
        return 0.0
    prec = tp / (tp + fp)
    if interpolation == "11point":
        total = 0.0
        for i in range(11):
            attained = tp * 10 >= i * n_gt
            total += float(prec[attained].max()) if attained.any() else 0.0
        return total / 11.0
    if interpolation == "all":
        rec = tp / n_gt
        mrec = np.concatenate([[0.0], rec, [1.0]])
        mpre = np.concatenate([[0.0], prec, [0.0]])
        mpre = np.maximum.accumulate(mpre[::-1])[::-1]
        i = np.flatnonzero(mrec[1:] != mrec[:-1])
        return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))
    raise ValueError(f"unknown interpolation {interpolation!r}")


@dataclass
class _ClassMatch:
    status: np.ndarray  # ranked order
    det_index: np.ndarray  # input indices in ranked order
    gt_index: np.ndarray
    iou: np.ndarray
    n_gt: int


def _group(dets: Sequence[Detection]):
    by_class: dict[int, list[int]] = defaultdict(list)
    for i, d in enumerate(dets):
        by_class[d.class_id].append(i)
    return by_class


def _match_class(dets: Sequence[Detection], idx: list[int], scenes: Mapping[str, Scene], cls: int,
                 iou_thresh) -> _ClassMatch:
    idx = np.asarray(idx, dtype=np.int64)
    scores = np.array([dets[i].score for i in idx]) if len(idx) else np.zeros(0)
    ranked = idx[_kernels.descending_order(scores)]
    status = np.zeros(len(ranked), dtype=np.int64)
    gt_index = np.full(len(ranked), -1, dtype=np.int64)
    ious_out = np.zeros(len(ranked))
    per_scene: dict[str, list[int]] = defaultdict(list)
    for r, i in enumerate(ranked):
        per_scene[dets[i].scene_id].append(r)
    thr = _thresh_value(iou_thresh)
    for sid, rows in per_scene.items():
        scene = scenes.get(sid)
        if scene is None:
            continue  # detections on unknown scenes are false positives
        gi = np.flatnonzero(scene.classes == cls)
        if len(gi) == 0:
            continue
        rows = np.asarray(rows)
        boxes = np.array([dets[ranked[r]].box.to_array() for r in rows])
        ious = iou_matrix(boxes, scene.boxes[gi])
        st, g = _kernels.greedy_match(ious, scene.ignore[gi], thr)
        status[rows] = st
        hit = g >= 0
        gt_index[rows[hit]] = gi[g[hit]]
        ious_out[rows[hit]] = ious[np.flatnonzero(hit), g[hit]]
    n_gt = sum(int(np.sum((s.classes == cls) & ~s.ignore)) for s in scenes.values())
    return _ClassMatch(status, ranked, gt_index, ious_out, n_gt)


def gt_classes(scenes: Mapping[str, Scene]) -> list[int]:
    out: set[int] = set()
    for s in scenes.values():
        out.update(int(c) for c in s.classes[~s.ignore])
    return sorted(out)


def ap_11point(dets: Sequence[Detection], scenes: Mapping[str, Scene], iou_thresh=0.5,
               interpolation: str = "11point") -> dict[int, float | None]:
    """Per-class AP at one IoU threshold over a corpus keyed by scene id.

    Classes that only appear in detections map to ``None`` (undefined AP).
    """
    by_class = _group(dets)
    out: dict[int, float | None] = {}
    for cls in sorted(set(gt_classes(scenes)) | set(by_class)):
        m = _match_class(dets, by_class.get(cls, []), scenes, cls, iou_thresh)
        out[cls] = ap_from_ranked(m.status, m.n_gt, interpolation)
    return out


def mean_ap(per_class: Mapping[int, float | None], classes: Iterable[int] | None = None) -> float | None:
    keys = per_class.keys() if classes is None else [c for c in classes if c in per_class]
    vals = [per_class[c] for c in keys if per_class[c] is not None]
    return float(np.mean(vals)) if vals else None


def map_range(dets: Sequence[Detection], scenes: Mapping[str, Scene], classes: Iterable[int] | None = None,
              interpolation: str = "11point") -> tuple[float | None, list[float | None]]:
    """Class-averaged AP at IoU 0.50, 0.55, ..., 1.00 and their mean."""
    classes = None if classes is None else list(classes)
    per_t = [mean_ap(ap_11point(dets, scenes, t, interpolation), classes) for t in RANGE_THRESHOLDS]
    vals = [v for v in per_t if v is not None]
    return (float(np.mean(vals)) if vals else None), per_t


def recall_at_k(proposals: Mapping[str, tuple[np.ndarray, np.ndarray]], scenes: Mapping[str, Scene],
                iou_thresh: float = 0.5, k: int = 100, classes: Iterable[int] | None = None) -> float:
    """Share of GT boxes hit (class-agnostic) by the top-``k`` proposals of their scene.

    ``proposals`` maps scene id to ``(boxes, objectness)``. ``classes`` limits
    which GT objects are counted.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    keep_cls = None if classes is None else set(classes)
    n_gt = 0
    n_hit = 0
    for sid, scene in scenes.items():
        mask = ~scene.ignore
        if keep_cls is not None:
            mask &= np.isin(scene.classes, list(keep_cls))
        gt = scene.boxes[mask]
        n_gt += len(gt)
        if len(gt) == 0 or sid not in proposals:
            continue
        boxes, scores = proposals[sid]
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        if len(boxes) == 0:
            continue
        top = boxes[_kernels.descending_order(scores)[:k]]
        n_hit += int(np.sum(iou_matrix(top, gt).max(axis=0) >= iou_thresh))
    if n_gt == 0:
        raise ValueError("no ground truth")
    return n_hit / n_gt


def default_imbalance_bins() -> np.ndarray:
    return np.round(np.linspace(0.4, 1.0, 7), 10)


def _bin_counts(ious: np.ndarray, edges: np.ndarray) -> np.ndarray:
    return np.histogram(ious[(ious >= edges[0]) & (ious <= edges[-1])], bins=edges)[0]


def _ratio(a: float, b: float) -> float:
    return a / b if b > 0 else float("nan")


@dataclass
class ImbalanceReport:
    edges: np.ndarray
    base_avg: np.ndarray  # mean proposals per image per bin
    novel_avg: np.ndarray
    stats: dict[str, float]

    def to_csv(self) -> str:
        lines = ["bin_lo,bin_hi,base_avg,novel_avg"]
        for i in range(len(self.base_avg)):
            lines.append(f"{self.edges[i]!r},{self.edges[i + 1]!r},{self.base_avg[i]!r},{self.novel_avg[i]!r}")
        for k, v in self.stats.items():
            lines.append(f"# {k}={v!r}")
        return "\n".join(lines) + "\n"


def _run_stats(avg: np.ndarray, edges: np.ndarray) -> tuple[float, float]:
    lo = edges[:-1]
    total = avg.sum()
    share = _ratio(avg[lo < 0.6 - 1e-12].sum(), total)
    hi_bin = np.flatnonzero(np.isclose(lo, 0.9))
    lo_bin = np.flatnonzero(np.isclose(lo, 0.4))
    ratio = _ratio(avg[hi_bin].sum(), avg[lo_bin].sum()) if len(hi_bin) and len(lo_bin) else float("nan")
    return float(share), float(ratio)


def _flatten(runs) -> tuple[np.ndarray, int]:
    vals = [r.max_gt_iou if hasattr(r, "max_gt_iou") else np.asarray(r, dtype=np.float64).reshape(-1)
            for r in runs]
    return (np.concatenate(vals) if vals else np.zeros(0)), len(vals)


def imbalance_report(base_runs, novel_runs, edges=None) -> ImbalanceReport:
    """Per-image proposal counts by IoU bin for a base and a novel run.

    Each run is a sequence with one entry per image: a ``ProposalSet`` or an
    array of max GT IoUs. Stats: share of ``[0.4, 0.6)``, ratio of the
    ``[0.9, 1.0]`` bin to the ``[0.4, 0.5)`` bin, and novel/base count ratio
    over IoU >= 0.5.
    """
    edges = default_imbalance_bins() if edges is None else np.asarray(edges, dtype=np.float64)
    base, nb = _flatten(base_runs)
    novel, nn = _flatten(novel_runs)
    base_avg = _bin_counts(base, edges) / max(nb, 1)
    novel_avg = _bin_counts(novel, edges) / max(nn, 1)
    b_share, b_ratio = _run_stats(base_avg, edges)
    n_share, n_ratio = _run_stats(novel_avg, edges)
    ge05 = edges[:-1] >= 0.5 - 1e-12
    stats = {
        "base_share_04_06": b_share,
        "novel_share_04_06": n_share,
        "base_ratio_09_04": b_ratio,
        "novel_ratio_09_04": n_ratio,
        "share_ratio_novel_base": _ratio(n_share, b_share),
        "hi_lo_ratio_novel_base": _ratio(n_ratio, b_ratio),
        "count_ratio_novel_base_ge05": _ratio(novel_avg[ge05].sum(), base_avg[ge05].sum()),
    }
    return ImbalanceReport(edges, base_avg, novel_avg, stats)


@dataclass
class EvalReport:
    class_names: dict[int, str]
    ap50: dict[int, float | None]
    map50: float | None
    range_thresholds: list[float] = field(default_factory=list)
    ap_range_per_threshold: list[float | None] = field(default_factory=list)
    map_range: float | None = None
    recall: dict[str, float] = field(default_factory=dict)
    groups: dict[str, dict[str, float | None]] = field(default_factory=dict)
    trace: list[dict] = field(default_factory=list)

    def to_dict(self, include_trace: bool = True) -> dict:
        d = {
            "per_class_ap50": {self.class_names.get(c, str(c)): v for c, v in sorted(self.ap50.items())},
            "map50": self.map50,
            "range_thresholds": self.range_thresholds,
            "ap_range_per_threshold": self.ap_range_per_threshold,
            "map_range": self.map_range,
            "recall": self.recall,
            "groups": self.groups,
        }
        if include_trace:
            d["trace"] = self.trace
        return d

    def to_json(self, include_trace: bool = True) -> str:
        return json.dumps(self.to_dict(include_trace), indent=2, sort_keys=True) + "\n"

    def table(self) -> str:
        lines = [f"{'class':<20} {'AP50':>8}"]
        for c, v in sorted(self.ap50.items()):
            name = self.class_names.get(c, str(c))
            lines.append(f"{name:<20} {'-' if v is None else f'{v:.4f}':>8}")
        fmt = lambda v: "-" if v is None else f"{v:.4f}"  # noqa: E731
        lines.append(f"{'mAP50':<20} {fmt(self.map50):>8}")
        if self.range_thresholds:
            lines.append(f"{'AP[.50:1.0]':<20} {fmt(self.map_range):>8}")
        for k, v in self.recall.items():
            lines.append(f"{k:<20} {v:>8.4f}")
        return "\n".join(lines)


def evaluate(dets: Sequence[Detection], scenes: Mapping[str, Scene], class_names: Mapping[int, str] | None = None,
             iou_thresh: float = 0.5, with_range: bool = True, recall_k: int | None = None,
             groups: Mapping[str, Sequence[int]] | None = None, with_trace: bool = False,
             interpolation: str = "11point") -> EvalReport:
    """Full corpus evaluation.

    ``groups`` (e.g. ``{"base": [...], "novel": [...]}``) adds per-group
    mAP50, range mAP and recall entries. Recall@k ranks the detections
    themselves class-agnostically by score.
    """
    names = dict(class_names or {})
    ap50 = ap_11point(dets, scenes, iou_thresh, interpolation)
    report = EvalReport(names, ap50, mean_ap(ap50))
    per_t: list[dict[int, float | None]] = []
    if with_range:
        per_t = [ap_11point(dets, scenes, t, interpolation) for t in RANGE_THRESHOLDS]
        report.range_thresholds = [float(t) for t in RANGE_THRESHOLDS]
        report.ap_range_per_threshold = [mean_ap(p) for p in per_t]
        vals = [v for v in report.ap_range_per_threshold if v is not None]
        report.map_range = float(np.mean(vals)) if vals else None
    props = None
    if recall_k is not None:
        props = detections_as_proposals(dets)
        if any(np.any(~s.ignore) for s in scenes.values()):
            report.recall[f"recall@{recall_k}"] = recall_at_k(props, scenes, iou_thresh, recall_k)
    for gname, gcls in (groups or {}).items():
        entry: dict[str, float | None] = {"map50": mean_ap(ap50, gcls)}
        if with_range:
            vals = [mean_ap(p, gcls) for p in per_t]
            vals = [v for v in vals if v is not None]
            entry["map_range"] = float(np.mean(vals)) if vals else None
        report.groups[gname] = entry
    if with_trace:
        report.trace = matching_trace(dets, scenes, [iou_thresh] + ([float(t) for t in RANGE_THRESHOLDS] if with_range else []))
    return report


def detections_as_proposals(dets: Sequence[Detection]) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    grouped: dict[str, list[Detection]] = defaultdict(list)
    for d in dets:
        grouped[d.scene_id].append(d)
    return {sid: (np.array([d.box.to_array() for d in ds]).reshape(-1, 4), np.array([d.score for d in ds]))
            for sid, ds in grouped.items()}


def matching_trace(dets: Sequence[Detection], scenes: Mapping[str, Scene], thresholds) -> list[dict]:
    """One record per detection per distinct threshold."""
    out = []
    by_class = _group(dets)
    for t in sorted(set(float(x) for x in thresholds)):
        for cls in sorted(by_class):
            m = _match_class(dets, by_class[cls], scenes, cls, t)
            for r, i in enumerate(m.det_index):
                out.append({"iou_thresh": t, "detection": int(i), "status": STATUS_NAMES[int(m.status[r])],
                            "gt_index": int(m.gt_index[r]), "iou": float(m.iou[r])})
    out.sort(key=lambda rec: (rec["iou_thresh"], rec["detection"]))
    return out
