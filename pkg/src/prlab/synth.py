"""Synthetic scenes, class splits, K-shot subsets and the frozen feature model.

The feature model stands in for backbone + RoI feature extraction. The feature
at a box ``b`` mixes the prototype of the best-overlapping object with the
background prototype in proportion to the overlap ``v``::

    feature = v * rho_c * mu_c + (1 - v) * mu_bg + noise(v * sigma_c + (1 - v) * sigma_bg)

followed by a noisy copy of the regression delta from ``b`` to that object.
Novel classes get shrunken prototypes (``rho < 1``) and larger noise, so their
features are less informative than base-class features at the same overlap.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from prlab import _kernels
from prlab.geometry import BBox, encode_deltas, iou_matrix

PHASES = ("base", "novel", "balanced")
_PHASE_CODE = {"base": 1, "novel": 2, "balanced": 3}


def substream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator derived from ``seed`` and integer keys."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(k) for k in keys]])


@dataclass(frozen=True)
class ClassSplit:
    base_classes: tuple[int, ...]
    novel_classes: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "base_classes", tuple(int(c) for c in self.base_classes))
        object.__setattr__(self, "novel_classes", tuple(int(c) for c in self.novel_classes))
        for name, lst in (("base", self.base_classes), ("novel", self.novel_classes)):
            if len(set(lst)) != len(lst):
                raise ValueError(f"duplicate ids in {name} classes")
        overlap = set(self.base_classes) & set(self.novel_classes)
        if overlap:
            raise ValueError(f"base and novel classes overlap: {sorted(overlap)}")

    @classmethod
    def contiguous(cls, num_base: int, num_novel: int) -> "ClassSplit":
        return cls(tuple(range(num_base)), tuple(range(num_base, num_base + num_novel)))

    @property
    def all_classes(self) -> tuple[int, ...]:
        return self.base_classes + self.novel_classes

    def classes_for(self, phase: str) -> tuple[int, ...]:
        if phase == "base":
            return self.base_classes
        if phase == "novel":
            return self.novel_classes
        if phase == "balanced":
            return self.all_classes
        raise ValueError(f"unknown phase {phase!r}")


@dataclass
class Scene:
    """An image-sized canvas and its ground truth.

    ``boxes`` is an ``(N, 4)`` array, ``classes`` the matching class ids and
    ``ignore`` flags VOC ``difficult`` / COCO ``iscrowd`` objects.
    ``unlabeled_boxes``/``unlabeled_classes`` are objects that are physically
    present (the feature model sees them) but carry no annotation, e.g. novel
    objects in base-training images.
    """

    width: float
    height: float
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    classes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    ignore: np.ndarray | None = None
    scene_id: str = ""
    unlabeled_boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    unlabeled_classes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        if self.ignore is None:
            self.ignore = np.zeros(len(self.classes), dtype=bool)
        self.ignore = np.asarray(self.ignore, dtype=bool).reshape(-1)
        if not (len(self.boxes) == len(self.classes) == len(self.ignore)):
            raise ValueError("boxes, classes and ignore flags differ in length")
        self.unlabeled_boxes = np.asarray(self.unlabeled_boxes, dtype=np.float64).reshape(-1, 4)
        self.unlabeled_classes = np.asarray(self.unlabeled_classes, dtype=np.int64).reshape(-1)
        if len(self.unlabeled_boxes) != len(self.unlabeled_classes):
            raise ValueError("unlabeled boxes and classes differ in length")

    def __len__(self) -> int:
        return len(self.classes)

    @property
    def annotations(self) -> list[tuple[int, np.ndarray]]:
        return [(int(c), b.copy()) for c, b in zip(self.classes, self.boxes)]

    @property
    def object_boxes(self) -> np.ndarray:
        """Every physically present object, labelled first."""
        return np.vstack([self.boxes, self.unlabeled_boxes])

    @property
    def object_classes(self) -> np.ndarray:
        return np.concatenate([self.classes, self.unlabeled_classes])

    def subset(self, idx) -> "Scene":
        """Keep only the listed annotations; other annotated objects are removed."""
        idx = np.asarray(idx, dtype=np.int64)
        return Scene(self.width, self.height, self.boxes[idx], self.classes[idx],
                     self.ignore[idx], self.scene_id, self.unlabeled_boxes, self.unlabeled_classes)

    def same_as(self, other: "Scene") -> bool:
        return (self.width == other.width and self.height == other.height
                and self.scene_id == other.scene_id
                and np.array_equal(self.boxes, other.boxes)
                and np.array_equal(self.classes, other.classes)
                and np.array_equal(self.ignore, other.ignore)
                and np.array_equal(self.unlabeled_boxes, other.unlabeled_boxes)
                and np.array_equal(self.unlabeled_classes, other.unlabeled_classes))


@dataclass(frozen=True)
class FeatureModel:
    prototypes: np.ndarray  # (num_classes, dim), indexed by class id
    background: np.ndarray  # (dim,)
    novel_mask: np.ndarray  # (num_classes,) bool
    noise_base: float
    noise_novel: float
    novel_shrink: float
    noise_background: float | None = None  # None: same as noise_base

    def __post_init__(self):
        if not self.noise_novel >= self.noise_base > 0:
            raise ValueError("need noise_novel >= noise_base > 0")
        if self.noise_background is not None and self.noise_background <= 0:
            raise ValueError("noise_background must be positive")
        if not 0 < self.novel_shrink <= 1:
            raise ValueError("novel_shrink must lie in (0, 1]")
        if not np.all(np.isfinite(self.prototypes)):
            raise ValueError("non-finite prototypes")

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]

    @property
    def sigma_background(self) -> float:
        return self.noise_base if self.noise_background is None else self.noise_background

    @property
    def feature_dim(self) -> int:
        return self.dim + 4


@dataclass(frozen=True)
class SynthConfig:
    width: float = 128.0
    height: float = 128.0
    objects_mean: float = 3.0
    objects_dist: str = "poisson"  # or "fixed"
    max_objects: int = 10
    min_size: float = 16.0
    max_size: float = 64.0
    min_aspect: float = 0.5
    max_aspect: float = 2.0
    max_gt_overlap: float = 0.3
    unlabeled_novel_rate: float = 1.0
    feature_dim: int = 16
    prototype_scale: float = 3.0
    noise_base: float = 0.05
    noise_novel: float = 0.1
    noise_background: float | None = 0.8
    novel_shrink: float = 0.6
    base_objectness: float = 3.0
    background_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("scene dimensions must be positive")
        if not 0 < self.min_size <= self.max_size <= min(self.width, self.height):
            raise ValueError("object size range must be non-empty and fit in the scene")
        if not 0 < self.min_aspect <= self.max_aspect:
            raise ValueError("aspect range must be non-empty")
        if self.objects_dist not in ("poisson", "fixed"):
            raise ValueError(f"unknown objects_dist {self.objects_dist!r}")
        if self.objects_mean < 0 or self.max_objects < 0:
            raise ValueError("object counts must be non-negative")
        if not 0 <= self.unlabeled_novel_rate <= 1:
            raise ValueError("unlabeled_novel_rate must lie in [0, 1]")
        if not self.noise_novel >= self.noise_base > 0:
            raise ValueError("need noise_novel >= noise_base > 0")
        if self.noise_background is not None and self.noise_background <= 0:
            raise ValueError("noise_background must be positive")
        if not 0 < self.novel_shrink <= 1:
            raise ValueError("novel_shrink must lie in (0, 1]")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be a 64-bit value")


def make_feature_model(cfg: SynthConfig, split: ClassSplit) -> FeatureModel:
    num_classes = max(split.all_classes) + 1
    rng = substream(cfg.seed, 0xFEA7)
    scale = cfg.prototype_scale / np.sqrt(cfg.feature_dim)
    protos = rng.standard_normal((num_classes, cfg.feature_dim)) * scale
    background = rng.standard_normal(cfg.feature_dim) * scale * cfg.background_scale
    novel_mask = np.zeros(num_classes, dtype=bool)
    novel_mask[list(split.novel_classes)] = True
    # direction shared by base classes only; the proposal head can latch onto it
    shared = rng.standard_normal(cfg.feature_dim)
    shared *= cfg.base_objectness / np.linalg.norm(shared)
    protos[list(split.base_classes)] += shared
    return FeatureModel(protos, background, novel_mask, cfg.noise_base,
                        cfg.noise_novel, cfg.novel_shrink, cfg.noise_background)


def _place(cfg: SynthConfig, rng: np.random.Generator, placed: list[np.ndarray]) -> np.ndarray | None:
    for _attempt in range(50):
        size = rng.uniform(cfg.min_size, cfg.max_size)
        aspect = np.exp(rng.uniform(np.log(cfg.min_aspect), np.log(cfg.max_aspect)))
        w = min(size * np.sqrt(aspect), cfg.width)
        h = min(size / np.sqrt(aspect), cfg.height)
        x1 = rng.uniform(0.0, cfg.width - w)
        y1 = rng.uniform(0.0, cfg.height - h)
        box = np.array([x1, y1, x1 + w, y1 + h])
        if placed and iou_matrix(box, np.array(placed)).max() > cfg.max_gt_overlap:
            continue
        return box
    return None


def _count(cfg: SynthConfig, rng: np.random.Generator, mean: float) -> int:
    if cfg.objects_dist == "poisson":
        return int(min(rng.poisson(mean), cfg.max_objects))
    return int(min(round(mean), cfg.max_objects))


def _draw_scene(cfg: SynthConfig, classes: Sequence[int], rng: np.random.Generator,
                scene_id: str, hidden: Sequence[int] = ()) -> Scene:
    placed: list[np.ndarray] = []
    objects: list[tuple[int, bool]] = []
    n = _count(cfg, rng, cfg.objects_mean)
    m = _count(cfg, rng, cfg.objects_mean * cfg.unlabeled_novel_rate) if hidden else 0
    for i in range(n + m):
        pool = classes if i < n else hidden
        cls = int(pool[rng.integers(len(pool))])
        box = _place(cfg, rng, placed)
        if box is not None:
            placed.append(box)
            objects.append((cls, i < n))
    boxes = np.array(placed).reshape(-1, 4)
    labels = np.array([c for c, _ in objects], dtype=np.int64)
    keep = np.array([lab for _, lab in objects], dtype=bool)
    return Scene(cfg.width, cfg.height, boxes[keep], labels[keep], scene_id=scene_id,
                 unlabeled_boxes=boxes[~keep], unlabeled_classes=labels[~keep])


def generate_dataset(cfg: SynthConfig, split: ClassSplit, n_scenes: int, phase: str,
                     stream: int = 0) -> list[Scene]:
    """Draw ``n_scenes`` scenes whose objects come from the classes of ``phase``.

    Scene ``i`` uses its own substream of ``(seed, phase, stream, i)`` so any
    subset can be regenerated independently. ``stream`` separates e.g. train
    and test draws from the same config. Base-phase scenes also hold
    ``Poisson(objects_mean * unlabeled_novel_rate)`` unannotated novel-class
    objects, which base training therefore sees as background.
    """
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    classes = split.classes_for(phase)
    if not classes:
        raise ValueError(f"no classes available for phase {phase!r}")
    code = _PHASE_CODE[phase]
    hidden = split.novel_classes if phase == "base" else ()
    return [
        _draw_scene(cfg, classes, substream(cfg.seed, code, stream, i), f"{phase}{stream}-{i:05d}", hidden)
        for i in range(n_scenes)
    ]


def sample_k_shot(scenes: Sequence[Scene], split: ClassSplit, k: int, seed: int) -> list[Scene]:
    """Pick exactly ``k`` object instances of every class in ``split``.

    Scenes keep only their selected objects; unselected objects are removed
    from the canvas. Output order follows the source scene order.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = substream(seed, 0x5407)
    chosen: dict[int, list[int]] = {}
    for cls in split.all_classes:
        pool = [(si, ai) for si, s in enumerate(scenes)
                for ai in np.flatnonzero((s.classes == cls) & ~s.ignore)]
        if len(pool) < k:
            raise ValueError(f"class {cls} has only {len(pool)} instances, need {k}")
        for p in rng.choice(len(pool), size=k, replace=False):
            si, ai = pool[int(p)]
            chosen.setdefault(si, []).append(int(ai))
    return [scenes[si].subset(sorted(chosen[si])) for si in sorted(chosen)]


def box_features(model: FeatureModel, scene: Scene, boxes, rng: np.random.Generator) -> np.ndarray:
    """Feature rows (length ``dim + 4``) for every box in ``boxes``.

    Consumes exactly one ``(N, dim + 4)`` standard-normal block from ``rng``.
    The prototype part's noise scale follows the mixture,
    ``v * sigma_c + (1 - v) * sigma_bg``; the localisation cue carries the
    object's own ``sigma_c``. Boxes overlapping no object get pure background
    noise and a zero cue.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    n, dim = len(boxes), model.dim
    eps = rng.standard_normal((n, dim + 4))
    out = np.zeros((n, dim + 4))
    obj_boxes = scene.object_boxes
    if len(obj_boxes) == 0:
        out[:, :dim] = model.background + model.sigma_background * eps[:, :dim]
        return out
    ious = iou_matrix(boxes, obj_boxes)
    best = np.argmax(ious, axis=1)
    v = ious[np.arange(n), best]
    cls = scene.object_classes[best]
    novel = model.novel_mask[cls]
    rho = np.where(novel, model.novel_shrink, 1.0)
    sigma_c = np.where(novel, model.noise_novel, model.noise_base)
    sigma = v * sigma_c + (1.0 - v) * model.sigma_background
    out[:, :dim] = _kernels.mix_features(v, rho, sigma, cls, model.prototypes, model.background, eps[:, :dim])
    hit = v > 0
    if hit.any():
        cue = encode_deltas(boxes[hit], obj_boxes[best[hit]])
        out[hit, dim:] = cue + sigma_c[hit, None] * eps[hit, dim:]
    return out


def box_feature(model: FeatureModel, scene: Scene, b, rng: np.random.Generator) -> np.ndarray:
    if isinstance(b, BBox):
        b = b.to_array()
    return box_features(model, scene, np.asarray(b, dtype=np.float64).reshape(1, 4), rng)[0]
