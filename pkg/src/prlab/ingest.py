"""Readers and writers for annotation corpora and detection files.

Supported ground truth: PASCAL VOC XML (one document per image), COCO
instances JSON, and this package's own synthetic dataset JSON. Detections use
a flat JSON array ``[{"scene_id", "class", "box", "score"}]`` with corner
boxes and class names.

Parsing is strict. Structural problems raise :class:`IngestError` subclasses
and no partial result is returned; unknown fields are ignored.
"""
from __future__ import annotations

import json
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path, PurePath
from typing import Iterable, Mapping, Sequence
from xml.parsers import expat

import jsonschema
import numpy as np

from prlab.evaluation import Detection
from prlab.geometry import BBox
from prlab.synth import ClassSplit, Scene


class IngestError(ValueError):
    """Base class for every ingest failure."""


class ParseError(IngestError):
    """The document is not well-formed. ``offset`` is a byte index, if known."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message)
        self.offset = offset


class SchemaError(IngestError):
    pass


class ValidationError(IngestError):
    pass


class ReferenceError_(IngestError):
    """A record points at an id that does not exist."""


@dataclass
class ClassTable:
    """Bijective class-name <-> dense id table."""

    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self._ids = {}
        for i, n in enumerate(self.names):
            if n in self._ids:
                raise ValidationError(f"duplicate class name {n!r}")
            self._ids[n] = i

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, int]) -> "ClassTable":
        ids = sorted(mapping.values())
        if ids != list(range(len(ids))):
            raise ValidationError("class ids must be dense and start at 0")
        names = [""] * len(ids)
        for name, i in mapping.items():
            names[i] = name
        return cls(names)

    @classmethod
    def synthetic(cls, num_classes: int) -> "ClassTable":
        return cls([f"c{i}" for i in range(num_classes)])

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name: str) -> bool:
        return name in self._ids

    def id_of(self, name: str, add: bool = False) -> int:
        if name not in self._ids:
            if not add:
                raise ValidationError(f"unknown class {name!r}")
            self._ids[name] = len(self.names)
            self.names.append(name)
        return self._ids[name]

    def name_of(self, class_id: int) -> str:
        if not 0 <= class_id < len(self.names):
            raise ValidationError(f"unknown class id {class_id}")
        return self.names[class_id]

    def to_mapping(self) -> dict[str, int]:
        return {n: i for i, n in enumerate(self.names)}


@dataclass
class AnnotationCorpus:
    scenes: dict[str, Scene]
    classes: ClassTable
    split: ClassSplit | None = None

    def __post_init__(self):
        for sid, scene in self.scenes.items():
            if scene.scene_id != sid:
                raise ValidationError(f"scene keyed {sid!r} carries id {scene.scene_id!r}")
            for c in scene.object_classes:
                if not 0 <= int(c) < len(self.classes):
                    raise ValidationError(f"scene {sid!r} uses class id {int(c)} missing from the table")

    def class_names(self) -> dict[int, str]:
        return dict(enumerate(self.classes.names))


def _check_box(box: Sequence[float], width: float, height: float, what: str) -> np.ndarray:
    vals = [float(v) for v in box]
    if not all(math.isfinite(v) for v in vals):
        raise ValidationError(f"{what}: non-finite coordinates {vals}")
    x1, y1, x2, y2 = vals
    if x1 >= x2 or y1 >= y2:
        raise ValidationError(f"{what}: box {vals} has xmin >= xmax or ymin >= ymax")
    if x1 < 0 or y1 < 0 or x2 > width or y2 > height:
        raise ValidationError(f"{what}: box {vals} leaves the {width}x{height} image")
    return np.array(vals)


def _check_size(width, height, what: str) -> tuple[float, float]:
    w, h = float(width), float(height)
    if not (math.isfinite(w) and math.isfinite(h)) or w <= 0 or h <= 0:
        raise ValidationError(f"{what}: image size must be positive, got {w}x{h}")
    return w, h


# ---------------------------------------------------------------- VOC XML

def _well_formed(data: bytes) -> None:
    parser = expat.ParserCreate()
    try:
        parser.Parse(data, True)
    except expat.ExpatError as exc:
        offset = parser.ErrorByteIndex
        raise ParseError(f"malformed XML at byte {offset}: {expat.ErrorString(exc.code)}", offset) from None


def _text(node: ET.Element, path: str, what: str) -> str:
    child = node.find(path)
    if child is None or child.text is None or not child.text.strip():
        raise SchemaError(f"{what}: missing <{path}>")
    return child.text.strip()


def _number(node: ET.Element, path: str, what: str) -> float:
    raw = _text(node, path, what)
    try:
        return float(raw)
    except ValueError:
        raise ValidationError(f"{what}: <{path}> is not a number: {raw!r}") from None


def parse_voc_xml(data: bytes, classes: ClassTable | None = None) -> tuple[str, Scene]:
    """One VOC annotation document to ``(scene_id, Scene)``.

    The scene id is the ``filename`` stem. ``difficult=1`` objects are kept with
    the ignore flag set. New class names are appended to ``classes``; pass a
    shared table when parsing several documents.
    """
    if isinstance(data, str):
        data = data.encode("utf-8")
    _well_formed(data)
    root = ET.fromstring(data)
    if root.tag != "annotation":
        raise SchemaError(f"root element is <{root.tag}>, expected <annotation>")
    filename = _text(root, "filename", "annotation")
    scene_id = PurePath(filename).stem
    width, height = _check_size(_number(root, "size/width", "annotation"),
                                _number(root, "size/height", "annotation"), f"scene {scene_id!r}")

    table = classes if classes is not None else ClassTable()
    parsed = []
    for i, obj in enumerate(root.findall("object")):
        what = f"scene {scene_id!r} object {i}"
        name = _text(obj, "name", what)
        coords = [_number(obj, f"bndbox/{k}", what) for k in ("xmin", "ymin", "xmax", "ymax")]
        box = _check_box(coords, width, height, what)
        flag = obj.find("difficult")
        difficult = flag is not None and flag.text is not None and flag.text.strip() == "1"
        parsed.append((name, box, difficult))
    # class ids are assigned only once the whole document is known to be valid
    cls = [table.id_of(name, add=True) for name, _, _ in parsed]
    boxes = np.array([b for _, b, _ in parsed]).reshape(-1, 4)
    ignore = np.array([d for _, _, d in parsed], dtype=bool)
    return scene_id, Scene(width, height, boxes, np.array(cls, dtype=np.int64), ignore, scene_id)


def load_voc(path: str | Path) -> AnnotationCorpus:
    """A VOC annotation directory (every ``*.xml``, in name order) or a single file."""
    path = Path(path)
    files = sorted(path.glob("*.xml")) if path.is_dir() else [path]
    if not files:
        raise SchemaError(f"no .xml files under {path}")
    table = ClassTable()
    scenes: dict[str, Scene] = {}
    for f in files:
        try:
            sid, scene = parse_voc_xml(f.read_bytes(), table)
        except IngestError as exc:
            raise type(exc)(f"{f.name}: {exc}") from None
        if sid in scenes:
            raise ValidationError(f"{f.name}: duplicate scene id {sid!r}")
        scenes[sid] = scene
    return AnnotationCorpus(dict(sorted(scenes.items())), table)


# ---------------------------------------------------------------- COCO JSON

_COCO_SCHEMA = {
    "type": "object",
    "required": ["images", "annotations", "categories"],
    "properties": {
        "images": {"type": "array", "items": {
            "type": "object", "required": ["id", "width", "height"],
            "properties": {"id": {"type": "integer"}, "width": {"type": "number"},
                           "height": {"type": "number"}, "file_name": {"type": "string"}}}},
        "annotations": {"type": "array", "items": {
            "type": "object", "required": ["image_id", "category_id", "bbox"],
            "properties": {"image_id": {"type": "integer"}, "category_id": {"type": "integer"},
                           "bbox": {"type": "array", "items": {"type": "number"},
                                    "minItems": 4, "maxItems": 4},
                           "iscrowd": {"enum": [0, 1, True, False]}}}},
        "categories": {"type": "array", "items": {
            "type": "object", "required": ["id", "name"],
            "properties": {"id": {"type": "integer"}, "name": {"type": "string"}}}},
    },
}


def _load_json(data: bytes | str, what: str):
    try:
        return json.loads(data)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{what}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}",
                         exc.pos) from None


def _schema(doc, schema, what: str) -> None:
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SchemaError(f"{what}: {where}: {exc.message}") from None


def parse_coco_json(data: bytes | str) -> AnnotationCorpus:
    """COCO instances JSON to a corpus keyed by ``str(image id)``.

    Categories are remapped to dense ids in ascending COCO id order.
    ``bbox`` is ``[x, y, width, height]``; ``iscrowd`` sets the ignore flag.
    """
    doc = _load_json(data, "COCO")
    _schema(doc, _COCO_SCHEMA, "COCO")

    cats = sorted(doc["categories"], key=lambda c: c["id"])
    cat_ids = [c["id"] for c in cats]
    if len(set(cat_ids)) != len(cat_ids):
        raise ValidationError("COCO: duplicate category ids")
    table = ClassTable([c["name"] for c in cats])
    dense = {cid: i for i, cid in enumerate(cat_ids)}

    images = {}
    for img in doc["images"]:
        if img["id"] in images:
            raise ValidationError(f"COCO: duplicate image id {img['id']}")
        images[img["id"]] = _check_size(img["width"], img["height"], f"COCO image {img['id']}")

    per_image: dict[int, list] = {i: [] for i in images}
    for k, ann in enumerate(doc["annotations"]):
        what = f"COCO annotation {ann.get('id', k)}"
        if ann["image_id"] not in images:
            raise ReferenceError_(f"{what}: unknown image id {ann['image_id']}")
        if ann["category_id"] not in dense:
            raise ReferenceError_(f"{what}: unknown category id {ann['category_id']}")
        x, y, w, h = (float(v) for v in ann["bbox"])
        box = _check_box([x, y, x + w, y + h], *images[ann["image_id"]], what)
        per_image[ann["image_id"]].append((dense[ann["category_id"]], box, bool(ann.get("iscrowd", 0))))

    scenes = {}
    for img_id in sorted(images):
        sid = str(img_id)
        rows = per_image[img_id]
        scenes[sid] = Scene(*images[img_id], np.array([b for _, b, _ in rows]).reshape(-1, 4),
                            np.array([c for c, _, _ in rows], dtype=np.int64),
                            np.array([g for _, _, g in rows], dtype=bool), sid)
    return AnnotationCorpus(dict(sorted(scenes.items())), table)


# ---------------------------------------------------------------- detections

_DETS_SCHEMA = {
    "type": "array",
    "items": {
        "type": "object",
        "required": ["scene_id", "class", "box", "score"],
        "properties": {
            "scene_id": {"type": "string"},
            "class": {"type": "string"},
            "box": {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4},
            "score": {"type": "number"},
        },
    },
}


def read_detections_json(data: bytes | str, classes: ClassTable, add_classes: bool = False
                         ) -> list[Detection]:
    """Parse a detections array; class names are resolved through ``classes``.

    Unknown class names are an error unless ``add_classes`` is set, in which
    case they are appended to the table.
    """
    doc = _load_json(data, "detections")
    _schema(doc, _DETS_SCHEMA, "detections")
    out = []
    for i, rec in enumerate(doc):
        score = float(rec["score"])
        if not 0.0 <= score <= 1.0:
            raise ValidationError(f"detection {i}: score {score} outside [0, 1]")
        try:
            box = BBox(*(float(v) for v in rec["box"]))
            cid = classes.id_of(rec["class"], add=add_classes)
        except ValueError as exc:
            raise ValidationError(f"detection {i}: {exc}") from None
        out.append(Detection(rec["scene_id"], cid, box, score))
    return out


def write_detections_json(dets: Iterable[Detection], classes: ClassTable) -> str:
    """Serialise detections in input order. Floats are written with ``repr``
    precision, so a read/write roundtrip is exact."""
    recs = [{"scene_id": d.scene_id, "class": classes.name_of(d.class_id),
             "box": [d.box.x1, d.box.y1, d.box.x2, d.box.y2], "score": float(d.score)} for d in dets]
    return json.dumps(recs, indent=1) + "\n"


def load_detections(path: str | Path, classes: ClassTable, add_classes: bool = False) -> list[Detection]:
    return read_detections_json(Path(path).read_bytes(), classes, add_classes)


# ---------------------------------------------------------------- synthetic dataset JSON

_OBJ = {"type": "object", "required": ["class", "box"],
        "properties": {"class": {"type": "string"},
                       "box": {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4},
                       "ignore": {"type": "boolean"}}}

_DATASET_SCHEMA = {
    "type": "object",
    "required": ["classes", "scenes"],
    "properties": {
        "classes": {"type": "object", "additionalProperties": {"type": "integer", "minimum": 0}},
        "split": {"type": "object", "required": ["base", "novel"],
                  "properties": {"base": {"type": "array", "items": {"type": "integer"}},
                                 "novel": {"type": "array", "items": {"type": "integer"}}}},
        "scenes": {"type": "array", "items": {
            "type": "object", "required": ["id", "width", "height", "annotations"],
            "properties": {"id": {"type": "string"}, "width": {"type": "number"}, "height": {"type": "number"},
                           "annotations": {"type": "array", "items": _OBJ},
                           "unlabeled": {"type": "array", "items": _OBJ}}}},
    },
}


def _objects(recs, table: ClassTable, w: float, h: float, what: str):
    boxes, cls, ign = [], [], []
    for i, rec in enumerate(recs):
        boxes.append(_check_box(rec["box"], w, h, f"{what} object {i}"))
        cls.append(table.id_of(rec["class"]))
        ign.append(bool(rec.get("ignore", False)))
    return np.array(boxes).reshape(-1, 4), np.array(cls, dtype=np.int64), np.array(ign, dtype=bool)


def read_dataset_json(data: bytes | str) -> AnnotationCorpus:
    doc = _load_json(data, "dataset")
    _schema(doc, _DATASET_SCHEMA, "dataset")
    table = ClassTable.from_mapping(doc["classes"])
    split = None
    if "split" in doc:
        try:
            split = ClassSplit(tuple(doc["split"]["base"]), tuple(doc["split"]["novel"]))
        except ValueError as exc:
            raise ValidationError(f"dataset split: {exc}") from None
    scenes: dict[str, Scene] = {}
    for rec in doc["scenes"]:
        sid = rec["id"]
        if sid in scenes:
            raise ValidationError(f"duplicate scene id {sid!r}")
        w, h = _check_size(rec["width"], rec["height"], f"scene {sid!r}")
        boxes, cls, ign = _objects(rec["annotations"], table, w, h, f"scene {sid!r}")
        ub, uc, _ = _objects(rec.get("unlabeled", []), table, w, h, f"scene {sid!r} unlabeled")
        scenes[sid] = Scene(w, h, boxes, cls, ign, sid, ub, uc)
    return AnnotationCorpus(scenes, table, split)


def write_dataset_json(corpus: AnnotationCorpus) -> str:
    def obj(c, b, ignore=None):
        rec = {"class": corpus.classes.name_of(int(c)), "box": [float(v) for v in b]}
        if ignore:
            rec["ignore"] = True
        return rec

    doc: dict = {"classes": corpus.classes.to_mapping()}
    if corpus.split is not None:
        doc["split"] = {"base": list(corpus.split.base_classes), "novel": list(corpus.split.novel_classes)}
    doc["scenes"] = []
    for sid, s in corpus.scenes.items():
        rec = {"id": sid, "width": float(s.width), "height": float(s.height),
               "annotations": [obj(c, b, g) for c, b, g in zip(s.classes, s.boxes, s.ignore)]}
        if len(s.unlabeled_classes):
            rec["unlabeled"] = [obj(c, b) for c, b in zip(s.unlabeled_classes, s.unlabeled_boxes)]
        doc["scenes"].append(rec)
    return json.dumps(doc, indent=1) + "\n"


def corpus_from_scenes(scenes: Sequence[Scene], split: ClassSplit) -> AnnotationCorpus:
    """Wrap generated scenes with the synthetic class table ``c0, c1, ...``."""
    table = ClassTable.synthetic(max(split.all_classes) + 1)
    out = {}
    for s in scenes:
        if s.scene_id in out:
            raise ValidationError(f"duplicate scene id {s.scene_id!r}")
        out[s.scene_id] = s
    return AnnotationCorpus(out, table, split)


FORMATS = ("voc", "coco", "synthetic")


def load_ground_truth(path: str | Path, fmt: str) -> AnnotationCorpus:
    """Dispatch on ``fmt``; a document of the wrong kind fails with an IngestError."""
    path = Path(path)
    if fmt == "voc":
        return load_voc(path)
    if fmt not in FORMATS:
        raise IngestError(f"unknown format {fmt!r}; choose from {', '.join(FORMATS)}")
    if path.is_dir():
        raise SchemaError(f"{fmt} ground truth must be a file, got directory {path}")
    data = path.read_bytes()
    return parse_coco_json(data) if fmt == "coco" else read_dataset_json(data)
