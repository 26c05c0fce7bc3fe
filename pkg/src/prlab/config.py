"""Experiment configuration: one JSON document describing a whole run.

User files are merged over the built-in defaults, validated against a JSON
schema and then against every component's own invariants. Failures raise
:class:`ConfigError` whose message names the file, line and field.
"""
from __future__ import annotations

import bisect
import copy
import json
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import jsonschema

from prlab.protocol import TrainConfig
from prlab.synth import ClassSplit, SynthConfig

# fields owned by other sections (seed) or by the cascade section
_SYNTH_SKIP = {"seed"}
_TRAIN_SKIP = {"seed", "alphas", "lambdas"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    base_train_scenes: int = 200
    shot_pool_scenes: int = 200
    test_scenes: int = 100
    k: tuple[int, ...] = (5,)


@dataclass(frozen=True)
class EvalConfig:
    iou: float = 0.5
    range: bool = True
    recall_k: int = 100
    recall_iou: float = 0.7
    interpolation: str = "11point"


@dataclass(frozen=True)
class AblationConfig:
    gammas: tuple[float, ...] = (0.0, 0.5)
    refine: tuple[bool, ...] = (True, False)
    k: tuple[int, ...] = (5,)
    seeds: tuple[int, ...] = (0, 1, 2)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    num_base: int = 15
    num_novel: int = 5
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    output_dir: str = "out"

    @property
    def split(self) -> ClassSplit:
        return ClassSplit.contiguous(self.num_base, self.num_novel)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Propagate the master seed to every component."""
        return replace(self, seed=seed, synth=replace(self.synth, seed=seed), train=replace(self.train, seed=seed))

    def to_dict(self) -> dict:
        synth = {k: v for k, v in asdict(self.synth).items() if k not in _SYNTH_SKIP}
        train = {k: _plain(v) for k, v in asdict(self.train).items() if k not in _TRAIN_SKIP}
        return {
            "seed": self.seed,
            "split": {"num_base": self.num_base, "num_novel": self.num_novel},
            "synth": synth,
            "train": train,
            "cascade": {"alphas": list(self.train.alphas), "lambdas": list(self.train.lambdas)},
            "data": {k: _plain(v) for k, v in asdict(self.data).items()},
            "eval": asdict(self.eval),
            "ablation": {k: _plain(v) for k, v in asdict(self.ablation).items()},
            "output_dir": self.output_dir,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def _plain(v):
    return list(v) if isinstance(v, tuple) else v


# ---------------------------------------------------------------- schema

def _type_of(dc_field, default) -> dict:
    t = str(dc_field.type)
    if isinstance(default, bool):
        return {"type": "boolean"}
    if isinstance(default, int) and "float" not in t:
        return {"type": "integer"}
    if isinstance(default, (int, float)):
        return {"type": "number"}
    if isinstance(default, str):
        return {"type": "string"}
    if isinstance(default, tuple):
        item = {"type": "number"}
        if "bool" in t:
            item = {"type": "boolean"}
        elif "int" in t and "float" not in t:
            item = {"type": "integer"}
        return {"type": "array", "items": item}
    if default is None:
        inner = "integer" if "int" in t and "float" not in t else "number"
        if "tuple" in t:
            return {"type": ["array", "null"], "items": {"type": inner}}
        return {"type": [inner, "null"]}
    raise TypeError(f"no schema for field {dc_field.name}")


def _section(cls, skip=()) -> dict:
    inst = cls()
    props = {f.name: _type_of(f, getattr(inst, f.name)) for f in fields(cls) if f.name not in skip}
    return {"type": "object", "properties": props, "additionalProperties": False}


def _schema() -> dict:
    return {
        "type": "object",
        "additionalProperties": False,
        "properties": {
            "seed": {"type": "integer", "minimum": 0},
            "split": {"type": "object", "additionalProperties": False,
                      "properties": {"num_base": {"type": "integer", "minimum": 1},
                                     "num_novel": {"type": "integer", "minimum": 1}}},
            "synth": _section(SynthConfig, _SYNTH_SKIP),
            "train": _section(TrainConfig, _TRAIN_SKIP),
            "cascade": {"type": "object", "additionalProperties": False,
                        "properties": {"alphas": {"type": "array", "items": {"type": "number"}, "minItems": 1},
                                       "lambdas": {"type": "array", "items": {"type": "number"}, "minItems": 1}}},
            "data": _section(DataConfig),
            "eval": _section(EvalConfig),
            "ablation": _section(AblationConfig),
            "output_dir": {"type": "string"},
        },
    }


SCHEMA = _schema()


# ---------------------------------------------------------------- line lookup

def _key_lines(text: str) -> dict[tuple, int]:
    """1-based line of every key / array element path in a valid JSON text."""
    newlines = [i for i, ch in enumerate(text) if ch == "\n"]
    dec = json.JSONDecoder()
    out: dict[tuple, int] = {}

    def line(i):
        return bisect.bisect_left(newlines, i) + 1

    def ws(i):
        while i < len(text) and text[i] in " \t\r\n":
            i += 1
        return i

    def value(i, path):
        i = ws(i)
        out.setdefault(path, line(i))
        if text[i] == "{":
            i = ws(i + 1)
            if text[i] == "}":
                return i + 1
            while True:
                start = ws(i)
                key, i = dec.raw_decode(text, start)
                out[path + (key,)] = line(start)
                i = ws(i) + 1  # ':'
                i = ws(value(i, path + (key,)))
                if text[i] == ",":
                    i += 1
                    continue
                return i + 1
        if text[i] == "[":
            i = ws(i + 1)
            if text[i] == "]":
                return i + 1
            k = 0
            while True:
                i = ws(value(i, path + (k,)))
                k += 1
                if text[i] == ",":
                    i += 1
                    continue
                return i + 1
        _, i = dec.raw_decode(text, i)
        return i

    value(0, ())
    return out


def _where(source: str, lines: dict, path: tuple) -> str:
    name = ".".join(str(p) for p in path) or "<root>"
    ln = lines.get(tuple(path))
    return f"{source}:{ln}: {name}" if ln else f"{source}: {name}"


# ---------------------------------------------------------------- loading

def default_document() -> dict:
    return ExperimentConfig().to_dict()


def bundled_default_text() -> str:
    return resources.files("prlab").joinpath("data/default_config.json").read_text()


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def from_dict(doc: dict, source: str = "<config>", lines: dict | None = None) -> ExperimentConfig:
    lines = lines or {}
    validator = jsonschema.Draft7Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = tuple(err.absolute_path)
        if err.validator == "additionalProperties":
            extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
            path = path + (extra[0],) if extra else path
            raise ConfigError(f"{_where(source, lines, path)}: unknown field")
        raise ConfigError(f"{_where(source, lines, path)}: {err.message}")

    full = _merge(default_document(), doc)
    section = "synth"
    try:
        synth = SynthConfig(**full["synth"], seed=full["seed"])
        section = "train"
        train = {k: tuple(v) if isinstance(v, list) else v for k, v in full["train"].items()}
        section = "cascade"
        cas = full["cascade"]
        train = TrainConfig(**train, alphas=tuple(cas["alphas"]), lambdas=tuple(cas["lambdas"]), seed=full["seed"])
        # stage ordering is checked by the cascade itself
        from prlab.cascade import Cascade
        Cascade.zeros(train.stage_configs, (0,), 1)
        section = "split"
        ClassSplit.contiguous(full["split"]["num_base"], full["split"]["num_novel"])
        section = "data"
        data = DataConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in full["data"].items()})
        if min(data.base_train_scenes, data.shot_pool_scenes, data.test_scenes) < 1 or not data.k \
                or min(data.k) < 1:
            raise ValueError("scene counts and k must be positive")
        section = "eval"
        ev = EvalConfig(**full["eval"])
        if ev.interpolation not in ("11point", "all") or ev.recall_k < 1 or not 0 < ev.iou <= 1:
            raise ValueError("interpolation must be '11point' or 'all', recall_k >= 1, 0 < iou <= 1")
        section = "ablation"
        abl = AblationConfig(**{k: tuple(v) for k, v in full["ablation"].items()})
        if any(g < 0 for g in abl.gammas) or not (abl.gammas and abl.refine and abl.k and abl.seeds):
            raise ValueError("ablation axes must be non-empty and gammas non-negative")
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{_where(source, lines, (section,))}: {exc}") from None
    return ExperimentConfig(full["seed"], full["split"]["num_base"], full["split"]["num_novel"], synth, train,
                            data, ev, abl, full["output_dir"])


def from_json(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{source}:1: <root>: expected a JSON object")
    return from_dict(doc, source, _key_lines(text))


def load(path: str | Path | None) -> ExperimentConfig:
    """Read a config file; ``None`` gives the bundled defaults."""
    if path is None:
        return from_json(bundled_default_text(), "default_config.json")
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read: {exc.strerror}") from None
    return from_json(text, str(path))
