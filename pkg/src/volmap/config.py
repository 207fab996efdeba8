"""The single JSON run config shared by every pipeline stage.

Validation uses a JSON Schema; failures name the offending key as a JSON
pointer. :func:`resolve` merges defaults so that the echo written next to
each run's outputs is complete and reproduces the run on its own.
"""
from __future__ import annotations

import copy
import json
import math
import os
from dataclasses import dataclass
from typing import Optional

import jsonschema

from .labeler import ClassStats
from .spherical import SphericalConfig
from .voxelizer import GridConfig
from .volmapnet import NetConfig, TrainConfig

ECHO_NAME = "resolved_config.json"

DEFAULTS = {
    "seed": 0,
    "grid": {
        "x_range": [0.0, 60.0],
        "y_range": [-22.5, 22.5],
        "res_x": 0.4,
        "res_y": 0.4,
        "n_layers": 10,
        "pad_to_multiple": 8,
        "shape_override": None,
    },
    # "binned": derive layers from elevation; "native": keep the sensor's ring index
    "layers": {"mode": "binned", "elev_range_deg": [-24.9, 2.0], "camera_fov_deg": None},
    "net": {"base_channels": 16, "multipliers": [1, 2, 4], "bottleneck_multiplier": 8, "init_seed": 0},
    "train": {"epochs": 300, "lr": 1e-4, "batch_size": 16, "momentum": 0.0, "seed": 0, "log_base": None},
    "classes": ["background", "Car", "Van", "Truck", "Pedestrian", "Cyclist"],
    "class_stats": None,
    "data": {"root": ".", "train": None, "val": None},
    "spherical": {"n_layers": 80, "n_angles": 600, "azimuth_range_deg": [-180.0, 180.0]},
}

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_posint = {"type": "integer", "minimum": 1}
_pair = {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}
_ids = {"type": ["array", "null"], "items": {"type": "string"}}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


SCHEMA = _obj({
    "seed": {"type": "integer"},
    "grid": _obj({
        "x_range": _pair, "y_range": _pair, "res_x": _pos, "res_y": _pos, "n_layers": _posint,
        "pad_to_multiple": _posint,
        "shape_override": {"type": ["array", "null"], "items": _posint, "minItems": 2, "maxItems": 2},
    }),
    "layers": _obj({
        "mode": {"enum": ["binned", "native"]},
        "elev_range_deg": _pair,
        "camera_fov_deg": {"type": ["number", "null"], "exclusiveMinimum": 0},
    }),
    "net": _obj({
        "base_channels": _posint,
        "multipliers": {"type": "array", "items": _posint, "minItems": 3, "maxItems": 3},
        "bottleneck_multiplier": _posint, "init_seed": {"type": "integer"},
    }),
    "train": _obj({
        "epochs": {"type": "integer", "minimum": 0}, "lr": {"type": "number", "minimum": 0},
        "batch_size": _posint, "momentum": {"type": "number", "minimum": 0, "maximum": 1},
        "seed": {"type": "integer"}, "log_base": {"type": ["number", "null"], "exclusiveMinimum": 1},
    }),
    "classes": {"type": "array", "items": {"type": "string"}, "minItems": 2},
    "class_stats": {"oneOf": [{"type": "null"}, _obj({
        "counts": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "frequencies": {"type": "array", "items": {"type": "number", "minimum": 0}},
    }, required=("counts",))]},
    "data": _obj({"root": {"type": "string"}, "train": _ids, "val": _ids}),
    "spherical": _obj({"n_layers": _posint, "n_angles": _posint, "azimuth_range_deg": _pair}),
})


class ConfigError(ValueError):
    def __init__(self, pointer: str, message: str):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer or "/"


def _pointer(path) -> str:
    return "".join("/" + str(p).replace("~", "~0").replace("/", "~1") for p in path)


def _merge(defaults, given):
    if isinstance(defaults, dict) and isinstance(given, dict):
        out = copy.deepcopy(defaults)
        for k, v in given.items():
            out[k] = _merge(defaults.get(k), v) if k in defaults else copy.deepcopy(v)
        return out
    return copy.deepcopy(given)


def _check_pair(pointer: str, value) -> None:
    if not value[1] > value[0]:
        raise ConfigError(pointer, f"range must be increasing, got {value}")


@dataclass(frozen=True)
class RunConfig:
    raw: dict           # fully resolved JSON document
    base_dir: str       # relative data paths are taken from here

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def grid(self) -> GridConfig:
        g = self.raw["grid"]
        return GridConfig(tuple(g["x_range"]), tuple(g["y_range"]), g["res_x"], g["res_y"], g["n_layers"],
                          g["pad_to_multiple"], None if g["shape_override"] is None else tuple(g["shape_override"]))

    @property
    def classes(self) -> list[str]:
        return list(self.raw["classes"])

    @property
    def n_classes(self) -> int:
        return len(self.raw["classes"])

    @property
    def class_map(self) -> dict[str, int]:
        """Annotation class name -> id; index 0 is background and never mapped."""
        return {name: i for i, name in enumerate(self.raw["classes"]) if i > 0}

    @property
    def class_stats(self) -> Optional[ClassStats]:
        cs = self.raw["class_stats"]
        return None if cs is None else ClassStats.from_counts(cs["counts"])

    @property
    def net(self) -> NetConfig:
        n = self.raw["net"]
        return NetConfig(self.raw["grid"]["n_layers"], self.n_classes, n["base_channels"],
                         tuple(n["multipliers"]), n["bottleneck_multiplier"])

    @property
    def init_seed(self) -> int:
        return self.raw["net"]["init_seed"]

    @property
    def train(self) -> TrainConfig:
        t = self.raw["train"]
        return TrainConfig(t["epochs"], t["lr"], t["batch_size"], t["momentum"], t["seed"])

    @property
    def log_base(self) -> float:
        b = self.raw["train"]["log_base"]
        return math.e if b is None else float(b)

    @property
    def layers(self) -> dict:
        return dict(self.raw["layers"])

    @property
    def elev_range(self) -> tuple[float, float]:
        lo, hi = self.raw["layers"]["elev_range_deg"]
        return math.radians(lo), math.radians(hi)

    @property
    def spherical(self) -> SphericalConfig:
        s = self.raw["spherical"]
        lo, hi = s["azimuth_range_deg"]
        return SphericalConfig(s["n_layers"], s["n_angles"], (math.radians(lo), math.radians(hi)))

    @property
    def data_root(self) -> str:
        return os.path.normpath(os.path.join(self.base_dir, self.raw["data"]["root"]))

    def split(self, name: str) -> Optional[list[str]]:
        ids = self.raw["data"][name]
        return None if ids is None else list(ids)

    def with_class_stats(self, stats: ClassStats) -> "RunConfig":
        raw = copy.deepcopy(self.raw)
        raw["class_stats"] = stats.to_json()
        return RunConfig(raw, self.base_dir)

    def to_json(self) -> dict:
        return copy.deepcopy(self.raw)

    def write_echo(self, out_dir: str) -> str:
        """Writes the resolved config beside a run's outputs; returns its path.

        The echo stores an absolute data root so it can be used from anywhere.
        """
        raw = self.to_json()
        raw["data"]["root"] = self.data_root
        path = os.path.join(out_dir, ECHO_NAME)
        with open(path, "w") as f:
            json.dump(raw, f, indent=2, sort_keys=True)
            f.write("\n")
        return path


def resolve(doc: dict, base_dir: str = ".") -> RunConfig:
    """Validate ``doc`` and fill in every default."""
    if not isinstance(doc, dict):
        raise ConfigError("/", "run config must be a JSON object")
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        err = min(exc.context, key=lambda e: len(e.path), default=exc) if exc.validator == "oneOf" else exc
        raise ConfigError(_pointer(exc.absolute_path) + _pointer(err.relative_path if err is not exc else []),
                          err.message) from None
    raw = _merge(DEFAULTS, doc)
    for key in ("x_range", "y_range"):
        _check_pair(f"/grid/{key}", raw["grid"][key])
    _check_pair("/layers/elev_range_deg", raw["layers"]["elev_range_deg"])
    _check_pair("/spherical/azimuth_range_deg", raw["spherical"]["azimuth_range_deg"])
    if raw["class_stats"] is not None:
        counts = raw["class_stats"]["counts"]
        if len(counts) != len(raw["classes"]):
            raise ConfigError("/class_stats/counts", f"need {len(raw['classes'])} counts, got {len(counts)}")
        if sum(counts) == 0:
            raise ConfigError("/class_stats/counts", "counts sum to zero")
        raw["class_stats"] = ClassStats.from_counts(counts).to_json()
    try:
        cfg = RunConfig(raw, os.path.abspath(base_dir))
        cfg.grid, cfg.net, cfg.train, cfg.spherical  # constructor checks
    except ValueError as exc:
        raise ConfigError("/", str(exc)) from None
    return cfg


def load(path: str) -> RunConfig:
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError("/", f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return resolve(doc, os.path.dirname(os.path.abspath(path)))


# synthetic cocoon data: sensor rings are the layers, two object classes
COCOON = {
    "grid": {"x_range": [-30.0, 30.0], "y_range": [-20.0, 20.0], "n_layers": 8},
    "layers": {"mode": "native"},
    "classes": ["background", "Car", "Truck"],
}


def cocoon_defaults(overrides: Optional[dict] = None) -> RunConfig:
    return resolve(_merge(COCOON, overrides or {}))
