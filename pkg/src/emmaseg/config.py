"""Training run configuration: a JSON document validated against a closed schema."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema

from .architectures.spec import SPEC_IDS
from .autodiff.optim import DEFAULTS as OPTIMIZER_DEFAULTS
from .errors import ConfigError
from .losses import LOSS_KINDS, LossSpec
from .preprocessing.normalization import BIAS_MODES, VERSIONS, NormalizationSpec
from .preprocessing.sampling import STRATEGIES

_POS_INT = {"type": "integer", "minimum": 1}

RUN_CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["seed", "architecture", "iterations", "data", "output"],
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "architecture": {"enum": list(SPEC_IDS)},
        "width_scale": {"type": "number", "exclusiveMinimum": 0},
        "precision": {"enum": [32, 64]},
        "loss": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": list(LOSS_KINDS)},
                "class_weights": {"type": "array", "items": {"type": "number", "minimum": 0},
                                  "minItems": 4, "maxItems": 4},
                "foreground_only": {"type": "boolean"},
            },
        },
        "optimizer": {
            "type": "object",
            "additionalProperties": False,
            "required": ["algorithm"],
            "properties": {
                "algorithm": {"enum": sorted(OPTIMIZER_DEFAULTS)},
                "hyperparameters": {"type": "object", "additionalProperties": {"type": "number"}},
            },
        },
        "sampling": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "strategy": {"enum": list(STRATEGIES)},
                "include_background": {"type": "boolean"},
                "patch_output": _POS_INT,
                "augment": {"type": "array", "items": {"type": "boolean"},
                            "minItems": 3, "maxItems": 3},
            },
        },
        "normalization": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "version": {"enum": list(VERSIONS)},
                "bias_correction": {"enum": list(BIAS_MODES)},
                "degree": {"enum": [2, 3]},
            },
        },
        "batch_size": _POS_INT,
        "iterations": _POS_INT,
        "checkpoint_every": _POS_INT,
        "log_every": _POS_INT,
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "cases": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                "phantoms": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["seed", "count"],
                    "properties": {
                        "seed": {"type": "integer", "minimum": 0},
                        "count": _POS_INT,
                        "extents": {"type": "array", "items": {"type": "integer", "minimum": 48},
                                    "minItems": 3, "maxItems": 3},
                        "bias_field": {"type": "boolean"},
                    },
                },
            },
            "oneOf": [{"required": ["cases"]}, {"required": ["phantoms"]}],
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "required": ["checkpoint"],
            "properties": {"checkpoint": {"type": "string"}, "log": {"type": "string"}},
        },
    },
}


@dataclass
class RunConfig:
    doc: dict
    base: Path = Path(".")

    @classmethod
    def from_dict(cls, doc: dict, base: Path | str = ".") -> "RunConfig":
        validate_config(doc)
        return cls(copy.deepcopy(doc), Path(base))

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path.name}: invalid JSON ({e})") from None
        return cls.from_dict(doc, path.parent)

    def _section(self, key: str) -> dict:
        return self.doc.get(key, {})

    @property
    def seed(self) -> int:
        return self.doc["seed"]

    @property
    def architecture(self) -> str:
        return self.doc["architecture"]

    @property
    def width_scale(self) -> float:
        return float(self.doc.get("width_scale", 1.0))

    @property
    def precision(self) -> int:
        return self.doc.get("precision", 32)

    @property
    def iterations(self) -> int:
        return self.doc["iterations"]

    @property
    def batch_size(self) -> int:
        return self.doc.get("batch_size", 2)

    @property
    def checkpoint_every(self) -> int:
        return self.doc.get("checkpoint_every", self.iterations)

    @property
    def log_every(self) -> int:
        return self.doc.get("log_every", 50)

    @property
    def loss(self) -> LossSpec:
        s = self._section("loss")
        w = s.get("class_weights")
        return LossSpec(s.get("kind", "cross_entropy"), tuple(w) if w else None,
                        s.get("foreground_only", False))

    @property
    def optimizer(self) -> tuple[str, dict]:
        s = self.doc.get("optimizer", {"algorithm": "adam"})
        return s["algorithm"], dict(s.get("hyperparameters", {}))

    @property
    def sampling(self) -> dict:
        s = self._section("sampling")
        return {"strategy": s.get("strategy", "uniform_per_label"),
                "include_background": s.get("include_background", True),
                "patch_output": s.get("patch_output"),
                "augment": tuple(s.get("augment", (True, True, True)))}

    @property
    def normalization(self) -> NormalizationSpec:
        s = self._section("normalization")
        return NormalizationSpec(s.get("version", "v1_zscore"),
                                 s.get("bias_correction", "polynomial"), s.get("degree", 3))

    @property
    def data(self) -> dict:
        return self.doc["data"]

    def path(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.base / p

    @property
    def checkpoint_path(self) -> Path:
        return self.path(self.doc["output"]["checkpoint"])

    @property
    def log_path(self) -> Path | None:
        log = self.doc["output"].get("log")
        return self.path(log) if log else None


def validate_config(doc) -> None:
    try:
        jsonschema.validate(doc, RUN_CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {e.message}") from None
    opt = doc.get("optimizer")
    if opt:
        unknown = set(opt.get("hyperparameters", {})) - set(OPTIMIZER_DEFAULTS[opt["algorithm"]])
        if unknown:
            raise ConfigError(f"config invalid at optimizer/hyperparameters: unknown keys "
                              f"{sorted(unknown)} for {opt['algorithm']}")
