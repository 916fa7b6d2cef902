"""Experiment configuration: JSON file, published schema, defaults and hashing."""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import jsonschema

from .datagen import LongTailProfile
from .metrics import DEFAULT_THRESHOLD
from .objective import ObjectiveConfig
from .training import ModelConfig, TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; ``where`` is a dotted field path or a line number."""

    def __init__(self, where: str, message: str):
        super().__init__(f"{where}: {message}")
        self.where = where


DEFAULTS = {
    "dataset": {
        "generator": "gaussian",
        "seed": 0,
        "dim": 16,
        "known": 20,
        "open": 5,
        "profile": {"kind": "exp", "n_max": 500, "param": 100.0, "n_min": 1},
        "open_count_per_class": 50,
        "test_per_class": 50,
        "mean_radius": 5.0,
        "noise_sigma": 1.0,
        "side": 12,
    },
    "model": {"backbone": "mlp", "feat_dim": 16, "hidden": [64, 64], "channels": 8, "scale": 8.0,
              "eps": 1e-12, "variant": "meta", "coefficients": "softmax"},
    "objective": {"lam": 0.1, "margin": 5.0},
    "training": {
        "epochs": 10, "classes_per_batch": 10, "samples_per_class": 4, "lr": 5e-4, "momentum": 0.9,
        "weight_decay": 5e-4, "grad_clip": 0.0, "head_weight_decay": 5e-4, "centroid_rate": 0.5, "seed": 0,
        "precision": "f32", "warmup_epochs": 1, "sampler": "class_aware", "checkpoint_every": 0,
    },
    "openset": {"threshold": DEFAULT_THRESHOLD},
    "active": {
        "budget": 0.1, "temperature": 1.0, "policy": "score", "stages": [[20, 21, 22], [23, 24]],
        "per_open_class": 50, "known_per_class": 20, "finetune_epochs": 10, "finetune_lr": 0.01,
    },
}

_num = {"type": "number"}
_pos_int = {"type": "integer", "minimum": 1}
_nonneg_int = {"type": "integer", "minimum": 0}
_nonneg = {"type": "number", "minimum": 0}


def _block(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False, "required": list(required)}


SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "ExperimentConfig",
    **_block({
        "dataset": _block({
            "generator": {"enum": ["gaussian", "blobs"]},
            "seed": _nonneg_int,
            "dim": _pos_int,
            "known": {"type": "integer", "minimum": 2},
            "open": _nonneg_int,
            "profile": _block({
                "kind": {"enum": ["exp", "pareto"]},
                "n_max": _pos_int,
                "param": _num,
                "n_min": _pos_int,
            }),
            "open_count_per_class": _nonneg_int,
            "test_per_class": _pos_int,
            "mean_radius": {"type": "number", "exclusiveMinimum": 0},
            "noise_sigma": _nonneg,
            "side": {"type": "integer", "minimum": 8},
        }),
        "model": _block({
            "backbone": {"enum": ["mlp", "cnn"]},
            "feat_dim": _pos_int,
            "hidden": {"type": "array", "items": _pos_int},
            "channels": {"type": "integer", "minimum": 2, "multipleOf": 2},
            "scale": {"type": "number", "exclusiveMinimum": 0},
            "eps": {"type": "number", "exclusiveMinimum": 0},
            "variant": {"enum": ["meta", "plain"]},
            "coefficients": {"enum": ["softmax", "affine"]},
        }),
        "objective": _block({"lam": _nonneg, "margin": _nonneg}),
        "training": _block({
            "epochs": _nonneg_int,
            "classes_per_batch": _pos_int,
            "samples_per_class": _pos_int,
            "lr": {"type": "number", "exclusiveMinimum": 0},
            "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            "weight_decay": _nonneg,
            "grad_clip": _nonneg,
            "head_weight_decay": _nonneg,
            "centroid_rate": {"type": "number", "minimum": 0, "maximum": 1},
            "seed": _nonneg_int,
            "precision": {"enum": ["f32", "f64"]},
            "warmup_epochs": _nonneg_int,
            "sampler": {"enum": ["class_aware", "instance"]},
            "checkpoint_every": _nonneg_int,
        }),
        "openset": _block({"threshold": {"type": "number", "minimum": 0, "maximum": 1}}),
        "active": _block({
            "budget": {"type": "number", "minimum": 0, "maximum": 1},
            "temperature": {"type": "number", "exclusiveMinimum": 0},
            "policy": {"enum": ["score", "random"]},
            "stages": {"type": "array", "items": {"type": "array", "items": _nonneg_int, "minItems": 1}},
            "per_open_class": _pos_int,
            "known_per_class": _nonneg_int,
            "finetune_epochs": _nonneg_int,
            "finetune_lr": {"type": "number", "exclusiveMinimum": 0},
        }),
    }),
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(raw: dict) -> None:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        where = ".".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(where, err.message)


class ExperimentConfig:
    """Validated experiment settings; missing fields take the defaults above."""

    def __init__(self, raw: dict | None = None):
        raw = raw or {}
        validate(raw)
        self.data = _merge(DEFAULTS, raw)
        validate(self.data)
        self._check_consistency()

    def _check_consistency(self):
        ds, act = self.data["dataset"], self.data["active"]
        k, z = ds["known"], ds["open"]
        if ds["profile"]["n_min"] > ds["profile"]["n_max"]:
            raise ConfigError("dataset.profile.n_min", "must not exceed n_max")
        if self.data["training"]["classes_per_batch"] > k:
            raise ConfigError("training.classes_per_batch", f"exceeds the {k} known classes")
        for s, stage in enumerate(act["stages"]):
            for label in stage:
                if not k <= label < k + z:
                    raise ConfigError(f"active.stages.{s}", f"label {label} is not an open class ({k}..{k + z - 1})")

    # -- loading -----------------------------------------------------------
    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        text = Path(path).read_text()
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as err:
            raise ConfigError(f"line {err.lineno}", err.msg) from None
        if not isinstance(raw, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        return cls(raw)

    def with_overrides(self, seed: int | None = None, precision: str | None = None) -> "ExperimentConfig":
        raw = copy.deepcopy(self.data)
        if seed is not None:
            raw["dataset"]["seed"] = seed
            raw["training"]["seed"] = seed
        if precision is not None:
            raw["training"]["precision"] = precision
        return ExperimentConfig(raw)

    # -- views ---------------------------------------------------------------
    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True) + "\n"

    def hash(self) -> str:
        canon = json.dumps(self.data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def profile(self) -> LongTailProfile:
        ds = self.data["dataset"]
        p = ds["profile"]
        return LongTailProfile(p["kind"], ds["known"], p["n_max"], p["param"], p["n_min"])

    def model(self) -> ModelConfig:
        m = dict(self.data["model"])
        m["hidden"] = tuple(m["hidden"])
        return ModelConfig(**m)

    def objective(self) -> ObjectiveConfig:
        return ObjectiveConfig(**self.data["objective"])

    def training(self) -> TrainConfig:
        return TrainConfig(**self.data["training"])

    @property
    def threshold(self) -> float:
        return self.data["openset"]["threshold"]

    @property
    def active(self) -> dict:
        return self.data["active"]

    @property
    def dataset(self) -> dict:
        return self.data["dataset"]
