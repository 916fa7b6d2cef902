"""Checkpoints: a JSON manifest plus one little-endian binary blob per tensor."""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .memory import MemoryBank
from .objective import ObjectiveConfig
from .training import ModelConfig, TrainConfig, TrainState

MANIFEST = "manifest.json"
FORMAT_TAG = "oltr-checkpoint/1"
_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(ValueError):
    def __init__(self, tensor: str, message: str):
        super().__init__(f"tensor {tensor!r}: {message}")
        self.tensor = tensor


class ConfigHashWarning(UserWarning):
    pass


def _blob_name(name: str) -> str:
    return name.replace("/", "__") + ".bin"


def _tensors(state: TrainState) -> dict:
    out = {f"param/{k}": v.data for k, v in state.params.items()}
    out.update({f"velocity/{k}": v for k, v in state.velocity.items()})
    if state.bank is not None:
        out["bank/centroids"] = state.bank.centroids
    return out


def _jsonable_rng(state: dict) -> dict:
    return json.loads(json.dumps(state))


def save_checkpoint(state: TrainState, path, config_hash: str = "", extra: dict | None = None) -> Path:
    """Write ``path/manifest.json`` and the tensor blobs; returns the manifest path."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, arr in sorted(_tensors(state).items()):
        arr = np.asarray(arr)
        code = _DTYPES.get(arr.dtype.name)
        if code is None:
            raise CheckpointError(name, f"unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=code).tobytes()
        blob = _blob_name(name)
        (path / blob).write_bytes(raw)
        entries.append({"name": name, "file": blob, "shape": list(arr.shape), "dtype": code, "nbytes": len(raw)})
    manifest = {
        "format": FORMAT_TAG,
        "config_hash": config_hash,
        "epoch": state.epoch,
        "step": state.step,
        "warmed_up": state.warmed_up,
        "class_queue": [int(c) for c in state.class_queue],
        "rng": _jsonable_rng(state.rng.bit_generator.state),
        "model": asdict(state.model),
        "objective": asdict(state.objective),
        "train": asdict(state.train),
        "tensors": entries,
        "extra": extra or {},
    }
    out = path / MANIFEST
    out.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def read_manifest(path) -> dict:
    path = Path(path)
    manifest = json.loads((path / MANIFEST).read_text())
    if manifest.get("format") != FORMAT_TAG:
        raise ValueError(f"{path}: not a checkpoint manifest")
    return manifest


def load_checkpoint(path, config_hash: str | None = None) -> TrainState:
    """Rebuild a TrainState; blob sizes are checked against the manifest before use."""
    path = Path(path)
    manifest = read_manifest(path)
    if config_hash is not None and manifest["config_hash"] != config_hash:
        warnings.warn(f"checkpoint {path} was written for config {manifest['config_hash'][:12]}, "
                      f"current config is {config_hash[:12]}", ConfigHashWarning, stacklevel=2)
    arrays = {}
    for entry in manifest["tensors"]:
        name = entry["name"]
        blob = path / entry["file"]
        if not blob.exists():
            raise CheckpointError(name, f"blob {blob.name} is missing")
        raw = blob.read_bytes()
        expected = int(np.prod(entry["shape"])) * np.dtype(entry["dtype"]).itemsize
        if len(raw) != entry["nbytes"] or len(raw) != expected:
            raise CheckpointError(name, f"blob {blob.name} has {len(raw)} bytes, manifest expects {entry['nbytes']}")
        dtype = np.dtype(entry["dtype"]).newbyteorder("=")
        arrays[name] = np.frombuffer(raw, dtype=entry["dtype"]).astype(dtype).reshape(entry["shape"])

    model = ModelConfig(**{**manifest["model"], "hidden": tuple(manifest["model"]["hidden"])})
    objective = ObjectiveConfig(**manifest["objective"])
    train = TrainConfig(**manifest["train"])
    params = {k.split("/", 1)[1]: Tensor(v, requires_grad=True, dtype=v.dtype)
              for k, v in arrays.items() if k.startswith("param/")}
    velocity = {k.split("/", 1)[1]: v.copy() for k, v in arrays.items() if k.startswith("velocity/")}
    bank = MemoryBank(arrays["bank/centroids"].copy()) if "bank/centroids" in arrays else None
    rng = np.random.default_rng()
    rng.bit_generator.state = manifest["rng"]
    return TrainState(params, bank, velocity, rng, model, objective, train, epoch=manifest["epoch"],
                      step=manifest["step"], class_queue=list(manifest["class_queue"]),
                      warmed_up=manifest["warmed_up"])
