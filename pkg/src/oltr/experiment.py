"""Glue between a validated config and the library: data, training, evaluation, exploration."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .config import ConfigError, ExperimentConfig
from .datagen import Dataset, generate_blob_images, generate_exploration_pools, generate_gaussian_mixture
from .exploration import LOOP_FIELDS, run_dynamic_loop
from .metrics import EvalReport, build_report
from .training import LOG_FIELDS, TrainState, embed, train


@dataclass
class ExperimentData:
    train: Dataset
    test: Dataset
    pools: list


def build_data(cfg: ExperimentConfig) -> ExperimentData:
    ds = cfg.dataset
    backbone = cfg.data["model"]["backbone"]
    if ds["generator"] == "gaussian":
        if backbone != "mlp":
            raise ConfigError("model.backbone", "the gaussian generator yields vectors; use the mlp backbone")
        tr, te, mix = generate_gaussian_mixture(ds["seed"], ds["dim"], ds["known"], ds["open"], cfg.profile(),
                                                ds["open_count_per_class"], ds["mean_radius"], ds["noise_sigma"],
                                                ds["test_per_class"])
        act = cfg.active
        pools = generate_exploration_pools(mix, ds["seed"], act["stages"], act["per_open_class"],
                                           act["known_per_class"])
        return ExperimentData(tr, te, pools)
    if backbone != "cnn":
        raise ConfigError("model.backbone", "the blobs generator yields images; use the cnn backbone")
    tr, te = generate_blob_images(ds["seed"], ds["side"], ds["known"], ds["open"], cfg.profile(),
                                  ds["open_count_per_class"], ds["test_per_class"])
    return ExperimentData(tr, te, [])


def run_training(cfg: ExperimentConfig, data: ExperimentData | None = None):
    data = data or build_data(cfg)
    return train(data.train, cfg.model(), cfg.objective(), cfg.training(), eval_set=data.test)


def evaluate(state: TrainState, cfg: ExperimentConfig, data: ExperimentData | None = None) -> EvalReport:
    data = data or build_data(cfg)
    _, _, _, logits = embed(state, data.test.x)
    return build_report(logits, data.test.y, data.test.known_labels, data.train.shot_split(), cfg.threshold)


def explore(state: TrainState, cfg: ExperimentConfig, data: ExperimentData | None = None,
            policy: str | None = None):
    data = data or build_data(cfg)
    if not data.pools:
        raise ConfigError("dataset.generator", "exploration pools are only generated for the gaussian generator")
    act = cfg.active
    rng = np.random.default_rng(np.random.SeedSequence([cfg.dataset["seed"], 7]))
    return run_dynamic_loop(state, data.pools, data.test, act["budget"], act["temperature"],
                            policy or act["policy"], rng, act["finetune_epochs"], act["finetune_lr"])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    return v


def rows_to_csv(rows: list[dict], fields) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(fields), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(row[k]) for k in fields})
    return buf.getvalue()


def epoch_csv(rows) -> str:
    return rows_to_csv(rows, LOG_FIELDS)


def loop_csv(rows) -> str:
    return rows_to_csv(rows, LOOP_FIELDS)


BENCHMARK_SEEDS = (0, 1, 2, 3, 4)


def benchmark_config(seed: int, variant: str = "meta") -> ExperimentConfig:
    """The fixed synthetic benchmark; the plain baseline uses instance sampling and no memory."""
    raw = {"dataset": {"seed": seed}, "training": {"seed": seed}}
    if variant == "plain":
        raw["model"] = {"variant": "plain"}
        raw["training"]["sampler"] = "instance"
    elif variant != "meta":
        raise ValueError(f"unknown benchmark variant {variant!r}")
    return ExperimentConfig(raw)
