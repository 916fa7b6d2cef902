"""End-to-end training: class-aware batches, SGD with momentum, alternating centroid updates."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tape, Tensor
from .backbone import extract_features, init_backbone
from .datagen import Dataset
from .memory import DEFAULT_EPS, MemoryBank, compose_meta_embedding, init_centroids, init_heads, update_centroids
from .objective import DEFAULT_SCALE, ObjectiveConfig, cosine_logits, cross_entropy_loss, init_classifier, total_loss

log = logging.getLogger(__name__)

DTYPES = {"f32": np.float32, "f64": np.float64}


@dataclass
class ModelConfig:
    backbone: str = "mlp"
    feat_dim: int = 16
    hidden: tuple = (64, 64)
    channels: int = 8
    scale: float = DEFAULT_SCALE
    eps: float = DEFAULT_EPS
    # "meta": full dynamic meta-embedding; "plain": direct feature + cosine classifier
    variant: str = "meta"
    coefficients: str = "softmax"   # memory coefficient map: "softmax" or "affine"


@dataclass
class TrainConfig:
    epochs: int = 10
    classes_per_batch: int = 10
    samples_per_class: int = 4
    lr: float = 5e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    grad_clip: float = 0.0        # global L2 norm cap; 0 disables
    head_weight_decay: float = 5e-4
    centroid_rate: float = 0.5
    seed: int = 0
    precision: str = "f32"
    warmup_epochs: int = 1
    sampler: str = "class_aware"   # or "instance"
    checkpoint_every: int = 0      # epochs between checkpoints; 0 writes only the final one

    @property
    def batch_size(self) -> int:
        return self.classes_per_batch * self.samples_per_class

    @property
    def dtype(self):
        return DTYPES[self.precision]


@dataclass
class TrainState:
    params: dict                 # name -> Tensor (backbone, heads, "cls.w")
    bank: MemoryBank | None
    velocity: dict               # name -> np.ndarray
    rng: np.random.Generator
    model: ModelConfig
    objective: ObjectiveConfig
    train: TrainConfig
    epoch: int = 0
    step: int = 0
    class_queue: list = field(default_factory=list)
    warmed_up: bool = False

    @property
    def num_classes(self) -> int:
        return self.params["cls.w"].shape[0]

    @property
    def dtype(self):
        return self.train.dtype


# ---------------------------------------------------------------------------
# sampling

def _class_index(labels, num_classes):
    return [np.flatnonzero(labels == k) for k in range(num_classes)]


def _draw_members(idx, q, rng):
    if len(idx) >= q:
        return rng.choice(idx, size=q, replace=False)
    return rng.choice(idx, size=q, replace=True)


def sample_neighborhood_batch(dataset: Dataset, classes_per_batch: int, samples_per_class: int,
                              rng: np.random.Generator, queue: list | None = None) -> np.ndarray:
    """Indices of a batch with ``P`` distinct labels and ``Q`` samples each.

    Classes come from ``queue`` (consumed in place) which is refilled with a
    fresh shuffle of all labels when it runs short, so consecutive calls cover
    every class once per cycle.  Classes with fewer than Q samples are drawn
    with replacement.
    """
    k = dataset.num_known
    p, q = classes_per_batch, samples_per_class
    if p > k:
        raise ValueError(f"classes per batch ({p}) exceeds the number of known classes ({k})")
    queue = [] if queue is None else queue
    chosen = []
    while len(chosen) < p:
        if not queue:
            queue.extend(int(c) for c in rng.permutation(k))
        c = queue.pop(0)
        if c in chosen:
            queue.append(c)
            # queue holds only duplicates of this batch; reshuffle the rest
            if all(x in chosen for x in queue):
                queue.clear()
            continue
        chosen.append(c)
    members = _class_index(dataset.y, k)
    return np.concatenate([_draw_members(members[c], q, rng) for c in chosen])


# ---------------------------------------------------------------------------
# model

def init_state(input_shape, num_classes: int, model: ModelConfig = None, objective: ObjectiveConfig = None,
               train: TrainConfig = None) -> TrainState:
    model = model or ModelConfig()
    objective = objective or ObjectiveConfig()
    train = train or TrainConfig()
    rng = np.random.default_rng(train.seed)
    dtype = train.dtype
    params = init_backbone(model.backbone, rng, input_shape, model.feat_dim, dtype, tuple(model.hidden),
                           model.channels)
    params.update(init_heads(rng, model.feat_dim, num_classes, dtype))
    params["cls.w"] = init_classifier(rng, num_classes, model.feat_dim, dtype)
    velocity = {k: np.zeros_like(v.data) for k, v in params.items()}
    return TrainState(params, None, velocity, rng, model, objective, train)


def forward(state: TrainState, x, warmup: bool = False):
    """Direct features, meta-embedding and logits for a batch."""
    x = Tensor(np.asarray(x), dtype=state.dtype) if not isinstance(x, Tensor) else x
    v = extract_features(state.model.backbone, x, state.params)
    plain = warmup or state.model.variant == "plain" or state.bank is None
    meta = compose_meta_embedding(v, state.bank, state.params, state.model.eps,
                                  use_memory=not plain,
                                  fixed_gamma=1.0 if plain else None, coefficients=state.model.coefficients)
    logits = cosine_logits(meta.v_meta, state.params["cls.w"], state.model.scale, state.model.eps)
    return meta, logits


def batch_loss(state: TrainState, meta, logits, labels, warmup: bool = False) -> Tensor:
    if warmup or state.model.variant == "plain":
        return cross_entropy_loss(logits, labels)
    return total_loss(meta.v_meta, labels, state.bank, state.params["cls.w"], state.objective,
                      state.model.scale, state.model.eps)


def current_lr(state: TrainState) -> float:
    cfg = state.train
    decay_at = math.ceil(cfg.epochs * 2 / 3)
    if state.warmed_up and cfg.epochs and state.epoch >= decay_at:
        return cfg.lr * 0.1
    return cfg.lr


def train_step(state: TrainState, x, labels, warmup: bool = False) -> float:
    """One forward/backward/SGD step followed by the centroid update. Mutates ``state``."""
    labels = np.asarray(labels)
    trainable = [k for k in state.params if _trainable(k, state, warmup)]
    with Tape() as tape:
        try:
            meta, logits = forward(state, x, warmup)
            loss = batch_loss(state, meta, logits, labels, warmup)
        except NonFiniteError as err:
            raise NonFiniteError(f"{err.op} (step {state.step}, epoch {state.epoch})") from None
    if not np.isfinite(loss.item()):
        raise NonFiniteError(f"loss (step {state.step})")
    grads = backward_params(tape, loss, state, trainable)
    clip = state.train.grad_clip
    if clip:
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if norm > clip:
            grads = {k: g * np.asarray(clip / norm, dtype=state.dtype) for k, g in grads.items()}
    lr = current_lr(state)
    mu = np.asarray(state.train.momentum, dtype=state.dtype)
    for name in trainable:
        grad = grads[name]
        wd = state.train.head_weight_decay if name.startswith(("hal.", "sel.")) else state.train.weight_decay
        if wd:
            grad = grad + np.asarray(wd, dtype=state.dtype) * state.params[name].data
        vel = mu * state.velocity[name] + grad
        state.velocity[name] = vel
        p = state.params[name]
        state.params[name] = Tensor(p.data - np.asarray(lr, dtype=state.dtype) * vel, requires_grad=True,
                                    dtype=p.dtype)
    if state.bank is not None:
        state.bank = update_centroids(state.bank, meta.v_direct.data, labels, state.train.centroid_rate)
    state.step += 1
    return loss.item()


def _trainable(name, state, warmup):
    if name.startswith(("hal.", "sel.")):
        return not warmup and state.model.variant == "meta"
    return True


def backward_params(tape, loss, state, names):
    tensors = [state.params[k] for k in names]
    g = ad.backward(tape, loss, tensors)
    return {k: g[t] for k, t in zip(names, tensors)}


def embed(state: TrainState, x, batch: int = 1024):
    """(v_direct, gamma, v_meta, logits) as numpy arrays, computed without recording."""
    outs = ([], [], [], [])
    with ad.no_grad():
        for i in range(0, len(x), batch):
            meta, logits = forward(state, x[i:i + batch])
            outs[0].append(meta.v_direct.data)
            outs[1].append(meta.gamma.data)
            outs[2].append(meta.v_meta.data)
            outs[3].append(logits.data)
    return tuple(np.concatenate(o) for o in outs)


def direct_features(state: TrainState, x, batch: int = 1024) -> np.ndarray:
    with ad.no_grad():
        parts = [extract_features(state.model.backbone, Tensor(np.asarray(x[i:i + batch]), dtype=state.dtype),
                                  state.params).data for i in range(0, len(x), batch)]
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# schedule

def steps_per_epoch(n_samples: int, cfg: TrainConfig) -> int:
    return max(1, math.ceil(n_samples / cfg.batch_size))


def _epoch_batches(state: TrainState, dataset: Dataset):
    cfg = state.train
    n = steps_per_epoch(len(dataset), cfg)
    if cfg.sampler == "instance":
        order = state.rng.permutation(len(dataset))
        if len(order) < n * cfg.batch_size:
            order = np.concatenate([order, state.rng.permutation(len(dataset))])
        for s in range(n):
            yield order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
    else:
        for _ in range(n):
            yield sample_neighborhood_batch(dataset, cfg.classes_per_batch, cfg.samples_per_class, state.rng,
                                            state.class_queue)


def run_epoch(state: TrainState, dataset: Dataset, warmup: bool = False) -> tuple[float, float]:
    """Returns (mean per-sample loss, batch accuracy)."""
    total, correct, seen = 0.0, 0, 0
    for idx in _epoch_batches(state, dataset):
        xb, yb = dataset.x[idx], dataset.y[idx]
        total += train_step(state, xb, yb, warmup)
        seen += len(idx)
    # accuracy over the whole training set with the updated model
    _, _, _, logits = embed(state, dataset.x)
    correct = int(np.sum(np.argmax(logits, axis=1) == dataset.y))
    return total / seen, correct / len(dataset)


def warm_up(state: TrainState, dataset: Dataset) -> TrainState:
    """Plain cross-entropy epochs (gamma fixed at 1, no memory), then centroid init."""
    for _ in range(state.train.warmup_epochs):
        run_epoch(state, dataset, warmup=True)
    feats = direct_features(state, dataset.x)
    state.bank = init_centroids(feats, dataset.y, dataset.num_known)
    state.velocity = {k: np.zeros_like(v) for k, v in state.velocity.items()}
    state.warmed_up = True
    return state


def split_accuracy(state: TrainState, dataset: Dataset, split) -> dict:
    known = ~dataset.is_open()
    _, _, _, logits = embed(state, dataset.x[known])
    pred = np.argmax(logits, axis=1)
    y = dataset.y[known]
    out = {}
    for name in ("many", "medium", "few"):
        mask = np.isin(y, sorted(getattr(split, name)))
        out[name] = float(np.mean(pred[mask] == y[mask])) if mask.any() else float("nan")
    return out


LOG_FIELDS = ("epoch", "loss", "train_acc", "many_acc", "medium_acc", "few_acc")


def train(dataset: Dataset, model: ModelConfig = None, objective: ObjectiveConfig = None,
          config: TrainConfig = None, eval_set: Dataset | None = None, state: TrainState | None = None,
          on_epoch=None):
    """Warm-up, centroid init, then ``config.epochs`` epochs. Returns (state, log rows).

    ``on_epoch(state, row)`` runs after each epoch, e.g. to write checkpoints.
    """
    config = config or TrainConfig()
    if state is None:
        state = init_state(dataset.x.shape[1:], dataset.num_known, model, objective, config)
    if not state.warmed_up:
        warm_up(state, dataset)
    split = dataset.shot_split()
    rows = []
    while state.epoch < config.epochs:
        loss, acc = run_epoch(state, dataset)
        state.epoch += 1
        accs = split_accuracy(state, eval_set if eval_set is not None else dataset, split)
        rows.append({"epoch": state.epoch, "loss": loss, "train_acc": acc, "many_acc": accs["many"],
                     "medium_acc": accs["medium"], "few_acc": accs["few"]})
        log.info("epoch %d loss %.4f acc %.3f few %.3f", state.epoch, loss, acc, accs["few"])
        if on_epoch is not None:
            on_epoch(state, rows[-1])
    return state, rows
