"""Active exploration of open classes: uncertainty scoring, selection, annotation and model growth."""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .datagen import Dataset
from .memory import MemoryBank, grow_hallucination_head
from .objective import cosine_logits, cross_entropy_loss, squash
from .training import TrainState, direct_features, embed

DEFAULT_TEMPERATURE = 1.0
FINETUNE_EPOCHS = 10
FINETUNE_LR = 0.01


@dataclass
class UncertaintyRecord:
    u_open: np.ndarray
    u_info: np.ndarray
    energy: np.ndarray
    score: np.ndarray


def compute_uncertainties(v_direct, bank: MemoryBank, temperature: float = DEFAULT_TEMPERATURE) -> UncertaintyRecord:
    """Openness (nearest-centroid distance), informativeness (d1/d2) and the free energy.

    ``energy`` is evaluated exactly as written, -T log sum_i exp(u_open*u_info/T);
    its summand does not depend on i, so it is a decreasing function of ``score``.
    """
    k = bank.num_classes
    if k < 2:
        raise ValueError(f"informativeness needs at least 2 centroids, bank has {k}")
    v = np.atleast_2d(np.asarray(v_direct, dtype=np.float64))
    c = bank.centroids.astype(np.float64)
    dist = np.linalg.norm(v[:, None, :] - c[None, :, :], axis=-1)
    d = np.sort(dist, axis=1)
    d1, d2 = d[:, 0], d[:, 1]
    u_info = np.divide(d1, d2, out=np.ones_like(d1), where=d2 > 0)
    score = d1 * u_info
    terms = np.repeat((score / temperature)[:, None], k, axis=1)
    top = terms.max(axis=1)
    energy = -temperature * (top + np.log(np.sum(np.exp(terms - top[:, None]), axis=1)))
    return UncertaintyRecord(d1, u_info, energy, score)


def select_for_annotation(scores, budget_fraction: float) -> np.ndarray:
    """Indices of the ceil(budget * n) highest scores; ties go to the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("cannot select from an empty pool")
    if not 0 < budget_fraction <= 1:
        raise ValueError(f"budget fraction must lie in (0, 1], got {budget_fraction}")
    k = math.ceil(budget_fraction * scores.size - 1e-9)
    order = np.lexsort((np.arange(scores.size), -scores))
    return np.sort(order[:k])


def select_random(n: int, budget_fraction: float, rng: np.random.Generator) -> np.ndarray:
    k = math.ceil(budget_fraction * n - 1e-9)
    return np.sort(rng.choice(n, size=k, replace=False))


class Oracle(Protocol):
    def query(self, index: int) -> str: ...


class LabelOracle:
    """Simulated annotator: looks up hidden labels and names each class consistently."""

    def __init__(self, hidden_labels):
        self._labels = np.asarray(hidden_labels)
        self.queries = 0

    @staticmethod
    def token_for(label: int) -> str:
        return f"class-{int(label)}"

    def query(self, index: int) -> str:
        self.queries += 1
        return self.token_for(self._labels[index])


def hallucinate_class_weights(v_meta, scores, temperature: float = DEFAULT_TEMPERATURE) -> np.ndarray:
    """Unit-normalized softmax(score / T)-weighted mean of squashed meta-embeddings."""
    v_meta = np.atleast_2d(np.asarray(v_meta, dtype=np.float64))
    scores = np.atleast_1d(np.asarray(scores, dtype=np.float64))
    if len(v_meta) == 0:
        raise ValueError("cannot hallucinate weights for a class with no annotated samples")
    z = scores / temperature
    w = np.exp(z - z.max())
    w /= w.sum()
    with ad.no_grad():
        sq = squash(Tensor(v_meta)).data
    out = w @ sq
    norm = np.linalg.norm(out)
    if norm == 0:
        raise ValueError("hallucinated weight vector has zero norm")
    return out / norm


@dataclass
class Annotation:
    x: np.ndarray        # inputs of the annotated samples
    tokens: list         # oracle labels, one per sample
    scores: np.ndarray   # selection scores (u_open * u_info) at selection time


@dataclass
class LoopState:
    model: TrainState
    token_to_index: dict
    stage_new: list = field(default_factory=list)   # new classes accepted per stage
    queries: int = 0

    @property
    def width(self) -> int:
        return self.model.num_classes


def _known_tokens(k):
    return {LabelOracle.token_for(i): i for i in range(k)}


def update_model_with_annotations(state: TrainState, annotation: Annotation, token_to_index: dict,
                                  temperature: float = DEFAULT_TEMPERATURE, epochs: int = FINETUNE_EPOCHS,
                                  lr: float = FINETUNE_LR) -> list[str]:
    """Grow classifier and memory for newly named classes, then fine-tune the classifier.

    The backbone is frozen.  Mutates ``state`` and ``token_to_index``; returns
    the new tokens in the order their classes were appended.
    """
    for t in annotation.tokens:
        if not isinstance(t, str):
            raise TypeError(f"annotation tokens must be strings, got {type(t).__name__}")
    new_tokens = []
    for t in annotation.tokens:
        if t not in token_to_index and t not in new_tokens:
            new_tokens.append(t)
    tokens = np.array(annotation.tokens, dtype=object)
    dtype = state.dtype

    if new_tokens:
        feats = direct_features(state, annotation.x).astype(np.float64)
        state.bank = state.bank.grow([feats[tokens == t].mean(axis=0) for t in new_tokens])
        state.params = grow_hallucination_head(state.params, state.bank.num_classes)
        for t in new_tokens:
            token_to_index[t] = len(token_to_index)
        _, _, v_meta, _ = embed(state, annotation.x)
        new_w = [hallucinate_class_weights(v_meta[tokens == t], annotation.scores[tokens == t], temperature)
                 for t in new_tokens]
        w = state.params["cls.w"]
        state.params["cls.w"] = Tensor(np.concatenate([w.data, np.asarray(new_w, dtype=w.dtype)]),
                                       requires_grad=True, dtype=w.dtype)
        for name in ("cls.w", "hal.w", "hal.b"):
            state.velocity[name] = np.zeros_like(state.params[name].data)

    if epochs and len(annotation.tokens):
        _, _, v_meta, _ = embed(state, annotation.x)
        v = Tensor(v_meta, dtype=dtype)
        labels = np.array([token_to_index[t] for t in annotation.tokens])
        for _ in range(epochs):
            w = state.params["cls.w"]
            with Tape() as tape:
                loss = cross_entropy_loss(cosine_logits(v, w, state.model.scale, state.model.eps), labels)
            g = ad.backward(tape, loss, [w])[w]
            state.params["cls.w"] = Tensor(w.data - np.asarray(lr, dtype=dtype) * g, requires_grad=True,
                                           dtype=w.dtype)
    return new_tokens


LOOP_FIELDS = ("stage", "budget_used", "known_acc", "unknown_acc", "classifier_width")


def evaluate_loop(state: TrainState, token_to_index: dict, eval_set: Dataset) -> tuple[float, float]:
    """Known and unknown accuracy, classifying over every label the model currently has."""
    index_to_token = {i: t for t, i in token_to_index.items()}
    _, _, _, logits = embed(state, eval_set.x)
    pred = np.argmax(logits, axis=1)
    pred_tokens = np.array([index_to_token[int(p)] for p in pred], dtype=object)
    truth = np.array([LabelOracle.token_for(y) for y in eval_set.y], dtype=object)
    hit = pred_tokens == truth
    known = ~eval_set.is_open()
    known_acc = float(hit[known].mean()) if known.any() else float("nan")
    unknown_acc = float(hit[~known].mean()) if (~known).any() else float("nan")
    return known_acc, unknown_acc


def run_dynamic_loop(state: TrainState, pools: list[Dataset], eval_set: Dataset, budget: float = 0.1,
                     temperature: float = DEFAULT_TEMPERATURE, policy: str = "score",
                     rng: np.random.Generator | None = None, finetune_epochs: int = FINETUNE_EPOCHS,
                     finetune_lr: float = FINETUNE_LR):
    """Score -> select -> annotate -> update, once per pool.

    Returns ``(final_state, rows)``; row 0 is the pre-loop evaluation.  The
    input state is not modified.
    """
    if policy not in ("score", "random"):
        raise ValueError(f"unknown selection policy {policy!r}")
    if not 0 <= budget <= 1:
        raise ValueError(f"budget must lie in [0, 1], got {budget}")
    rng = rng if rng is not None else np.random.default_rng(0)
    state = copy.deepcopy(state)
    loop = LoopState(state, _known_tokens(state.num_classes))
    known_acc, unknown_acc = evaluate_loop(state, loop.token_to_index, eval_set)
    rows = [dict(stage=0, budget_used=0, known_acc=known_acc, unknown_acc=unknown_acc,
                 classifier_width=state.num_classes)]
    for s, pool in enumerate(pools, start=1):
        used = 0
        new = []
        if budget > 0:
            if policy == "score":
                feats = direct_features(state, pool.x)
                rec = compute_uncertainties(feats, state.bank, temperature)
                chosen = select_for_annotation(rec.score, budget)
                scores = rec.score[chosen]
            else:
                chosen = select_random(len(pool), budget, rng)
                feats = direct_features(state, pool.x[chosen])
                scores = compute_uncertainties(feats, state.bank, temperature).score
            oracle = LabelOracle(pool.y)
            tokens = [oracle.query(int(i)) for i in chosen]
            used = oracle.queries
            if used > math.ceil(budget * len(pool) - 1e-9):
                raise RuntimeError(f"stage {s}: {used} queries exceed the annotation budget")
            new = update_model_with_annotations(state, Annotation(pool.x[chosen], tokens, scores),
                                                loop.token_to_index, temperature, finetune_epochs, finetune_lr)
        loop.queries += used
        loop.stage_new.append(len(new))
        known_acc, unknown_acc = evaluate_loop(state, loop.token_to_index, eval_set)
        rows.append(dict(stage=s, budget_used=used, known_acc=known_acc, unknown_acc=unknown_acc,
                         classifier_width=state.num_classes))
    return state, rows
