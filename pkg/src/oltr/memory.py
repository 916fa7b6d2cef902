"""Visual memory of class centroids and the dynamic meta-embedding built on it."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

DEFAULT_EPS = 1e-12


@dataclass
class MemoryBank:
    """One centroid per known class; row i belongs to label i."""

    centroids: np.ndarray  # K x d

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids)
        if self.centroids.ndim != 2 or len(self.centroids) < 1:
            raise ValueError(f"memory bank needs a K x d centroid matrix with K >= 1, got {self.centroids.shape}")
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("memory bank centroids must be finite")

    @property
    def num_classes(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def grow(self, new_centroids) -> "MemoryBank":
        new_centroids = np.asarray(new_centroids, dtype=self.centroids.dtype).reshape(-1, self.dim)
        return MemoryBank(np.concatenate([self.centroids, new_centroids]))

    def as_tensor(self) -> Tensor:
        return Tensor(self.centroids, dtype=self.centroids.dtype)


def init_centroids(features, labels, num_classes: int) -> MemoryBank:
    features = np.asarray(features)
    labels = np.asarray(labels)
    missing = [k for k in range(num_classes) if not np.any(labels == k)]
    if missing:
        raise ValueError(f"cannot initialize centroids: no features for classes {missing}")
    return MemoryBank(np.stack([features[labels == k].mean(axis=0) for k in range(num_classes)]))


def update_centroids(bank: MemoryBank, features, labels, rate: float = 0.5) -> MemoryBank:
    """Move each centroid toward its batch members.

    delta_i = sum_b [y_b = i] (c_i - x_b) / (1 + sum_b [y_b = i]),  c_i <- c_i - rate * delta_i
    """
    features = np.asarray(features, dtype=bank.centroids.dtype)
    labels = np.asarray(labels)
    k = bank.num_classes
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"centroid update: labels must lie in 0..{k - 1}, got range {labels.min()}..{labels.max()}")
    onehot = (labels[:, None] == np.arange(k)[None, :]).astype(bank.centroids.dtype)  # B x K
    counts = onehot.sum(axis=0)
    diff_sum = counts[:, None] * bank.centroids - onehot.T @ features
    delta = diff_sum / (1.0 + counts)[:, None]
    return MemoryBank(bank.centroids - rate * delta)


def centroid_distances(v, bank: MemoryBank) -> Tensor:
    """B x K Euclidean distances; centroids enter as constants."""
    v = ad.as_tensor(v)
    single = v.ndim == 1
    if single:
        v = ad.reshape(v, (1, -1))
    if v.shape[1] != bank.dim:
        raise ShapeError("centroid_distances", v.shape, bank.centroids.shape)
    c = Tensor(bank.centroids[None], dtype=v.dtype)
    d = ad.l2_norm(ad.reshape(v, (v.shape[0], 1, v.shape[1])) - c, axis=-1)
    return ad.reshape(d, (bank.num_classes,)) if single else d


def reachability(v, bank: MemoryBank) -> Tensor:
    """gamma = min_i ||v - c_i||, per row for a batch."""
    if bank.num_classes < 1:
        raise ValueError("reachability of an empty memory bank")
    return ad.min(centroid_distances(v, bank), axis=-1)


# ---------------------------------------------------------------------------
# heads

def init_heads(rng: np.random.Generator, feat_dim: int, num_classes: int, dtype=np.float64) -> dict:
    scale = 1.0 / np.sqrt(feat_dim)
    return {
        "hal.w": Tensor(rng.normal(size=(feat_dim, num_classes)) * scale, requires_grad=True, dtype=dtype),
        "hal.b": Tensor(np.zeros(num_classes), requires_grad=True, dtype=dtype),
        "sel.w": Tensor(rng.normal(size=(feat_dim, feat_dim)) * scale, requires_grad=True, dtype=dtype),
        "sel.b": Tensor(np.zeros(feat_dim), requires_grad=True, dtype=dtype),
    }


def grow_hallucination_head(params: dict, num_classes: int) -> dict:
    """Widen the hallucination head to ``num_classes`` outputs; new columns start at zero."""
    w, b = params["hal.w"], params["hal.b"]
    extra = num_classes - w.shape[1]
    if extra < 0:
        raise ValueError(f"cannot shrink hallucination head from {w.shape[1]} to {num_classes}")
    out = dict(params)
    out["hal.w"] = Tensor(np.concatenate([w.data, np.zeros((w.shape[0], extra), w.dtype)], axis=1),
                          requires_grad=True, dtype=w.dtype)
    out["hal.b"] = Tensor(np.concatenate([b.data, np.zeros(extra, b.dtype)]), requires_grad=True, dtype=b.dtype)
    return out


COEFFICIENT_MODES = ("softmax", "affine")


def hallucinate(v_direct: Tensor, params: dict, mode: str = "softmax") -> Tensor:
    """Memory coefficients o from an affine map of the direct feature.

    ``softmax`` normalizes them so v_memory stays in the centroid hull;
    ``affine`` returns the raw map.
    """
    z = ad.matmul(v_direct, params["hal.w"]) + params["hal.b"]
    if mode == "softmax":
        return ad.softmax(z, axis=-1)
    if mode == "affine":
        return z
    raise ValueError(f"unknown coefficient mode {mode!r}; expected one of {COEFFICIENT_MODES}")


def select_concepts(v_direct: Tensor, params: dict) -> Tensor:
    return ad.tanh(ad.matmul(v_direct, params["sel.w"]) + params["sel.b"])


@dataclass
class MetaEmbedding:
    v_direct: Tensor
    o: Tensor | None
    v_memory: Tensor | None
    e: Tensor | None
    gamma: Tensor
    v_meta: Tensor


def compose_meta_embedding(v_direct, bank: MemoryBank, params: dict, eps: float = DEFAULT_EPS,
                           use_memory: bool = True, fixed_gamma: float | None = None,
                           coefficients: str = "softmax") -> MetaEmbedding:
    """v_meta = (v_direct + e * v_memory) / max(gamma, eps) for a B x d batch.

    ``use_memory=False`` drops the memory term and ``fixed_gamma`` replaces
    reachability by a constant; the warm-up phase uses both.
    """
    v = ad.as_tensor(v_direct)
    if v.ndim != 2:
        raise ShapeError("compose_meta_embedding", v.shape)
    o = v_memory = e = None
    numer = v
    if use_memory:
        if params["hal.w"].shape[1] != bank.num_classes:
            raise ShapeError("compose_meta_embedding", params["hal.w"].shape, bank.centroids.shape)
        o = hallucinate(v, params, coefficients)
        v_memory = ad.matmul(o, Tensor(bank.centroids, dtype=v.dtype))
        e = select_concepts(v, params)
        numer = v + e * v_memory
    if fixed_gamma is None:
        gamma = reachability(v, bank)
    else:
        gamma = Tensor(np.full(v.shape[0], fixed_gamma), dtype=v.dtype)
    scale = ad.clamp_min(gamma, eps)
    v_meta = numer / ad.reshape(scale, (v.shape[0], 1))
    return MetaEmbedding(v, o, v_memory, e, gamma, v_meta)
