"""Squashing normalization, cosine classifier and the combined training loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .memory import DEFAULT_EPS, MemoryBank, centroid_distances

DEFAULT_SCALE = 8.0


@dataclass(frozen=True)
class ObjectiveConfig:
    lam: float = 0.1
    margin: float = 5.0

    def __post_init__(self):
        if self.lam < 0 or self.margin < 0:
            raise ValueError(f"lambda and margin must be non-negative, got {self.lam}, {self.margin}")


def squash(v, eps: float = DEFAULT_EPS) -> Tensor:
    """(|v|^2 / (1 + |v|^2)) * v / max(|v|, eps), row-wise for 2-D input."""
    v = ad.as_tensor(v)
    n = ad.l2_norm(v, axis=-1, keepdims=True)
    n2 = n * n
    return v * (n2 / (n2 + 1.0)) / ad.clamp_min(n, eps)


def init_classifier(rng: np.random.Generator, num_classes: int, feat_dim: int, dtype=np.float64) -> Tensor:
    w = rng.normal(size=(num_classes, feat_dim))
    return Tensor(w / np.linalg.norm(w, axis=1, keepdims=True), requires_grad=True, dtype=dtype)


def normalize_weights(weights: Tensor) -> Tensor:
    norms = np.linalg.norm(weights.data, axis=-1)
    bad = np.flatnonzero(norms == 0)
    if bad.size:
        raise ValueError(f"cosine classifier weight vectors {bad.tolist()} have zero norm")
    return weights / ad.l2_norm(weights, axis=-1, keepdims=True)


def cosine_logits(v_meta, weights: Tensor, scale: float = DEFAULT_SCALE, eps: float = DEFAULT_EPS) -> Tensor:
    """scale * <squash(v_meta), w_k / |w_k|>; B x d against K x d gives B x K."""
    v = ad.as_tensor(v_meta)
    if v.shape[-1] != weights.shape[-1]:
        raise ShapeError("cosine_logits", v.shape, weights.shape)
    single = v.ndim == 1
    if single:
        v = ad.reshape(v, (1, -1))
    out = ad.scalar_mul(ad.matmul(squash(v, eps), ad.transpose(normalize_weights(weights))), scale)
    return ad.reshape(out, (weights.shape[0],)) if single else out


def _check_labels(labels, k, op):
    labels = np.atleast_1d(np.asarray(labels))
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"{op}: labels must lie in 0..{k - 1}")
    return labels


def _onehot(labels, k, dtype):
    return Tensor((labels[:, None] == np.arange(k)[None, :]).astype(dtype), dtype=dtype)


def cross_entropy_loss(logits, labels) -> Tensor:
    """Summed softmax cross-entropy -log p[label]; accepts one logit row or a batch."""
    logits = ad.as_tensor(logits)
    if logits.ndim == 1:
        logits = ad.reshape(logits, (1, -1))
    labels = _check_labels(labels, logits.shape[1], "cross_entropy_loss")
    if len(labels) != logits.shape[0]:
        raise ShapeError("cross_entropy_loss", logits.shape, labels.shape)
    return -ad.sum(ad.log_softmax(logits, axis=-1) * _onehot(labels, logits.shape[1], logits.dtype))


def large_margin_loss(v_meta, bank: MemoryBank, labels, margin: float = 5.0) -> Tensor:
    """Summed hinge max(0, |v - c_y| - sum_{i != y} |v - c_i| + m)."""
    v = ad.as_tensor(v_meta)
    if v.ndim == 1:
        v = ad.reshape(v, (1, -1))
    k = bank.num_classes
    labels = _check_labels(labels, k, "large_margin_loss")
    d = centroid_distances(v, bank)                      # B x K
    # +1 on the own-class distance, -1 on every other
    sign = 2.0 * (labels[:, None] == np.arange(k)[None, :]) - 1.0
    arg = ad.sum(d * Tensor(sign, dtype=v.dtype), axis=-1) + margin
    return ad.sum(ad.relu(arg))


def total_loss(v_meta, labels, bank: MemoryBank, weights: Tensor, config: ObjectiveConfig = ObjectiveConfig(),
               scale: float = DEFAULT_SCALE, eps: float = DEFAULT_EPS) -> Tensor:
    """sum_n CE_n + lambda * sum_n LM_n."""
    if len(np.atleast_1d(labels)) == 0:
        raise ValueError("total_loss: empty batch")
    ce = cross_entropy_loss(cosine_logits(v_meta, weights, scale, eps), labels)
    if config.lam == 0:
        return ce
    return ce + ad.scalar_mul(large_margin_loss(v_meta, bank, labels, config.margin), config.lam)
