"""Feature extractors: an MLP for vectors, a small CNN with modulated attention for images.

Parameters are plain ``dict[str, Tensor]`` so the optimizer and checkpoint
code can treat every module the same way.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

Params = dict  # name -> Tensor


def _he(rng, fan_in, shape, dtype):
    return Tensor(rng.normal(size=shape) * np.sqrt(2.0 / fan_in), requires_grad=True, dtype=dtype)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = ad.matmul(x, w)
    return out if b is None else out + b


# ---------------------------------------------------------------------------
# MLP

def init_mlp(rng: np.random.Generator, in_dim: int, feat_dim: int = 16, hidden=(64, 64),
             dtype=np.float64) -> Params:
    dims = [in_dim, *hidden, feat_dim]
    params = {}
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]), start=1):
        params[f"mlp.w{i}"] = _he(rng, a, (a, b), dtype)
        params[f"mlp.b{i}"] = _zeros((b,), dtype)
    return params


def extract_features_mlp(x, params: Params) -> Tensor:
    """B x in_dim -> B x d direct features (two ReLU hidden layers, linear output)."""
    x = ad.as_tensor(x)
    n_layers = sum(1 for k in params if k.startswith("mlp.w"))
    if x.ndim != 2 or x.shape[1] != params["mlp.w1"].shape[0]:
        raise ShapeError("extract_features_mlp", x.shape, params["mlp.w1"].shape)
    h = x
    for i in range(1, n_layers + 1):
        h = linear(h, params[f"mlp.w{i}"], params[f"mlp.b{i}"])
        if i < n_layers:
            h = ad.relu(h)
    return h


# ---------------------------------------------------------------------------
# attention

def init_attention(rng: np.random.Generator, channels: int, dtype=np.float64) -> Params:
    if channels % 2:
        raise ValueError(f"attention needs an even channel count, got {channels}")
    half = channels // 2
    return {
        "att.theta": _he(rng, channels, (half, channels), dtype),
        "att.phi": _he(rng, channels, (half, channels), dtype),
        "att.g": _he(rng, channels, (half, channels), dtype),
        "att.out": Tensor(rng.normal(size=(channels, half)) * 0.1, requires_grad=True, dtype=dtype),
        "att.ma": Tensor(rng.normal(size=(1, channels)) * 0.1, requires_grad=True, dtype=dtype),
    }


def _check_map(f: Tensor, params: Params, op: str):
    if f.ndim != 4 or f.shape[1] != params["att.theta"].shape[1] or f.shape[1] % 2:
        raise ShapeError(op, f.shape, params["att.theta"].shape)


def attention_map(f: Tensor, params: Params) -> Tensor:
    """N x HW x HW affinities, softmax-normalized over the second position index."""
    _check_map(f, params, "self_attention")
    n, c, h, w = f.shape
    flat = ad.reshape(f, (n, c, h * w))
    theta = ad.matmul(params["att.theta"], flat)          # N x C/2 x HW
    phi = ad.matmul(params["att.phi"], flat)
    logits = ad.matmul(ad.transpose(theta, (0, 2, 1)), phi)  # N x HW x HW
    return ad.softmax(logits, axis=-1)


def self_attention(f: Tensor, params: Params) -> Tensor:
    """Non-local self-correlation block; output has the input's shape. Batched: N x C x H x W."""
    _check_map(f, params, "self_attention")
    n, c, h, w = f.shape
    a = attention_map(f, params)
    g = ad.matmul(params["att.g"], ad.reshape(f, (n, c, h * w)))   # N x C/2 x HW
    ctx = ad.matmul(g, ad.transpose(a, (0, 2, 1)))                  # y[:, :, i] = sum_j A[i, j] g[:, j]
    return ad.reshape(ad.matmul(params["att.out"], ctx), (n, c, h, w))


def modulation_map(f: Tensor, params: Params) -> Tensor:
    """N x 1 x H x W spatial weights: 1x1 conv, softmax over positions, scaled by H*W."""
    _check_map(f, params, "modulated_attention")
    n, c, h, w = f.shape
    score = ad.matmul(params["att.ma"], ad.reshape(f, (n, c, h * w)))  # N x 1 x HW
    weights = ad.scalar_mul(ad.softmax(score, axis=-1), float(h * w))
    return ad.reshape(weights, (n, 1, h, w))


def modulated_attention(f: Tensor, params: Params) -> Tensor:
    return f + modulation_map(f, params) * self_attention(f, params)


# ---------------------------------------------------------------------------
# CNN

def init_cnn(rng: np.random.Generator, in_channels: int = 1, channels: int = 8, feat_dim: int = 16,
             dtype=np.float64) -> Params:
    params = {
        "cnn.conv1.w": _he(rng, in_channels * 9, (channels, in_channels, 3, 3), dtype),
        "cnn.conv1.b": _zeros((channels,), dtype),
        "cnn.conv2.w": _he(rng, channels * 9, (channels, channels, 3, 3), dtype),
        "cnn.conv2.b": _zeros((channels,), dtype),
        "cnn.proj.w": _he(rng, channels, (channels, feat_dim), dtype),
        "cnn.proj.b": _zeros((feat_dim,), dtype),
    }
    params.update(init_attention(rng, channels, dtype))
    return params


def cnn_feature_map(images, params: Params) -> Tensor:
    x = ad.as_tensor(images)
    if x.ndim != 4 or x.shape[1] != params["cnn.conv1.w"].shape[1]:
        raise ShapeError("extract_features_cnn", x.shape, params["cnn.conv1.w"].shape)
    h = ad.relu(ad.conv2d_3x3(x, params["cnn.conv1.w"], params["cnn.conv1.b"]))
    return ad.relu(ad.conv2d_3x3(h, params["cnn.conv2.w"], params["cnn.conv2.b"]))


def extract_features_cnn(images, params: Params) -> Tensor:
    """N x C_in x H x W -> N x d; attention is applied to the last feature map only."""
    f = modulated_attention(cnn_feature_map(images, params), params)
    return linear(ad.global_avg_pool(f), params["cnn.proj.w"], params["cnn.proj.b"])


def extract_features(kind: str, x, params: Params) -> Tensor:
    if kind == "mlp":
        return extract_features_mlp(x, params)
    if kind == "cnn":
        return extract_features_cnn(x, params)
    raise ValueError(f"unknown backbone kind {kind!r}")


def init_backbone(kind: str, rng, input_shape, feat_dim: int, dtype=np.float64, hidden=(64, 64),
                  channels: int = 8) -> Params:
    if kind == "mlp":
        return init_mlp(rng, int(np.prod(input_shape)), feat_dim, hidden, dtype)
    if kind == "cnn":
        return init_cnn(rng, input_shape[0], channels, feat_dim, dtype)
    raise ValueError(f"unknown backbone kind {kind!r}")
