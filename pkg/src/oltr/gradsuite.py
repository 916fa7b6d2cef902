"""Randomized finite-difference gradient suite over every primitive and the full model pipeline."""
from __future__ import annotations

import re
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import extract_features, init_backbone, modulated_attention, init_attention
from .memory import MemoryBank, compose_meta_embedding, init_heads
from .objective import cosine_logits, cross_entropy_loss, init_classifier, large_margin_loss, squash, total_loss


@dataclass
class GradCase:
    name: str
    fn: object
    params: list


def _t(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _shape(rng, ndim=2, lo=1, hi=5):
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=ndim))


def _away_from_zero(x, gap=1e-2):
    return np.where(x >= 0, x + gap, x - gap)


def _distinct(rng, shape):
    """Values whose gaps are far above the finite-difference step."""
    n = int(np.prod(shape))
    return rng.permutation(np.linspace(-2, 2, n) + rng.uniform(0, 1e-3, n)).reshape(shape)


def _elementwise(rng, name):
    s = _shape(rng, int(rng.integers(1, 4)))
    a, b = rng.normal(size=s), rng.normal(size=s)
    r = Tensor(rng.normal(size=s))
    if name == "add":
        return lambda x, y: ad.sum(ad.add(x, y) * r), [_t(a), _t(b)]
    if name == "sub":
        return lambda x, y: ad.sum(ad.sub(x, y) * r), [_t(a), _t(b)]
    if name == "mul":
        return lambda x, y: ad.sum(ad.mul(x, y) * r), [_t(a), _t(b)]
    if name == "div":
        return lambda x, y: ad.sum(ad.div(x, y) * r), [_t(a), _t(_away_from_zero(b, 0.5))]
    if name == "broadcast_add":
        return lambda x, y: ad.sum(ad.add(x, y) * r), [_t(a), _t(rng.normal(size=s[-1:]))]
    if name == "scalar_mul":
        c = float(rng.normal())
        return lambda x: ad.sum(ad.scalar_mul(x, c) * r), [_t(a)]
    if name == "relu":
        return lambda x: ad.sum(ad.relu(x) * r), [_t(_away_from_zero(a))]
    if name == "tanh":
        return lambda x: ad.sum(ad.tanh(x) * r), [_t(a)]
    if name == "exp":
        return lambda x: ad.sum(ad.exp(x) * r), [_t(a)]
    if name == "log":
        return lambda x: ad.sum(ad.log(x) * r), [_t(np.abs(a) + 0.2)]
    if name == "clamp_min":
        return lambda x: ad.sum(ad.clamp_min(x, 0.1) * r), [_t(0.1 + _away_from_zero(a))]
    raise KeyError(name)


def _reduction(rng, name):
    s = _shape(rng, int(rng.integers(1, 4)), lo=2)
    axis = int(rng.integers(0, len(s)))
    a = rng.normal(size=s)
    reduced = Tensor(rng.normal(size=s[:axis] + s[axis + 1:]))
    full = Tensor(rng.normal(size=s))
    if name == "sum":
        return lambda x: ad.sum(ad.sum(x, axis=axis) * reduced), [_t(a)]
    if name == "mean":
        return lambda x: ad.sum(ad.mean(x, axis=axis) * reduced), [_t(a)]
    if name == "min":
        return lambda x: ad.sum(ad.min(x, axis=axis) * reduced), [_t(_distinct(rng, s))]
    if name == "l2_norm":
        return lambda x: ad.sum(ad.l2_norm(x, axis=axis) * reduced), [_t(a + 0.1)]
    if name == "softmax":
        return lambda x: ad.sum(ad.softmax(x, axis=axis) * full), [_t(a)]
    if name == "log_softmax":
        return lambda x: ad.sum(ad.log_softmax(x, axis=axis) * full), [_t(a)]
    raise KeyError(name)


def _structural(rng, name):
    if name == "matmul":
        m, k, n = _shape(rng, 3)
        r = Tensor(rng.normal(size=(m, n)))
        return lambda a, b: ad.sum(ad.matmul(a, b) * r), [_t(rng.normal(size=(m, k))), _t(rng.normal(size=(k, n)))]
    if name == "batched_matmul":
        bsz, m, k, n = _shape(rng, 4, hi=3)
        r = Tensor(rng.normal(size=(bsz, m, n)))
        return (lambda a, b: ad.sum(ad.matmul(a, b) * r),
                [_t(rng.normal(size=(bsz, m, k))), _t(rng.normal(size=(bsz, k, n)))])
    if name == "reshape":
        s = _shape(rng, 2, lo=2)
        r = Tensor(rng.normal(size=(s[0] * s[1],)))
        return lambda x: ad.sum(ad.reshape(x, (-1,)) * r), [_t(rng.normal(size=s))]
    if name == "transpose":
        s = _shape(rng, 3)
        axes = tuple(int(v) for v in rng.permutation(3))
        r = Tensor(rng.normal(size=tuple(s[i] for i in axes)))
        return lambda x: ad.sum(ad.transpose(x, axes) * r), [_t(rng.normal(size=s))]
    if name == "concat":
        s1, s2 = _shape(rng, 2), _shape(rng, 2)
        b = rng.normal(size=(s2[0], s1[1]))
        r = Tensor(rng.normal(size=(s1[0] + s2[0], s1[1])))
        return lambda x, y: ad.sum(ad.concat([x, y], axis=0) * r), [_t(rng.normal(size=s1)), _t(b)]
    if name == "global_avg_pool":
        n, c, h, w = _shape(rng, 4, hi=4)
        r = Tensor(rng.normal(size=(n, c)))
        return lambda x: ad.sum(ad.global_avg_pool(x) * r), [_t(rng.normal(size=(n, c, h, w)))]
    if name == "conv2d_3x3":
        n, cin, cout = _shape(rng, 3, hi=3)
        h, w = _shape(rng, 2, lo=3, hi=5)
        r = Tensor(rng.normal(size=(n, cout, h, w)))
        return (lambda x, k, b: ad.sum(ad.conv2d_3x3(x, k, b) * r),
                [_t(rng.normal(size=(n, cin, h, w))), _t(rng.normal(size=(cout, cin, 3, 3))),
                 _t(rng.normal(size=cout))])
    raise KeyError(name)


def _model_part(rng, name):
    b, d, k = int(rng.integers(2, 5)), int(rng.integers(2, 6)), int(rng.integers(2, 6))
    v = rng.normal(size=(b, d)) * 2
    labels = rng.integers(0, k, size=b)
    bank = MemoryBank(rng.normal(size=(k, d)) * 2)
    if name == "squash":
        r = Tensor(rng.normal(size=(b, d)))
        return lambda x: ad.sum(squash(x) * r), [_t(v)]
    if name == "cosine_logits":
        r = Tensor(rng.normal(size=(b, k)))
        return (lambda x, w: ad.sum(cosine_logits(x, w, 8.0) * r),
                [_t(v), _t(rng.normal(size=(k, d)))])
    if name == "cross_entropy":
        return lambda z: cross_entropy_loss(z, labels), [_t(rng.normal(size=(b, k)) * 3)]
    if name == "large_margin":
        m = float(rng.uniform(0, 1))
        return lambda x: large_margin_loss(x, bank, labels, margin=m), [_t(v)]
    if name == "modulated_attention":
        c = 2 * int(rng.integers(1, 3))
        n, h, w = _shape(rng, 3, lo=2, hi=3)
        p = init_attention(rng, c)
        names = sorted(p)
        r = Tensor(rng.normal(size=(n, c, h, w)))

        def fn(x, *ps):
            return ad.sum(modulated_attention(x, dict(zip(names, ps))) * r)
        return fn, [_t(rng.normal(size=(n, c, h, w)))] + [_t(p[k_].data) for k_ in names]
    if name == "meta_embedding":
        p = init_heads(rng, d, k)
        names = sorted(p)
        r = Tensor(rng.normal(size=(b, d)))

        def fn(x, *ps):
            return ad.sum(compose_meta_embedding(x, bank, dict(zip(names, ps))).v_meta * r)
        return fn, [_t(v)] + [_t(p[k_].data) for k_ in names]
    raise KeyError(name)


def _pipeline(rng, kind):
    """Backbone -> meta-embedding -> cosine classifier -> cross-entropy + margin loss, on 4 samples."""
    k, d, b = 4, 6, 4
    if kind == "mlp":
        shape = (5,)
        p = init_backbone("mlp", rng, shape, d, np.float64, hidden=(7, 6))
    else:
        shape = (1, 5, 5)
        p = init_backbone("cnn", rng, shape, d, np.float64, channels=2)
    p.update(init_heads(rng, d, k))
    p["cls.w"] = init_classifier(rng, k, d)
    # nonzero biases: with zero bias a dead first layer puts the second relu exactly on its kink
    for name in p:
        if re.search(r"\.b\d*$", name):
            p[name] = Tensor(rng.normal(size=p[name].shape) * 0.1)
    x = Tensor(rng.normal(size=(b,) + shape))
    labels = np.arange(b) % k
    with ad.no_grad():
        feats = extract_features(kind, x, p).data
    bank = MemoryBank(feats[labels] + rng.normal(size=(b, d)) * 0.5)
    names = sorted(p)

    def fn(*ps):
        params = dict(zip(names, ps))
        v = extract_features(kind, x, params)
        meta = compose_meta_embedding(v, bank, params)
        return total_loss(meta.v_meta, labels, bank, params["cls.w"])
    return fn, [_t(p[k_].data) for k_ in names]


ELEMENTWISE = ("add", "sub", "mul", "div", "broadcast_add", "scalar_mul", "relu", "tanh", "exp", "log", "clamp_min")
REDUCTIONS = ("sum", "mean", "min", "l2_norm", "softmax", "log_softmax")
STRUCTURAL = ("matmul", "batched_matmul", "reshape", "transpose", "concat", "global_avg_pool", "conv2d_3x3")
MODEL_PARTS = ("squash", "cosine_logits", "cross_entropy", "large_margin", "modulated_attention", "meta_embedding")
PIPELINES = ("pipeline_mlp", "pipeline_cnn")


def build_cases(seed: int = 0, trials_per_op: int = 4) -> list[GradCase]:
    rng = np.random.default_rng(seed)
    cases = []
    for t in range(trials_per_op):
        for name in ELEMENTWISE:
            cases.append(GradCase(name, *_elementwise(rng, name)))
        for name in REDUCTIONS:
            cases.append(GradCase(name, *_reduction(rng, name)))
        for name in STRUCTURAL:
            cases.append(GradCase(name, *_structural(rng, name)))
        for name in MODEL_PARTS:
            cases.append(GradCase(name, *_model_part(rng, name)))
        for name in PIPELINES:
            cases.append(GradCase(name, *_pipeline(rng, name.split("_")[1])))
    return cases


@dataclass
class SuiteResult:
    errors: dict           # case name -> worst relative error over its trials
    instances: int
    seconds: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values())


def run_suite(seed: int = 0, trials_per_op: int = 4, fd_step: float = 1e-5) -> SuiteResult:
    start = time.perf_counter()
    cases = build_cases(seed, trials_per_op)
    errors = {}
    for case in cases:
        err = ad.grad_check(case.fn, case.params, fd_step)
        errors[case.name] = max(errors.get(case.name, 0.0), err)
    return SuiteResult(errors, len(cases), time.perf_counter() - start)
