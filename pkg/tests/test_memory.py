import math

import numpy as np
import pytest

from oltr import autodiff as ad
from oltr.autodiff import ShapeError, Tensor
from oltr.memory import (
    MemoryBank,
    centroid_distances,
    compose_meta_embedding,
    grow_hallucination_head,
    hallucinate,
    init_centroids,
    init_heads,
    reachability,
    select_concepts,
    update_centroids,
)


def scalar_update(centroids, feats, labels, rate):
    """Centroid update written with explicit loops over classes, samples and coordinates."""
    out = [list(map(float, c)) for c in centroids]
    for i in range(len(centroids)):
        members = [b for b in range(len(labels)) if labels[b] == i]
        for j in range(len(centroids[i])):
            s = 0.0
            for b in members:
                s += centroids[i][j] - feats[b][j]
            delta = s / (1 + len(members))
            out[i][j] = centroids[i][j] - rate * delta
    return out


def scalar_min_distance(v, centroids):
    best = math.inf
    for c in centroids:
        best = min(best, math.sqrt(sum((a - b) ** 2 for a, b in zip(v, c))))
    return best


def heads(d, k, **fixed):
    p = {name: Tensor(np.zeros(shape)) for name, shape in
         (("hal.w", (d, k)), ("hal.b", (k,)), ("sel.w", (d, d)), ("sel.b", (d,)))}
    p.update({name: Tensor(np.asarray(v, dtype=float)) for name, v in fixed.items()})
    return p


# -- init --------------------------------------------------------------------

def test_init_centroid_is_class_mean():
    bank = init_centroids([[0.0, 0.0], [2.0, 2.0], [5.0, 1.0]], [0, 0, 1], 2)
    np.testing.assert_array_equal(bank.centroids, [[1.0, 1.0], [5.0, 1.0]])
    assert bank.num_classes == 2


def test_init_centroids_lists_missing_classes():
    with pytest.raises(ValueError, match=r"\[1, 3\]"):
        init_centroids(np.zeros((2, 2)), [0, 2], 4)


# -- update ------------------------------------------------------------------

def test_update_hand_example():
    bank = update_centroids(MemoryBank([[1.0, 0.0]]), [[0.0, 0.0], [2.0, 2.0]], [0, 0], 0.5)
    np.testing.assert_allclose(bank.centroids, [[1.0, 1 / 3]], rtol=0, atol=1e-15)


def test_absent_class_and_coincident_features_leave_centroid_unchanged():
    c = np.array([[1.0, 2.0], [3.0, 4.0]])
    bank = update_centroids(MemoryBank(c), [[3.0, 4.0], [3.0, 4.0]], [1, 1], 0.5)
    np.testing.assert_array_equal(bank.centroids, c)


def test_update_rejects_out_of_range_label():
    with pytest.raises(ValueError):
        update_centroids(MemoryBank(np.zeros((2, 2))), [[0.0, 0.0]], [2])


def test_update_matches_scalar_oracle_over_random_trials():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        k, d, b = rng.integers(1, 6), rng.integers(1, 5), rng.integers(0, 9)
        c = rng.normal(size=(k, d)) * 3
        x = rng.normal(size=(b, d)) * 3
        y = rng.integers(0, k, size=b)
        rate = rng.uniform()
        got = update_centroids(MemoryBank(c), x, y, rate).centroids
        np.testing.assert_allclose(got, scalar_update(c, x, y, rate), rtol=0, atol=1e-9)


# -- reachability ------------------------------------------------------------

@pytest.mark.parametrize("v,expected", [([1.0, 0.0], 1.0), ([4.0, 0.0], 0.0), ([4.0, 3.0], 3.0)])
def test_reachability_examples(v, expected):
    bank = MemoryBank([[0.0, 0.0], [4.0, 0.0]])
    assert reachability(Tensor(v), bank).item() == pytest.approx(expected)


def test_reachability_matches_brute_force_min():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        k, d, b = rng.integers(1, 7), rng.integers(1, 6), rng.integers(1, 4)
        c = rng.normal(size=(k, d)) * 2
        v = rng.normal(size=(b, d)) * 2
        got = reachability(Tensor(v), MemoryBank(c)).data
        want = [scalar_min_distance(row, c) for row in v]
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-9)


def test_distance_dim_mismatch():
    with pytest.raises(ShapeError):
        centroid_distances(Tensor(np.zeros((1, 3))), MemoryBank(np.zeros((2, 2))))


def test_centroids_receive_no_gradient():
    rng = np.random.default_rng(2)
    bank = MemoryBank(rng.normal(size=(3, 2)))
    p = init_heads(rng, 2, 3)
    v = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    with ad.Tape() as tape:
        ad.sum(compose_meta_embedding(v, bank, p).v_meta)
    outputs = {id(node.out) for node in tape.nodes}
    leaves = {id(t) for node in tape.nodes for t in node.inputs if t.requires_grad and id(t) not in outputs}
    assert leaves == {id(v)} | {id(t) for t in p.values()}


# -- meta-embedding ----------------------------------------------------------

def test_memory_feature_is_linear_combination_of_centroids():
    bank = MemoryBank([[1.0, 0.0], [0.0, 1.0]])
    p = heads(2, 2, **{"hal.b": [0.3, 0.7]})
    meta = compose_meta_embedding(Tensor([[0.5, 0.5]]), bank, p, coefficients="affine")
    np.testing.assert_allclose(meta.v_memory.data, [[0.3, 0.7]])


def test_zero_affine_head_leaves_direct_feature_over_gamma():
    bank = MemoryBank([[0.0, 0.0], [4.0, 0.0]])
    v = Tensor([[4.0, 3.0]])
    meta = compose_meta_embedding(v, bank, heads(2, 2), coefficients="affine")
    np.testing.assert_array_equal(meta.o.data, 0.0)
    np.testing.assert_array_equal(meta.v_memory.data, 0.0)
    np.testing.assert_allclose(meta.v_meta.data, v.data / 3.0)


def test_zero_softmax_head_averages_centroids():
    bank = MemoryBank([[0.0, 0.0], [4.0, 0.0]])
    meta = compose_meta_embedding(Tensor([[4.0, 3.0]]), bank, heads(2, 2))
    np.testing.assert_allclose(meta.o.data, [[0.5, 0.5]])
    np.testing.assert_allclose(meta.v_memory.data, [[2.0, 0.0]])


def test_meta_embedding_arithmetic():
    # v=[2,0], v_memory=[0,2], e=[1,0.5], gamma=2 -> [1, 0.5]
    bank = MemoryBank([[0.0, 2.0], [4.0, 0.0]])
    p = heads(2, 2, **{"hal.b": [1.0, 0.0], "sel.b": [40.0, math.atanh(0.5)]})
    meta = compose_meta_embedding(Tensor([[2.0, 0.0]]), bank, p, coefficients="affine")
    assert meta.gamma.item() == pytest.approx(2.0)
    np.testing.assert_allclose(meta.e.data, [[1.0, 0.5]])
    np.testing.assert_allclose(meta.v_meta.data, [[1.0, 0.5]], atol=1e-15)


def test_eps_guards_zero_gamma():
    bank = MemoryBank([[1.0, 1.0], [3.0, 0.0]])
    meta = compose_meta_embedding(Tensor([[1.0, 1.0]]), bank, heads(2, 2), eps=1e-6, coefficients="affine")
    np.testing.assert_allclose(meta.v_meta.data, [[1e6, 1e6]])


def test_selector_stays_inside_open_interval():
    rng = np.random.default_rng(3)
    for _ in range(200):
        d = int(rng.integers(1, 8))
        p = init_heads(rng, d, 3)
        e = select_concepts(Tensor(rng.normal(size=(5, d)) * 3), p).data
        assert np.all(np.abs(e) < 1)


def test_doubling_gamma_halves_meta_embedding():
    rng = np.random.default_rng(4)
    bank = MemoryBank(rng.normal(size=(4, 3)))
    p = init_heads(rng, 3, 4)
    v = Tensor(rng.normal(size=(6, 3)))
    one = compose_meta_embedding(v, bank, p, fixed_gamma=1.7).v_meta.data
    two = compose_meta_embedding(v, bank, p, fixed_gamma=3.4).v_meta.data
    np.testing.assert_allclose(two, one / 2, rtol=1e-15)


@pytest.mark.parametrize("far", [1e3, 1e6])
def test_far_samples_are_damped(far):
    rng = np.random.default_rng(5)
    bank = MemoryBank(rng.normal(size=(3, 4)))
    p = init_heads(rng, 4, 3)
    near = Tensor(rng.normal(size=(1, 4)))
    direction = near.data / np.linalg.norm(near.data)
    v = Tensor(direction * far)
    meta = compose_meta_embedding(v, bank, p)
    # numerator grows like |v| + |centroid|, gamma like |v| - |centroid|: the ratio stays bounded
    assert meta.gamma.item() > far - 5
    size = np.linalg.norm(meta.v_meta.data)
    assert size < 2.5
    # with no memory term and a fixed numerator the embedding vanishes as gamma grows
    damped = compose_meta_embedding(near, bank, p, use_memory=False, fixed_gamma=far).v_meta.data
    assert np.linalg.norm(damped) == pytest.approx(np.linalg.norm(near.data) / far)


def test_hallucination_head_grows_with_zero_columns():
    rng = np.random.default_rng(6)
    p = init_heads(rng, 3, 2)
    grown = grow_hallucination_head(p, 4)
    assert grown["hal.w"].shape == (3, 4) and grown["hal.b"].shape == (4,)
    np.testing.assert_array_equal(grown["hal.w"].data[:, :2], p["hal.w"].data)
    np.testing.assert_array_equal(grown["hal.w"].data[:, 2:], 0.0)
    with pytest.raises(ValueError):
        grow_hallucination_head(p, 1)


def test_unknown_coefficient_mode():
    with pytest.raises(ValueError):
        hallucinate(Tensor(np.zeros((1, 2))), heads(2, 2), "sigmoid")


def test_head_width_must_match_bank():
    with pytest.raises(ShapeError):
        compose_meta_embedding(Tensor(np.zeros((1, 2))), MemoryBank(np.ones((3, 2))), heads(2, 2))
