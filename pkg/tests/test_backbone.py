import numpy as np
import pytest

from oltr import autodiff as ad
from oltr.autodiff import ShapeError, Tensor
from oltr.backbone import (
    attention_map,
    cnn_feature_map,
    extract_features,
    extract_features_cnn,
    extract_features_mlp,
    init_attention,
    init_backbone,
    init_cnn,
    init_mlp,
    modulation_map,
    modulated_attention,
    self_attention,
)


def as_params(p):
    return {k: Tensor(v.data, requires_grad=True) for k, v in p.items()}


def zeroed(p, *names):
    out = dict(p)
    for n in names:
        out[n] = Tensor(np.zeros(p[n].shape), requires_grad=True)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def test_mlp_zero_weights_give_zero_features(rng):
    p = init_mlp(rng, 5, 3)
    p = zeroed(p, *p)
    out = extract_features_mlp(Tensor(rng.normal(size=(4, 5))), p)
    np.testing.assert_array_equal(out.data, np.zeros((4, 3)))


@pytest.mark.parametrize("batch", [1, 7])
def test_mlp_output_dim(rng, batch):
    p = init_mlp(rng, 5, 16)
    assert extract_features_mlp(Tensor(rng.normal(size=(batch, 5))), p).shape == (batch, 16)


def test_mlp_rejects_wrong_input_dim(rng):
    with pytest.raises(ShapeError):
        extract_features_mlp(Tensor(np.ones((2, 4))), init_mlp(rng, 5, 3))


def test_mlp_grad_check(rng):
    p = as_params(init_mlp(rng, 4, 3, hidden=(6, 5)))
    for k in p:
        if ".b" in k:
            p[k] = Tensor(rng.normal(size=p[k].shape) * 0.1, requires_grad=True)
    x = Tensor(rng.normal(size=(3, 4)))
    r = Tensor(rng.normal(size=(3, 3)))
    names = sorted(p)

    def fn(*ps):
        return ad.sum(extract_features_mlp(x, dict(zip(names, ps))) * r)
    assert ad.grad_check(fn, [p[k] for k in names]) <= 1e-4


def test_zero_g_projection_silences_self_attention(rng):
    p = zeroed(init_attention(rng, 4), "att.g")
    f = Tensor(rng.normal(size=(2, 4, 3, 3)))
    np.testing.assert_array_equal(self_attention(f, p).data, 0.0)
    np.testing.assert_array_equal(modulated_attention(f, p).data, f.data)


def test_attention_rows_sum_to_one_and_are_nonnegative(rng):
    a = attention_map(Tensor(rng.normal(size=(2, 6, 4, 5))), init_attention(rng, 6)).data
    assert a.shape == (2, 20, 20)
    assert a.min() >= 0
    np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-6)


def test_constant_input_gives_uniform_attention(rng):
    p = init_attention(rng, 4)
    f = Tensor(np.ones((1, 4, 3, 3)) * 0.7)
    np.testing.assert_allclose(attention_map(f, p).data, 1 / 9)
    out = self_attention(f, p).data.reshape(4, 9)
    np.testing.assert_allclose(out, out[:, :1].repeat(9, axis=1))


def test_uniform_modulation_reduces_to_skip_plus_attention(rng):
    p = zeroed(init_attention(rng, 4), "att.ma")  # constant scores -> uniform softmax -> weight 1
    f = Tensor(rng.normal(size=(2, 4, 3, 5)))
    ma = modulation_map(f, p).data
    np.testing.assert_allclose(ma, 1.0)
    np.testing.assert_allclose(modulated_attention(f, p).data, f.data + self_attention(f, p).data, atol=1e-12)


def test_modulation_map_weights_average_to_one(rng):
    p = init_attention(rng, 4)
    ma = modulation_map(Tensor(rng.normal(size=(3, 4, 4, 4))), p).data
    assert ma.shape == (3, 1, 4, 4)
    assert ma.min() >= 0
    np.testing.assert_allclose(ma.mean(axis=(1, 2, 3)), 1.0)


@pytest.mark.parametrize("c,h,w", [(2, 1, 1), (4, 3, 5), (6, 2, 7)])
def test_modulated_attention_preserves_shape(rng, c, h, w):
    f = Tensor(rng.normal(size=(2, c, h, w)))
    assert modulated_attention(f, init_attention(rng, c)).shape == f.shape


def test_odd_channel_count_rejected(rng):
    with pytest.raises(ValueError):
        init_attention(rng, 3)


def test_cnn_shapes(rng):
    p = init_cnn(rng, 1, 8, 16)
    x = Tensor(rng.uniform(size=(2, 1, 16, 16)))
    assert cnn_feature_map(x, p).shape == (2, 8, 16, 16)
    assert extract_features_cnn(x, p).shape == (2, 16)


def test_cnn_identical_images_identical_features(rng):
    p = init_cnn(rng, 1, 4, 6)
    img = rng.uniform(size=(1, 1, 8, 8))
    out = extract_features_cnn(Tensor(np.concatenate([img, img])), p).data
    assert out[0].tobytes() == out[1].tobytes()


def test_cnn_pipeline_grad_check_on_two_images(rng):
    p = as_params(init_cnn(rng, 1, 2, 3))
    for k in p:
        if k.endswith(".b"):
            p[k] = Tensor(rng.normal(size=p[k].shape) * 0.1, requires_grad=True)
    x = Tensor(rng.uniform(size=(2, 1, 5, 5)))
    r = Tensor(rng.normal(size=(2, 3)))
    names = sorted(p)

    def fn(*ps):
        return ad.sum(extract_features_cnn(x, dict(zip(names, ps))) * r)
    assert ad.grad_check(fn, [p[k] for k in names]) <= 1e-4


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_backbones_finite_at_both_precisions(rng, dtype):
    for kind, shape in (("mlp", (16,)), ("cnn", (1, 10, 10))):
        p = init_backbone(kind, rng, shape, 8, dtype)
        out = extract_features(kind, Tensor(rng.normal(size=(3,) + shape), dtype=dtype), p)
        assert out.dtype == dtype
        assert np.all(np.isfinite(out.data))


def test_unknown_backbone_kind(rng):
    with pytest.raises(ValueError):
        init_backbone("resnet", rng, (4,), 4)
