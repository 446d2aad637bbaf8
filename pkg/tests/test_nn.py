import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lcnn.nn import (
    Adam,
    Model,
    ShapeError,
    avgpool_forward,
    backward,
    batchnorm_forward,
    conv2d_forward,
    forward,
    init_params,
    parse_architecture,
    softmax,
    baseline_spec,
)
from lcnn.nn.layers import BN_EPSILON, avgpool_backward, update_moving_stats
from lcnn.nn.network import NonFiniteLossError
from lcnn.nn.spec import NetworkSpec, conv2d, dense, flatten, softmax_classifier


def naive_conv_same(x, w, b):
    # direct loop oracle, NHWC input, (F, kh, kw, C) kernels
    n, h, wd, c = x.shape
    f, kh, kw, _ = w.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.zeros((n, h + kh - 1, wd + kw - 1, c))
    xp[:, ph:ph + h, pw:pw + wd] = x
    out = np.zeros((n, h, wd, f))
    for i in range(h):
        for j in range(wd):
            patch = xp[:, i:i + kh, j:j + kw, :]
            out[:, i, j, :] = np.einsum("nabc,fabc->nf", patch, w) + b
    return out


@pytest.mark.parametrize("k", [1, 3, 5])
def test_conv_matches_loop(rng, k):
    x = rng.normal(size=(2, 7, 6, 3))
    w = rng.normal(size=(4, k, k, 3))
    b = rng.normal(size=4)
    np.testing.assert_allclose(conv2d_forward(x, w, b), naive_conv_same(x, w, b), atol=1e-12)


def test_conv_shape_mismatch():
    with pytest.raises(ShapeError):
        conv2d_forward(np.zeros((1, 4, 4, 2)), np.zeros((3, 3, 3, 1)), np.zeros(3))


def test_avgpool_floor_crop():
    x = np.arange(40 * 51, dtype=np.float64).reshape(1, 40, 51, 1)
    out = avgpool_forward(x, 5, 5)
    assert out.shape == (1, 8, 10, 1)
    assert out[0, 0, 0, 0] == x[0, :5, :5, 0].mean()
    # column 50 never contributes
    assert out[0, 7, 9, 0] == x[0, 35:40, 45:50, 0].mean()


def test_avgpool_backward_spreads_evenly():
    dout = np.ones((1, 2, 1, 1))
    dx = avgpool_backward(dout, (1, 8, 11, 1), 4, 10)
    assert dx[0, :, :10].sum() == pytest.approx(2.0)
    assert np.all(dx[0, :, 10] == 0)


def test_batchnorm_inference_formula(rng):
    x = rng.normal(size=(3, 4, 5, 2))
    p = {"gamma": np.array([1.5, -0.5]), "beta": np.array([0.1, 0.2]),
         "moving_mean": np.array([0.3, -0.1]), "moving_variance": np.array([2.0, 0.5])}
    want = p["gamma"] * (x - p["moving_mean"]) / np.sqrt(p["moving_variance"] + BN_EPSILON) + p["beta"]
    np.testing.assert_allclose(batchnorm_forward(x, p), want, rtol=1e-12)


def test_batchnorm_rejects_nonpositive_variance():
    p = {"gamma": np.ones(1), "beta": np.zeros(1), "moving_mean": np.zeros(1), "moving_variance": np.zeros(1)}
    with pytest.raises(ValueError):
        batchnorm_forward(np.ones((1, 2, 2, 1)), p)


def test_moving_stats_update():
    p = {"moving_mean": np.zeros(2), "moving_variance": np.ones(2)}
    update_moving_stats(p, np.array([1.0, 2.0]), np.array([3.0, 5.0]), 0.9)
    np.testing.assert_allclose(p["moving_mean"], [0.1, 0.2])
    np.testing.assert_allclose(p["moving_variance"], [1.2, 1.4])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-800, 800), min_size=2, max_size=12))
def test_softmax_is_distribution(logits):
    p = softmax(np.array([logits]))
    assert np.all(p >= 0)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)


def test_baseline_shapes():
    spec = baseline_spec()
    shapes = spec.output_shapes()
    assert shapes[0] == (40, 51, 16)
    assert (8, 10, 16) in shapes and (2, 1, 32) in shapes
    assert shapes[-1] == (10,)
    assert spec.architecture_string() == "16-16-32-100"


def test_parse_architecture_roundtrip():
    assert parse_architecture("12-16-22-100").architecture_string() == "12-16-22-100"
    with pytest.raises(ValueError):
        parse_architecture("12-16-100")


def test_spec_requires_batchnorm_after_conv():
    with pytest.raises(ValueError):
        NetworkSpec((4, 4, 1), (conv2d(2), flatten(), softmax_classifier(3)), 3).validate()


def test_forward_probabilities(rng):
    spec = baseline_spec()
    x = rng.normal(size=(3, 40, 51, 1)).astype(np.float32)
    p = forward(spec, init_params(spec, 0), x).probabilities
    assert p.shape == (3, 10)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=1e-5)


def test_forward_rejects_wrong_input():
    spec = baseline_spec()
    with pytest.raises(ShapeError):
        forward(spec, init_params(spec, 0), np.zeros((1, 40, 50, 1), np.float32))


def test_predict_batching_is_consistent(rng):
    spec = baseline_spec(classes=3)
    m = Model(spec, init_params(spec, 3))
    x = rng.normal(size=(7, 40, 51, 1)).astype(np.float32)
    np.testing.assert_array_equal(m.predict(x, batch_size=7), np.concatenate([m.predict(x[:4]), m.predict(x[4:])]))


def test_init_is_seeded():
    spec = baseline_spec()
    assert init_params(spec, 5).equals(init_params(spec, 5))
    assert not init_params(spec, 5).equals(init_params(spec, 6))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_raises(rng):
    spec = NetworkSpec((2, 2, 1), (flatten(), dense(3, "tanh"), softmax_classifier(2)), 2)
    p = init_params(spec, 0, np.float64)
    p.tensors[2]["weights"][:] = np.inf
    with pytest.raises(NonFiniteLossError):
        backward(spec, p, rng.normal(size=(2, 2, 2, 1)), np.array([0, 1]))


def test_adam_first_step():
    # bias-corrected first step moves each weight by lr * sign(g) (up to epsilon)
    spec = NetworkSpec((1, 2, 1), (flatten(), softmax_classifier(2)), 2)
    p = init_params(spec, 0, np.float64)
    before = p.copy()
    g = [{}, {"weights": np.array([[0.5, -2.0], [1e-3, 0.0]]), "bias": np.array([3.0, -1.0])}]
    Adam(lr=0.01).step(p, g)
    dw = p.tensors[1]["weights"] - before.tensors[1]["weights"]
    np.testing.assert_allclose(dw, [[-0.01, 0.01], [-0.01 * 1e-3 / (1e-3 + 1e-8), 0.0]], rtol=1e-6)
    np.testing.assert_allclose(p.tensors[1]["bias"] - before.tensors[1]["bias"], [-0.01, 0.01], rtol=1e-6)


def test_adam_rejects_nonfinite_gradient():
    spec = NetworkSpec((1, 2, 1), (flatten(), softmax_classifier(2)), 2)
    p = init_params(spec, 0, np.float64)
    before = p.copy()
    g = [{}, {"weights": np.array([[np.nan, 0.0], [0.0, 0.0]]), "bias": np.zeros(2)}]
    with pytest.raises(FloatingPointError):
        Adam().step(p, g)
    assert p.equals(before)


def test_training_step_reduces_loss(rng):
    spec = NetworkSpec((4, 4, 1), (conv2d(3), *baseline_spec().layers[1:2], flatten(), dense(8, "tanh"),
                                   softmax_classifier(3)), 3)
    p = init_params(spec, 1, np.float64)
    x, y = rng.normal(size=(16, 4, 4, 1)), rng.integers(0, 3, 16)
    opt = Adam(lr=1e-2)
    first = backward(spec, p, x, y).loss
    for _ in range(30):
        opt.step(p, backward(spec, p, x, y).grads)
    assert backward(spec, p, x, y).loss < first
