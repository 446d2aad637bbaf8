import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lcnn import io
from lcnn.nn import Model, init_params, baseline_spec
from lcnn.quantization import (
    QMAX,
    QMIN,
    QuantParams,
    dequantize_network,
    dequantize_tensor,
    quantize_network,
    quantize_tensor,
    quantize_with,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False, width=32)
tensors = arrays(np.float32, st.integers(1, 64), elements=finite)


@settings(max_examples=300, deadline=None)
@given(tensors)
def test_roundtrip_within_half_step(t):
    q, qp = quantize_tensor(t)
    err = np.abs(dequantize_tensor(q, qp) - t.astype(np.float64))
    assert np.all(err <= qp.scale / 2 + 1e-7)


@settings(max_examples=200, deadline=None)
@given(tensors)
def test_zero_is_exact(t):
    # the range always includes 0 and the zero point maps back to it
    q, qp = quantize_tensor(np.append(t, np.float32(0)))
    assert dequantize_tensor(np.array([qp.zero_point], np.int8), qp)[0] == 0.0


@settings(max_examples=200, deadline=None)
@given(tensors)
def test_requantize_is_idempotent(t):
    q, qp = quantize_tensor(t)
    # with a single code value the second pass picks the exact-value scale instead
    assume(len(np.unique(q)) > 1)
    back = dequantize_tensor(q, qp)
    np.testing.assert_array_equal(quantize_with(back, qp), q)


@settings(max_examples=100, deadline=None)
@given(tensors)
def test_codes_in_range(t):
    q, qp = quantize_tensor(t)
    assert q.dtype == np.int8
    assert QMIN <= qp.zero_point <= QMAX


@pytest.mark.parametrize("value", [3.25, -0.7, 0.0])
def test_constant_tensor_exact(value):
    t = np.full(5, value, np.float32)
    q, qp = quantize_tensor(t)
    np.testing.assert_array_equal(dequantize_tensor(q, qp, np.float32), t)


def test_known_range():
    t = np.array([-1.0, 0.0, 1.0, 0.5])
    q, qp = quantize_tensor(t)
    assert qp.scale == pytest.approx(2 / 255, rel=1e-6)
    assert q[0] == QMIN
    # scale is rounded up, so 1.0 sits just below code 127 - zero_point
    back = dequantize_tensor(q, qp)
    assert np.all(np.abs(back - t) <= qp.scale / 2)


def test_rejects_bad_input():
    with pytest.raises(ValueError):
        quantize_tensor(np.array([]))
    with pytest.raises(ValueError):
        quantize_tensor(np.array([1.0, np.nan]))
    with pytest.raises(ValueError):
        QuantParams(0.0, 0)
    with pytest.raises(ValueError):
        QuantParams(1.0, 200)


def test_network_roundtrip_keeps_predictions(rng):
    spec = baseline_spec()
    params = init_params(spec, 0)
    for _, key, v in params.items():
        if key in ("moving_variance", "gamma"):
            v[:] = rng.uniform(0.5, 1.5, v.shape)
    qm = quantize_network(spec, params)
    deq = dequantize_network(qm)
    x = rng.normal(size=(4, 40, 51, 1)).astype(np.float32)
    p0, p1 = Model(spec, params).predict(x), Model(spec, deq).predict(x)
    assert np.abs(p0 - p1).max() < 0.05
    np.testing.assert_array_equal(p0.argmax(1), p1.argmax(1))


def test_moving_variance_floor():
    spec = baseline_spec()
    params = init_params(spec, 0)
    mv = params.tensors[1]["moving_variance"]
    mv[:] = 1.0
    mv[0] = 1e-9  # collapses onto the zero code
    deq = dequantize_network(quantize_network(spec, params))
    assert np.all(deq.tensors[1]["moving_variance"] > 0)


def test_int8_file_size(tmp_path):
    spec = baseline_spec()
    params = init_params(spec, 0)
    f32 = io.save_model(tmp_path / "a.lcnn", spec, params)
    i8 = io.save_model(tmp_path / "b.lcnn", spec, params, "int8")
    assert f32 == io.file_size(spec, "float32") == (tmp_path / "a.lcnn").stat().st_size
    assert i8 == io.file_size(spec, "int8")
    assert i8 / f32 <= 0.30
