import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from glarekit.encode import (
    EncodedImage, Gamma, Linear, Log, decode, encode, parse_tf, quantize, tf_from_dict,
    tf_to_dict, unsharp_mask,
)


def test_gamma_endpoint():
    assert encode(np.array([[0.25]]), Gamma(2.0), ceiling=1.0).values[0, 0] == 0.5


def test_log_endpoints():
    e = encode(np.array([[65535.0, 1.0, 0.5, 0.0]]), Log(16)).values[0]
    assert e[0] == 1.0
    assert e[1] == 0.0
    assert e[2] == 0.0
    assert e[3] == 0.0


def test_linear_identity(rng):
    v = rng.random((6, 6))
    np.testing.assert_array_equal(encode(v, Linear(1.0, 0.0), ceiling=1.0).values, v)


def test_linear_clamps():
    e = encode(np.array([[0.0, 0.5, 1.0]]), Linear(2.0, 0.25), ceiling=1.0).values
    np.testing.assert_allclose(e, [[0.25, 1.0, 1.0]])


def test_parameter_validation():
    for bad in (lambda: Gamma(0.0), lambda: Log(7), lambda: Log(17), lambda: Linear(0.0, 0.0)):
        with pytest.raises(ValueError):
            bad()


def test_default_gamma():
    assert Gamma().gamma == 2.2


@pytest.mark.parametrize("text,tf", [
    ("gamma:2.2", Gamma(2.2)), ("gamma", Gamma(2.2)), ("log:12", Log(12)),
    ("linear:2,0.1", Linear(2.0, 0.1)), ("LINEAR", Linear()),
])
def test_parse_and_serialise(text, tf):
    assert parse_tf(text) == tf
    assert tf_from_dict(tf_to_dict(tf)) == tf


@pytest.mark.parametrize("text", ["sqrt:2", "gamma:x", "linear:1", "log:4"])
def test_parse_errors(text):
    with pytest.raises(ValueError):
        parse_tf(text)


def test_tf_from_dict_errors():
    with pytest.raises(ValueError):
        tf_from_dict({"tf": "pq"})
    with pytest.raises(ValueError):
        tf_from_dict({"tf": "gamma", "exponent": 2})


def test_encoded_image_range_check():
    with pytest.raises(ValueError):
        EncodedImage(np.array([1.5]), Gamma())


def test_gamma_round_trip(rng):
    v = rng.random(1000)
    back = decode(encode(v, Gamma(2.2), ceiling=1.0))
    assert np.max(np.abs(back - v)) <= 1e-12


def test_log_round_trip(rng):
    y = 1.0 + rng.random(1000) * 65534.0
    back = decode(encode(y, Log(16)))
    assert np.max(np.abs(back / y - 1)) <= 1e-10
    assert decode(encode(np.array([0.3]), Log(16)))[0] == 0.0


def test_linear_round_trip(rng):
    v = rng.random(100) * 0.5
    np.testing.assert_allclose(decode(encode(v, Linear(1.5, 0.1), ceiling=1.0)), v, atol=1e-15)


def test_ceiling_scaling(rng):
    v = rng.random((4, 4)) * 40
    e = encode(v, Gamma(2.0), ceiling=40.0)
    np.testing.assert_allclose(e.values, np.sqrt(v / 40.0))
    np.testing.assert_allclose(decode(e), v, rtol=1e-12)
    assert encode(v, Gamma(2.0)).ceiling == v.max()


def test_quantize_examples():
    e = EncodedImage(np.array([0.5, 0.0, 1.0]), Gamma())
    q = quantize(e, 8)
    assert q.values[0] == 128 / 255
    assert q.quant_bits == 8
    grid = EncodedImage(np.arange(256) / 255, Gamma())
    np.testing.assert_array_equal(quantize(grid, 8).values, grid.values)
    with pytest.raises(ValueError):
        quantize(e, 0)
    with pytest.raises(ValueError):
        quantize(e, 17)


@pytest.mark.parametrize("bits", [1, 4, 8, 10, 12, 16])
def test_quantization_error_bound(bits):
    v = np.random.default_rng(bits).random(10_000)
    q = quantize(EncodedImage(v, Gamma()), bits).values
    levels = 2**bits - 1
    assert np.max(np.abs(q - v)) <= 0.5 / levels + 1e-15
    np.testing.assert_allclose(q * levels, np.rint(q * levels), atol=1e-9)


def test_quantized_gamma_round_trip(rng):
    v = rng.random(1000)
    e = encode(v, Gamma(2.2), ceiling=1.0)
    q = quantize(e, 8)
    assert np.max(np.abs(q.values - e.values)) <= 0.5 / 255 + 1e-15


@settings(max_examples=40, deadline=None)
@given(arrays(float, 20, elements=st.floats(0, 1e4)), st.sampled_from([Gamma(1.7), Gamma(2.4), Log(16), Linear(0.8, 0.1)]))
def test_range_and_monotonicity(v, tf):
    v = np.sort(v)
    out = encode(v, tf, ceiling=1e4).values
    assert np.all((out >= 0) & (out <= 1))
    assert np.all(np.diff(out) >= 0)


@settings(max_examples=40, deadline=None)
@given(arrays(float, (5, 5), elements=st.floats(0, 100), unique=True))
def test_gamma_preserves_argmax(v):
    assert np.argmax(encode(v, Gamma(2.2)).values) == np.argmax(v)


def test_log_continuity_at_one():
    e = encode(np.array([1.0 - 1e-12, 1.0, 1.0 + 1e-9]), Log(16)).values
    assert e[0] == 0.0 and e[1] == 0.0
    assert 0 < e[2] < 1e-9


def test_unsharp_mask():
    flat = np.full((8, 8), 0.4)
    np.testing.assert_allclose(unsharp_mask(flat), flat)
    edge = np.zeros((8, 8))
    edge[:, 4:] = 0.5
    out = unsharp_mask(edge, sigma=1.0, amount=1.0)
    assert out[:, 4].min() > 0.5 and out[:, 3].max() == 0.0
    assert unsharp_mask(np.zeros((4, 4, 3))).shape == (4, 4, 3)
