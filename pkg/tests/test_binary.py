import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from binnet.binary import (
    PackedBinaryTensor,
    ScaleDiag,
    approxsign_backward,
    binary_conv_forward,
    binary_conv_integer,
    pack_bits,
    sign_forward,
    ste_backward,
    unpack_bits,
    xnor_popcount_dot,
)
from binnet.tensor_ops import ShapeError, conv2d


# --- sign and estimators ---


def test_sign_forward_values():
    assert sign_forward(np.array(0.5)) == 1.0
    assert sign_forward(np.array(-0.3)) == -1.0
    assert sign_forward(np.array(0.0)) == 1.0  # sign(0) = +1 by convention


def test_ste_passes_inside_unit_interval():
    assert ste_backward(np.array(2.0), np.array(0.5)) == 2.0
    assert ste_backward(np.array(2.0), np.array(1.5)) == 0.0
    # strict inequality: the boundary is clipped
    assert ste_backward(np.array(3.0), np.array(-1.0)) == 0.0
    assert ste_backward(np.array(3.0), np.array(1.0)) == 0.0


def test_ste_support_is_open_unit_interval():
    x = np.linspace(-2, 2, 401)
    g = ste_backward(np.ones_like(x), x)
    assert np.array_equal(g != 0, np.abs(x) < 1)


def test_approxsign_factor_values():
    assert approxsign_backward(np.array(1.0), np.array(-0.5)) == 1.0  # 2+2a
    assert approxsign_backward(np.array(1.0), np.array(0.25)) == 1.5  # 2-2a
    assert approxsign_backward(np.array(1.0), np.array(1.2)) == 0.0


def test_approxsign_matches_piecewise_oracle():
    a = np.linspace(-1.5, 1.5, 601)
    got = approxsign_backward(np.ones_like(a), a)
    expected = np.zeros_like(a)
    for i, v in enumerate(a):
        if -1 <= v < 0:
            expected[i] = 2 + 2 * v
        elif 0 <= v < 1:
            expected[i] = 2 - 2 * v
    assert np.allclose(got, expected, atol=1e-12)


def test_approxsign_continuous_at_zero():
    eps = 1e-9
    left = approxsign_backward(np.array(1.0), np.array(-eps))
    right = approxsign_backward(np.array(1.0), np.array(0.0))
    assert abs(left - right) < 1e-8
    assert right == 2.0


def test_estimators_reject_shape_mismatch():
    with pytest.raises(ShapeError):
        ste_backward(np.zeros(3), np.zeros(4))
    with pytest.raises(ShapeError):
        approxsign_backward(np.zeros(3), np.zeros(4))


# --- ScaleDiag ---


def test_scale_diag_rejects_small_entries():
    with pytest.raises(ValueError):
        ScaleDiag(np.array([1.0, 1e-9]))
    with pytest.raises(ValueError):
        ScaleDiag(np.array([-0.5]))


def test_scale_diag_alpha_is_reciprocal():
    s = ScaleDiag(np.array([2.0, 4.0]))
    assert np.allclose(s.alpha, [0.5, 0.25])


def test_scale_from_weights_matches_l1_formula():
    w = np.array([[1.0, -2.0, 3.0], [0.5, 0.5, 0.5]]).reshape(2, 3, 1, 1)
    s = ScaleDiag.from_weights(w)
    # inv_alpha_i = J / ||w_i||_1
    assert np.allclose(s.inv_alpha, [3 / 6.0, 3 / 1.5])


# --- packing ---


def test_pack_bits_documented_example():
    p = pack_bits(np.array([1.0, -1.0, 1.0, 1.0]))
    assert p.valid_bits == 4
    assert p.words.tolist() == [0b1101]  # element order LSB-first


def test_pack_all_minus_one_is_zero_word():
    p = pack_bits(np.full(64, -1.0))
    assert p.words.tolist() == [0]
    assert p.valid_bits == 64


def test_pack_rejects_non_binary():
    with pytest.raises(ValueError):
        pack_bits(np.array([1.0, 0.5]))


def test_pack_roundtrip_length_200():
    rng = np.random.default_rng(7)
    v = sign_forward(rng.standard_normal(200))
    assert np.array_equal(unpack_bits(pack_bits(v)), v)


def test_pack_preserves_shape():
    rng = np.random.default_rng(8)
    v = sign_forward(rng.standard_normal((3, 5, 7)))
    p = pack_bits(v)
    assert p.logical_shape == (3, 5, 7)
    assert np.array_equal(unpack_bits(p), v)


def test_packed_equality_is_bitwise():
    v = sign_forward(np.random.default_rng(9).standard_normal(70))
    assert pack_bits(v) == pack_bits(v.copy())
    w = v.copy()
    w[69] = -w[69]
    assert pack_bits(v) != pack_bits(w)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from([-1.0, 1.0]), min_size=1, max_size=300))
def test_pack_roundtrip_property(values):
    v = np.array(values)
    p = pack_bits(v)
    assert np.array_equal(unpack_bits(p), v)
    # padding bits past valid_bits are canonically zero
    tail = p.valid_bits % 64
    if tail:
        assert int(p.words[-1]) >> tail == 0


# --- xnor/popcount dot ---


def test_xnor_dot_identical_and_complementary():
    v = sign_forward(np.random.default_rng(10).standard_normal(8))
    assert xnor_popcount_dot(pack_bits(v), pack_bits(v)) == 8
    assert xnor_popcount_dot(pack_bits(v), pack_bits(-v)) == -8


def test_xnor_dot_matches_float_dot_n130():
    rng = np.random.default_rng(11)
    a = sign_forward(rng.standard_normal(130))
    b = sign_forward(rng.standard_normal(130))
    assert xnor_popcount_dot(pack_bits(a), pack_bits(b)) == int(a @ b)


def test_xnor_dot_many_lengths():
    rng = np.random.default_rng(12)
    for n in [1, 2, 63, 64, 65, 127, 128, 129, 500, 4096]:
        a = sign_forward(rng.standard_normal(n))
        b = sign_forward(rng.standard_normal(n))
        assert xnor_popcount_dot(pack_bits(a), pack_bits(b)) == int(a @ b)


def test_xnor_dot_rejects_length_mismatch():
    a = pack_bits(np.ones(8))
    b = pack_bits(np.ones(9))
    with pytest.raises(ShapeError):
        xnor_popcount_dot(a, b)


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=1, max_value=4096), st.integers(min_value=0, max_value=2**32))
def test_xnor_dot_property(n, seed):
    rng = np.random.default_rng(seed)
    a = sign_forward(rng.standard_normal(n))
    b = sign_forward(rng.standard_normal(n))
    assert xnor_popcount_dot(pack_bits(a), pack_bits(b)) == int(a @ b)


# --- packed convolution ---


def test_binary_conv_identity_scale_is_integer_conv():
    rng = np.random.default_rng(13)
    a = sign_forward(rng.standard_normal((2, 6, 6)))
    w = sign_forward(rng.standard_normal((4, 2, 3, 3)))
    out = binary_conv_forward(pack_bits(a), pack_bits(w), ScaleDiag(np.ones(4)))
    ref = conv2d(a, w)
    assert np.array_equal(out, ref)
    assert np.array_equal(out, np.round(out))


def test_binary_conv_linear_in_alpha():
    rng = np.random.default_rng(14)
    a = sign_forward(rng.standard_normal((1, 5, 5)))
    w = sign_forward(rng.standard_normal((3, 1, 3, 3)))
    s1 = ScaleDiag(np.full(3, 2.0))   # alpha = 0.5
    s2 = ScaleDiag(np.full(3, 1.0))   # alpha = 1.0, doubled
    o1 = binary_conv_forward(pack_bits(a), pack_bits(w), s1)
    o2 = binary_conv_forward(pack_bits(a), pack_bits(w), s2)
    assert np.allclose(o2, 2.0 * o1)


def test_binary_conv_documented_geometry_exact():
    rng = np.random.default_rng(15)
    a = sign_forward(rng.standard_normal((2, 6, 6)))
    w = sign_forward(rng.standard_normal((4, 2, 3, 3)))
    alpha = rng.uniform(0.5, 2.0, 4)
    scale = ScaleDiag(1.0 / alpha)
    ints = binary_conv_integer(pack_bits(a), pack_bits(w))
    assert np.array_equal(ints, conv2d(a, w).astype(np.int64))
    out = binary_conv_forward(pack_bits(a), pack_bits(w), scale)
    assert np.allclose(out, conv2d(a, w) * alpha[:, None, None])


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 0), (2, 1)])
def test_binary_conv_exact_with_padding_and_stride(stride, padding):
    rng = np.random.default_rng(100 + stride * 10 + padding)
    for _ in range(10):
        c_in = int(rng.integers(1, 4))
        c_out = int(rng.integers(1, 5))
        k = int(rng.choice([1, 3]))
        h = int(rng.integers(max(k - 2 * padding, 1) + 1, 9))
        a = sign_forward(rng.standard_normal((c_in, h, h)))
        w = sign_forward(rng.standard_normal((c_out, c_in, k, k)))
        ints = binary_conv_integer(pack_bits(a), pack_bits(w), stride, padding)
        ref = conv2d(a, w, stride, padding).astype(np.int64)
        assert np.array_equal(ints, ref)


def test_binary_conv_rejects_channel_mismatch():
    a = pack_bits(np.ones((2, 4, 4)))
    w = pack_bits(np.ones((1, 3, 3, 3)))
    with pytest.raises(ShapeError):
        binary_conv_integer(a, w)


def test_binary_conv_rejects_scale_mismatch():
    a = pack_bits(np.ones((1, 4, 4)))
    w = pack_bits(np.ones((2, 1, 3, 3)))
    with pytest.raises(ShapeError):
        binary_conv_forward(a, w, ScaleDiag(np.ones(3)))


def test_packed_binary_tensor_is_frozen():
    p = pack_bits(np.ones(4))
    with pytest.raises(AttributeError):
        p.valid_bits = 8
