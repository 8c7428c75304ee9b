"""Tensor kernel contracts: hand examples, independent oracles, properties."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evim import ops
from evim.ops import ContractError


def rel(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-30)


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity_cases():
    x = np.array([[5.0], [6.0]])
    assert np.array_equal(ops.matmul(np.eye(2), x), x)
    y = np.arange(12.0).reshape(3, 4)
    assert np.array_equal(ops.matmul(np.eye(3), y), y)
    assert np.array_equal(ops.matmul(y, np.eye(4)), y)


def test_matmul_hand_example():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[5.0], [6.0]])
    assert np.array_equal(ops.matmul(a, b), np.array([[17.0], [39.0]]))


def test_matmul_against_triple_loop_oracle():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((7, 5)).astype(np.float32)
    b = rng.standard_normal((5, 3)).astype(np.float32)

    expected = np.zeros((7, 3), dtype=np.float64)
    for i in range(7):
        for j in range(3):
            acc = 0.0
            for k in range(5):
                acc += float(a[i, k]) * float(b[k, j])
            expected[i, j] = acc

    assert rel(ops.matmul(a, b).astype(np.float64), expected) <= 1e-6


def test_matmul_contract_errors():
    with pytest.raises(ContractError, match=r"\(2, 3\).*\(2, 3\)"):
        ops.matmul(np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(ContractError, match="dtype"):
        ops.matmul(np.zeros((2, 3), np.float32), np.zeros((3, 2), np.float64))


def test_matmul_deterministic_bits():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((13, 17)).astype(np.float32)
    b = rng.standard_normal((17, 11)).astype(np.float32)
    assert np.array_equal(ops.matmul(a, b), ops.matmul(a, b))


# ---------------------------------------------------------------------------
# depthwise conv


def _delta_kernel(c):
    k = np.zeros((3, 3, c))
    k[1, 1] = 1.0
    return k


def test_dwconv_delta_kernel_is_identity():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((6, 7, 3))
    assert np.array_equal(ops.dwconv3x3(x, _delta_kernel(3)), x)


def test_dwconv_ones_counting():
    x = np.ones((5, 5, 1))
    k = np.ones((3, 3, 1))
    y = ops.dwconv3x3(x, k)
    assert y[2, 2, 0] == 9.0  # interior: all nine taps inside
    assert y[0, 0, 0] == 4.0  # corner: only the 2x2 block inside
    assert y[0, 2, 0] == 6.0  # edge


def _dwconv_oracle(x, k, bias):
    h, w, c = x.shape
    out = np.zeros_like(x)
    for i in range(h):
        for j in range(w):
            for ch in range(c):
                acc = 0.0
                for di in range(3):
                    for dj in range(3):
                        ii, jj = i + di - 1, j + dj - 1
                        if 0 <= ii < h and 0 <= jj < w:
                            acc += x[ii, jj, ch] * k[di, dj, ch]
                out[i, j, ch] = acc + bias[ch]
    return out


def test_dwconv_against_sliding_window_oracle():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((5, 5, 2)).astype(np.float32)
    k = rng.standard_normal((3, 3, 2)).astype(np.float32)
    bias = rng.standard_normal(2).astype(np.float32)
    assert rel(ops.dwconv3x3(x, k, bias), _dwconv_oracle(x, k, bias)) <= 1e-6


def test_dwconv_stride2_shape_and_values():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((7, 7, 2))
    y = ops.dwconv3x3(x, _delta_kernel(2), stride=2)
    assert y.shape == (4, 4, 2)  # ceil(7/2)
    assert np.array_equal(y, x[::2, ::2])  # delta kernel samples the grid


def test_dwconv_channel_mismatch():
    with pytest.raises(ContractError, match="channel mismatch"):
        ops.dwconv3x3(np.zeros((4, 4, 3)), np.zeros((3, 3, 2)))


def test_dwconv_channels_never_mix():
    rng = np.random.default_rng(5)
    x = np.zeros((5, 5, 2))
    x[..., 0] = rng.standard_normal((5, 5))
    k = rng.standard_normal((3, 3, 2))
    assert np.all(ops.dwconv3x3(x, k)[..., 1] == 0)


# ---------------------------------------------------------------------------
# pointwise conv


def test_pwconv_identity_and_affine():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((4, 5, 3))
    assert np.array_equal(ops.pwconv(x, np.eye(3)), x)
    y = ops.pwconv(x[..., :1], np.array([[2.0]]), np.array([1.0]))
    assert np.allclose(y, 2 * x[..., :1] + 1)


def test_pwconv_equals_matmul_on_flattened_tokens():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((4, 5, 3)).astype(np.float32)
    w = rng.standard_normal((3, 6)).astype(np.float32)
    bias = rng.standard_normal(6).astype(np.float32)
    via_matmul = (ops.matmul(x.reshape(20, 3), w) + bias).reshape(4, 5, 6)
    assert np.array_equal(ops.pwconv(x, w, bias), via_matmul)


# ---------------------------------------------------------------------------
# dense conv (stem)


def test_conv3x3_reduces_to_pwconv_for_center_only_weight():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((5, 5, 2))
    w = np.zeros((3, 3, 2, 4))
    w[1, 1] = rng.standard_normal((2, 4))
    assert np.allclose(ops.conv3x3(x, w), ops.pwconv(x, w[1, 1]))


def test_conv3x3_stride2_shape():
    x = np.zeros((32, 32, 3))
    w = np.zeros((3, 3, 3, 8))
    assert ops.conv3x3(x, w, stride=2).shape == (16, 16, 8)


# ---------------------------------------------------------------------------
# normalizations


def test_layer_norm_constant_row_is_zero():
    x = np.full((3, 8), 4.2)
    y = ops.layer_norm(x, np.ones(8), np.zeros(8))
    assert np.allclose(y, 0.0)


def test_layer_norm_already_normalized_row():
    x = np.array([[1.0, -1.0]])
    y = ops.layer_norm(x, np.ones(2), np.zeros(2), eps=1e-14)
    assert np.allclose(y, x, atol=1e-7)


def test_layer_norm_moments():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((16, 32)) * 3 + 1
    y = ops.layer_norm(x, np.ones(32), np.zeros(32))
    assert np.all(np.abs(y.mean(axis=-1)) <= 1e-6)
    assert np.all(np.abs(y.var(axis=-1) - 1.0) <= 1e-4)


def test_layer_norm_rejects_bad_eps():
    with pytest.raises(ContractError):
        ops.layer_norm(np.zeros((2, 3)), np.ones(3), np.zeros(3), eps=0.0)


def test_batch_norm_identity_statistics():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((4, 4, 3))
    z3, o3 = np.zeros(3), np.ones(3)
    assert np.allclose(ops.batch_norm_infer(x, z3, o3, o3, z3, eps=0.0), x)


def test_batch_norm_zero_gamma_gives_beta():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((4, 4, 3))
    beta = np.array([1.0, -2.0, 0.5])
    y = ops.batch_norm_infer(x, np.zeros(3), np.ones(3), np.zeros(3), beta)
    assert np.allclose(y, np.broadcast_to(beta, y.shape))


def test_batch_norm_rejects_negative_variance():
    with pytest.raises(ContractError, match="variance"):
        ops.batch_norm_infer(np.zeros((2, 2, 1)), np.zeros(1), -np.ones(1), np.ones(1), np.zeros(1))


def test_batch_norm_folds_into_conv():
    rng = np.random.default_rng(12)
    x = rng.standard_normal((6, 6, 2))
    w = rng.standard_normal((3, 3, 2, 4))
    mean = rng.standard_normal(4)
    var = rng.uniform(0.5, 2.0, 4)
    gamma = rng.uniform(0.5, 2.0, 4)
    beta = rng.standard_normal(4)
    eps = 1e-5

    reference = ops.batch_norm_infer(ops.conv3x3(x, w), mean, var, gamma, beta, eps)
    scale = gamma / np.sqrt(var + eps)
    folded = ops.conv3x3(x, w * scale, beta - mean * scale)
    assert rel(folded, reference) <= 1e-5


# ---------------------------------------------------------------------------
# activations


def test_activation_point_values():
    assert ops.silu(np.array(0.0)) == 0.0
    assert ops.relu(np.array(-3.0)) == 0.0
    expected = 1.0 / (1.0 + np.exp(-1.0))  # evaluate the sigmoid directly
    assert np.isclose(ops.silu(np.array(1.0)), expected, rtol=1e-12)


def test_sigmoid_extreme_inputs_do_not_overflow():
    y = ops.sigmoid(np.array([-1e4, -50.0, 0.0, 50.0, 1e4]))
    assert np.all((y >= 0) & (y <= 1))
    assert y[0] == 0.0 and y[-1] == 1.0 and y[2] == 0.5


def test_softplus_matches_naive_in_safe_range_and_is_finite_outside():
    x = np.linspace(-30, 30, 61)
    assert np.allclose(ops.softplus(x), np.log1p(np.exp(x)))
    assert np.isfinite(ops.softplus(np.array([1e4, -1e4]))).all()


def test_softmax_uniform_for_equal_entries():
    v = np.full(7, 3.3)
    assert np.allclose(ops.softmax(v), np.full(7, 1 / 7))


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(min_value=-50, max_value=50), min_size=1, max_size=16),
    st.floats(min_value=-30, max_value=30),
)
def test_softmax_properties(vals, shift):
    v = np.array(vals)
    p = ops.softmax(v)
    assert abs(p.sum() - 1.0) <= 1e-6
    assert np.all((p > 0) & (p < 1 + 1e-12))
    assert np.max(np.abs(ops.softmax(v + shift) - p)) <= 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=1, max_value=5), st.integers(min_value=1, max_value=5))
def test_row_major_element_access(rows, cols):
    x = np.arange(rows * cols, dtype=np.float32).reshape(rows, cols)
    flat = x.ravel()
    for i in range(rows):
        for j in range(cols):
            assert x[i, j] == flat[i * cols + j]
