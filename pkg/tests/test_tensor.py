import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ynet.tensor import (
    SELU_ALPHA,
    SELU_SCALE,
    BatchNormState,
    ShapeError,
    Tape,
    Tensor,
    add,
    batchnorm,
    concat,
    conv2d,
    global_avg_pool,
    global_max_pool,
    grad_check,
    linear,
    maxpool2d,
    relu,
    selu,
    sigmoid,
    upsample2d,
)


def naive_conv(x, k, b):
    """Direct loop convolution with zero 'same' padding."""
    n, c, h, w = x.shape
    f, _, kh, kw = k.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out = np.zeros((n, f, h, w))
    for i in range(h):
        for j in range(w):
            patch = xp[:, :, i:i + kh, j:j + kw]
            out[:, :, i, j] = np.einsum("nchw,fchw->nf", patch, k) + b
    return out


def t(a):
    return Tensor(np.asarray(a, dtype=np.float32))


# --- conv2d ---------------------------------------------------------------


def test_conv_all_ones_counts_neighbours():
    out = conv2d(t(np.ones((1, 1, 3, 3))), t(np.ones((1, 1, 3, 3))), t([0.0])).data[0, 0]
    np.testing.assert_array_equal(out, [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


def test_conv_delta_kernel_is_identity(rng):
    x = rng.standard_normal((2, 3, 6, 5)).astype(np.float32)
    k = np.zeros((3, 3, 3, 3), np.float32)
    for c in range(3):
        k[c, c, 1, 1] = 1
    out = conv2d(t(x), t(k), t(np.zeros(3))).data
    np.testing.assert_array_equal(out, x)


def test_conv_zero_input_zero_output(rng):
    out = conv2d(t(np.zeros((1, 2, 4, 4))), t(rng.standard_normal((5, 2, 3, 3))), t(np.zeros(5)))
    assert not out.data.any()


@pytest.mark.parametrize("ksize", [1, 3])
def test_conv_matches_loop_oracle(rng, ksize):
    x = rng.standard_normal((2, 3, 7, 6))
    k = rng.standard_normal((4, 3, ksize, ksize))
    b = rng.standard_normal(4)
    out = conv2d(Tensor(x, dtype=np.float64), Tensor(k, dtype=np.float64), Tensor(b, dtype=np.float64)).data
    np.testing.assert_allclose(out, naive_conv(x, k, b), rtol=1e-12, atol=1e-12)


def test_conv_is_linear_in_input(rng):
    x, y = rng.standard_normal((2, 1, 2, 6, 6)).astype(np.float32)
    k = t(rng.standard_normal((3, 2, 3, 3)))
    z = t(np.zeros(3))
    lhs = conv2d(t(2.5 * x - 0.5 * y), k, z).data
    rhs = 2.5 * conv2d(t(x), k, z).data - 0.5 * conv2d(t(y), k, z).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-5)


def test_conv_shape_errors_name_both_shapes():
    with pytest.raises(ShapeError, match=r"\[1, 2, 4, 4\].*\[3, 5, 3, 3\]"):
        conv2d(t(np.zeros((1, 2, 4, 4))), t(np.zeros((3, 5, 3, 3))), t(np.zeros(3)))
    with pytest.raises(ShapeError):
        conv2d(t(np.zeros((1, 2, 4, 4))), t(np.zeros((3, 2, 5, 5))), t(np.zeros(3)))
    with pytest.raises(ShapeError):
        conv2d(t(np.zeros((1, 2, 4, 4))), t(np.zeros((3, 2, 3, 3))), t(np.zeros(2)))


# --- pooling / upsampling -------------------------------------------------


def test_maxpool_examples():
    np.testing.assert_array_equal(maxpool2d(t([[[[1, 2], [3, 4]]]])).data, [[[[4]]]])
    ramp = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    np.testing.assert_array_equal(maxpool2d(t(ramp)).data[0, 0], [[5, 7], [13, 15]])
    const = maxpool2d(t(np.full((1, 2, 6, 4), 3.5))).data
    assert const.shape == (1, 2, 3, 2) and np.all(const == 3.5)


def test_maxpool_ties_route_to_first_cell():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with Tape() as tape:
        out = maxpool2d(x)
    tape.backward(out, np.array([[[[5.0]]]], np.float32))
    np.testing.assert_array_equal(x.grad[0, 0], [[5, 0], [0, 0]])


def test_maxpool_rejects_odd_dims():
    with pytest.raises(ShapeError):
        maxpool2d(t(np.zeros((1, 1, 3, 4))))


def test_upsample_examples():
    out = upsample2d(t([[[[1, 2], [3, 4]]]])).data[0, 0]
    np.testing.assert_array_equal(out, [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])
    assert not upsample2d(t(np.zeros((1, 1, 3, 3)))).data.any()


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, (2, 3, 3, 4), elements=st.floats(-100, 100, width=32)))
def test_pool_of_upsample_is_identity_and_multiset(x):
    up = upsample2d(t(x)).data
    np.testing.assert_array_equal(maxpool2d(t(up)).data, x)
    np.testing.assert_array_equal(np.sort(up, axis=None), np.sort(np.repeat(x.ravel(), 4)))
    assert maxpool2d(t(x[:, :, :2, :4])).data.max() <= x.max()


# --- elementwise ----------------------------------------------------------


def test_selu_values():
    out = selu(t([0.0, 1.0, -1.0])).data
    assert out[0] == 0
    assert out[1] == pytest.approx(1.05070, abs=1e-5)
    assert out[2] == pytest.approx(-1.11133, abs=1e-5)
    assert SELU_ALPHA == pytest.approx(1.6732632423543772)
    assert SELU_SCALE == pytest.approx(1.0507009873554805)


def test_selu_continuous_at_zero():
    left, right = selu(Tensor([-1e-9, 1e-9], dtype=np.float64)).data
    assert abs(left - right) < 1e-6


def test_sigmoid_values():
    assert sigmoid(t([0.0])).data[0] == 0.5
    assert sigmoid(Tensor([2.0], dtype=np.float64)).data[0] == pytest.approx(0.88080, abs=1e-5)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 16, elements=st.floats(-30, 30)))
def test_sigmoid_symmetry_and_open_interval(x):
    s = sigmoid(Tensor(x, dtype=np.float64)).data
    np.testing.assert_allclose(s + sigmoid(Tensor(-x, dtype=np.float64)).data, 1.0, atol=1e-12)
    assert np.all((s > 0) & (s < 1))


def test_sigmoid_no_overflow_at_extremes():
    s = sigmoid(t([-1e4, 1e4])).data
    assert np.all(np.isfinite(s))


def test_add_and_concat():
    x = t([[1, 2]])
    np.testing.assert_array_equal(add(x, t([[3, 4]])).data, [[4, 6]])
    np.testing.assert_array_equal(add(x, t(np.zeros((1, 2)))).data, x.data)
    np.testing.assert_array_equal(add(x, x).data, 2 * x.data)
    with pytest.raises(ShapeError):
        add(x, t([[1, 2, 3]]))
    a, b = t(np.ones((2, 4, 3, 3))), t(np.zeros((2, 8, 3, 3)))
    c = concat(a, b)
    assert c.shape == (2, 12, 3, 3)
    np.testing.assert_array_equal(c.data[:, :4], a.data)
    with pytest.raises(ShapeError):
        concat(a, t(np.zeros((2, 8, 4, 3))))


def test_concat_with_zeros_then_half_zero_kernel_equals_conv(rng):
    x = t(rng.standard_normal((1, 2, 5, 5)))
    k = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
    k_wide = np.concatenate([k, rng.standard_normal((3, 2, 3, 3)).astype(np.float32) * 0], axis=1)
    b = t(rng.standard_normal(3))
    lhs = conv2d(concat(x, t(np.zeros((1, 2, 5, 5)))), t(k_wide), b).data
    np.testing.assert_allclose(lhs, conv2d(x, t(k), b).data, atol=1e-6)


def test_add_same_input_twice_doubles_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = add(x, x)
    tape.backward(y, np.array([1.0, 2.0, 3.0], np.float32))
    np.testing.assert_array_equal(x.grad, [2, 4, 6])


# --- batchnorm ------------------------------------------------------------


def test_batchnorm_examples():
    state = BatchNormState(1)
    ones, zeros = t(np.ones(1)), t(np.zeros(1))
    out = batchnorm(t(np.full((2, 1, 2, 2), 7.0)), ones, zeros, state)
    np.testing.assert_array_equal(out.data, 0)
    x = t(np.array([1, 3, 1, 3], np.float32).reshape(1, 1, 2, 2))
    out = batchnorm(x, ones, zeros, BatchNormState(1, eps=0.0)).data.ravel()
    np.testing.assert_allclose(out, [-1, 1, -1, 1], atol=1e-6)
    out = batchnorm(t(np.random.default_rng(0).standard_normal((2, 3, 2, 2))), t(np.zeros(3)), t([1, 2, 3]), BatchNormState(3))
    np.testing.assert_array_equal(out.data[:, 2], 3)


def test_batchnorm_running_stats_and_infer_mode(caplog):
    state = BatchNormState(2)
    with caplog.at_level("WARNING"):
        batchnorm(t(np.ones((1, 2, 2, 2))), t(np.ones(2)), t(np.zeros(2)), state, "infer")
    assert "before any train step" in caplog.text
    x = np.stack([np.full((2, 2), 1.0), np.full((2, 2), 5.0)])[None].astype(np.float32)
    x = np.concatenate([x, x + 2])
    batchnorm(t(x), t(np.ones(2)), t(np.zeros(2)), state, "train")
    np.testing.assert_allclose(state.running_mean, 0.01 * np.array([2.0, 6.0]), rtol=1e-6)
    np.testing.assert_allclose(state.running_var, 0.99 + 0.01 * np.array([1.0, 1.0]), rtol=1e-6)
    out = batchnorm(t(x), t(np.ones(2)), t(np.zeros(2)), state, "infer").data
    expected = (x - state.running_mean.reshape(1, 2, 1, 1)) / np.sqrt(state.running_var.reshape(1, 2, 1, 1) + 1e-5)
    np.testing.assert_allclose(out, expected, rtol=1e-5)


# --- gradient checks ------------------------------------------------------


def _bn_op(x, g, b):
    return batchnorm(x, g, b, BatchNormState(x.shape[1]))


def _away_from_zero(r, shape, margin=0.1):
    x = r.uniform(margin, 2, size=shape)
    return x * r.choice([-1, 1], size=shape)


def _distinct(r, shape):
    # well separated values keep max-pool argmaxes stable under the FD step
    return r.permutation(np.prod(shape)).reshape(shape) * 0.1


OP_CASES = {
    "conv3x3": (conv2d, lambda r: [r.standard_normal((1, 2, 5, 5)), r.standard_normal((3, 2, 3, 3)), r.standard_normal(3)]),
    "conv1x1": (conv2d, lambda r: [r.standard_normal((2, 3, 4, 4)), r.standard_normal((2, 3, 1, 1)), r.standard_normal(2)]),
    "maxpool": (maxpool2d, lambda r: [_distinct(r, (2, 2, 4, 4))]),
    "upsample": (upsample2d, lambda r: [r.standard_normal((1, 2, 3, 3))]),
    "selu": (selu, lambda r: [_away_from_zero(r, (3, 7))]),
    "relu": (relu, lambda r: [_away_from_zero(r, (3, 7))]),
    "sigmoid": (sigmoid, lambda r: [r.standard_normal((4, 5)) * 3]),
    "add": (add, lambda r: [r.standard_normal((2, 3)), r.standard_normal((2, 3))]),
    "concat": (concat, lambda r: [r.standard_normal((2, 1, 3, 3)), r.standard_normal((2, 2, 3, 3))]),
    "batchnorm": (_bn_op, lambda r: [r.standard_normal((3, 2, 2, 2)), r.uniform(0.5, 2, 2), r.standard_normal(2)]),
    "global_avg_pool": (global_avg_pool, lambda r: [r.standard_normal((2, 3, 4, 4))]),
    "global_max_pool": (global_max_pool, lambda r: [_distinct(r, (2, 3, 2, 2))]),
    "linear": (linear, lambda r: [r.standard_normal((4, 5)), r.standard_normal((3, 5)), r.standard_normal(3)]),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_backward_matches_finite_differences(name):
    op, make = OP_CASES[name]
    # normalisation curvature needs a finer step for the central difference
    h = 1e-4 if name == "batchnorm" else 1e-3
    worst = 0.0
    for seed in range(20):
        res = grad_check(op, make(np.random.default_rng(seed)), tolerance=1e-3, h=h, seed=10_000 + seed)
        assert res.passed, f"{name} seed {seed}: {res.message}"
        worst = max(worst, res.max_rel_error)
    assert worst < 1e-3


def test_grad_check_reports_broken_backward():
    from ynet.tensor import _record

    def wrong_square(x):
        return _record("sq", (x,), x.data ** 2, lambda g: (g * x.data,))

    res = grad_check(wrong_square, [np.array([1.0, 2.0])])
    assert not res.passed and res.max_rel_error == pytest.approx(0.5)


def test_grad_check_flags_non_finite():
    from ynet.tensor import _record

    def bad(x):
        return _record("bad", (x,), x.data * 1, lambda g: (g * np.nan,))

    res = grad_check(bad, [np.array([1.0])])
    assert not res.passed and "non-finite" in res.message


def test_backward_fills_every_leaf_once():
    a = Tensor(np.ones((1, 1, 4, 4)), requires_grad=True)
    k = Tensor(np.ones((1, 1, 3, 3)), requires_grad=True)
    b = Tensor(np.zeros(1), requires_grad=True)
    with Tape() as tape:
        y = maxpool2d(conv2d(a, k, b))
        loss = global_avg_pool(y)
    tape.backward(loss, np.ones((1, 1), np.float32))
    for leaf in (a, k, b):
        assert leaf.grad is not None and leaf.grad.shape == leaf.shape
    assert b.grad[0] == pytest.approx(1.0)


def test_backward_requires_grad_for_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = relu(x)
    with pytest.raises(ShapeError):
        tape.backward(y)


def test_no_recording_without_tape_or_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    y = relu(x)
    with Tape() as tape:
        relu(Tensor(np.ones(3)))
    assert tape.entries == []
    assert y.requires_grad


def test_forward_values_finite(rng):
    x = t(rng.standard_normal((1, 2, 4, 4)) * 50)
    k = t(rng.standard_normal((2, 2, 3, 3)))
    y = sigmoid(batchnorm(selu(conv2d(x, k, t(np.zeros(2)))), t(np.ones(2)), t(np.zeros(2)), BatchNormState(2)))
    assert np.all(np.isfinite(y.data))
    assert y.dtype == np.float32
