"""Tests for the reverse-mode autodiff engine and its primitive ops."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heromamba import tensor as T
from heromamba.gradcheck import finite_diff_check, relative_error
from heromamba.tensor import Tensor

from conftest import weighted_sum

PRIMITIVE_TOL = 1e-5


def leaf(rng, *shape, low=None):
    """Float64 tracked leaf; ``low`` keeps values away from zero (log, sqrt, abs)."""
    if low is None:
        return Tensor(rng.normal(size=shape), requires_grad=True)
    mag = rng.uniform(low, low + 1.5, size=shape)
    return Tensor(mag, requires_grad=True)


def signed_away_from_zero(rng, *shape):
    mag = rng.uniform(0.2, 1.5, size=shape)
    return Tensor(mag * rng.choice([-1.0, 1.0], size=shape), requires_grad=True)


def _bn_case(training):
    def build(rng):
        x = leaf(rng, 3, 2, 4, 4)
        g, b = leaf(rng, 2), leaf(rng, 2)
        rm = rng.normal(size=2)
        rv = rng.uniform(0.5, 2.0, size=2)
        return (lambda: T.batch_norm2d(x, g, b, rm.copy(), rv.copy(), training=training)), [x, g, b]
    return build


# each builder returns (forward closure, tracked leaves)
CASES = {
    "add": lambda r: ((lambda a, b: (lambda: T.add(a, b)))(leaf(r, 3, 4), leaf(r, 4)), None),
    "sub": lambda r: ((lambda a, b: (lambda: T.sub(a, b)))(leaf(r, 3, 4), leaf(r, 3, 1)), None),
    "mul": lambda r: ((lambda a, b: (lambda: T.mul(a, b)))(leaf(r, 2, 3, 4), leaf(r, 3, 4)), None),
    "div": lambda r: ((lambda a, b: (lambda: T.div(a, b)))(leaf(r, 3, 4), signed_away_from_zero(r, 3, 4)), None),
    "neg": lambda r: ((lambda a: (lambda: T.neg(a)))(leaf(r, 5)), None),
    "power": lambda r: ((lambda a: (lambda: T.power(a, 2.5)))(leaf(r, 3, 4, low=0.3)), None),
    "exp": lambda r: ((lambda a: (lambda: T.exp(a)))(leaf(r, 3, 4)), None),
    "log": lambda r: ((lambda a: (lambda: T.log(a)))(leaf(r, 3, 4, low=0.3)), None),
    "sqrt": lambda r: ((lambda a: (lambda: T.sqrt(a)))(leaf(r, 3, 4, low=0.3)), None),
    "abs": lambda r: ((lambda a: (lambda: T.abs_(a)))(signed_away_from_zero(r, 3, 4)), None),
    "sigmoid": lambda r: ((lambda a: (lambda: T.sigmoid(a)))(leaf(r, 3, 4)), None),
    "silu": lambda r: ((lambda a: (lambda: T.silu(a)))(leaf(r, 3, 4)), None),
    "softplus": lambda r: ((lambda a: (lambda: T.softplus(a)))(leaf(r, 3, 4)), None),
    "sum_axis": lambda r: ((lambda a: (lambda: T.sum_(a, axis=1, keepdims=True)))(leaf(r, 3, 4, 2)), None),
    "mean_axes": lambda r: ((lambda a: (lambda: T.mean(a, axis=(0, 2))))(leaf(r, 3, 4, 2)), None),
    "reshape": lambda r: ((lambda a: (lambda: T.reshape(a, (4, 6))))(leaf(r, 2, 3, 4)), None),
    "transpose": lambda r: ((lambda a: (lambda: T.transpose(a, (2, 0, 1))))(leaf(r, 2, 3, 4)), None),
    "getitem": lambda r: ((lambda a: (lambda: T.getitem(a, (slice(None), [0, 2, 2], slice(1, 3)))))(leaf(r, 2, 3, 4)), None),
    "flip": lambda r: ((lambda a: (lambda: T.flip(a, 1)))(leaf(r, 2, 3, 4)), None),
    "concat": lambda r: ((lambda a, b: (lambda: T.concat([a, b], axis=1)))(leaf(r, 2, 3), leaf(r, 2, 2)), None),
    "concat_channels": lambda r: ((lambda a, b: (lambda: T.concat_channels(a, b)))(leaf(r, 1, 2, 3, 3), leaf(r, 1, 3, 3, 3)), None),
    "broadcast_to": lambda r: ((lambda a: (lambda: T.broadcast_to(a, (3, 2, 4))))(leaf(r, 2, 1)), None),
    "matmul": lambda r: ((lambda a, b: (lambda: T.matmul(a, b)))(leaf(r, 2, 3, 4), leaf(r, 4, 5)), None),
    "linear": lambda r: ((lambda x, w, b: (lambda: T.linear(x, w, b)))(leaf(r, 2, 3, 4), leaf(r, 4, 5), leaf(r, 5)), None),
    "conv2d": lambda r: ((lambda x, w, b: (lambda: T.conv2d(x, w, b, padding=1)))(leaf(r, 2, 3, 5, 5), leaf(r, 4, 3, 3, 3), leaf(r, 4)), None),
    "conv2d_stride2": lambda r: ((lambda x, w: (lambda: T.conv2d(x, w, stride=2, padding=1)))(leaf(r, 1, 2, 6, 6), leaf(r, 3, 2, 3, 3)), None),
    "conv2d_depthwise": lambda r: ((lambda x, w, b: (lambda: T.conv2d(x, w, b, padding=2, groups=3)))(leaf(r, 2, 3, 5, 5), leaf(r, 3, 1, 5, 5), leaf(r, 3)), None),
    "conv2d_grouped": lambda r: ((lambda x, w: (lambda: T.conv2d(x, w, groups=2)))(leaf(r, 1, 4, 4, 4), leaf(r, 6, 2, 3, 3)), None),
    "upsample": lambda r: ((lambda a: (lambda: T.upsample_nearest2x(a)))(leaf(r, 2, 3, 3, 2)), None),
    "batch_norm_train": lambda r: _bn_case(True)(r),
    "batch_norm_eval": lambda r: _bn_case(False)(r),
    "layer_norm": lambda r: ((lambda x, w, b: (lambda: T.layer_norm_channels(x, w, b)))(leaf(r, 2, 4, 3, 3), leaf(r, 4), leaf(r, 4)), None),
}


def _leaves_of(fn):
    """Recover the tracked leaves captured by a forward closure."""
    return [c.cell_contents for c in fn.__closure__ if isinstance(c.cell_contents, Tensor)]


@pytest.mark.parametrize("name", sorted(CASES))
def test_primitive_adjoint_matches_finite_differences(name):
    """Every primitive passes central differences (64-bit, h=1e-4) on 20 random inputs."""
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng([seed, len(name)])
        fn, params = CASES[name](rng)
        params = params if params is not None else _leaves_of(fn)
        w = rng.normal(size=fn().shape)
        worst = max(worst, finite_diff_check(lambda: weighted_sum(fn(), w), params, h=1e-4))
    assert worst <= PRIMITIVE_TOL, f"{name}: worst relative error {worst:.3e}"


class TestForwardExamples:
    def test_conv2d_hand_computed(self):
        x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
        w = Tensor(np.array([[[[1.0, 0.0], [0.0, -1.0]]]]))
        out = T.conv2d(x, w).data[0, 0]
        # x[i, j] - x[i+1, j+1] = -5 everywhere
        np.testing.assert_array_equal(out, np.full((3, 3), -5.0))

    def test_conv2d_padding_and_stride_shapes(self):
        x = Tensor(np.zeros((2, 3, 8, 8)))
        w = Tensor(np.zeros((5, 3, 3, 3)))
        assert T.conv2d(x, w, padding=1).shape == (2, 5, 8, 8)
        assert T.conv2d(x, w, stride=2, padding=1).shape == (2, 5, 4, 4)

    def test_conv2d_matches_direct_loop(self, rng):
        x = rng.normal(size=(2, 4, 5, 6))
        w = rng.normal(size=(6, 2, 3, 3))
        got = T.conv2d(Tensor(x), Tensor(w), padding=1, groups=2).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros((2, 6, 5, 6))
        for o in range(6):
            g = o // 3
            for i in range(5):
                for j in range(6):
                    ref[:, o, i, j] = np.sum(xp[:, 2 * g:2 * g + 2, i:i + 3, j:j + 3] * w[o], axis=(1, 2, 3))
        np.testing.assert_allclose(got, ref, atol=1e-12)

    def test_conv2d_channel_mismatch_message(self):
        with pytest.raises(ValueError, match="channel mismatch"):
            T.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 4, 3, 3))))

    def test_silu_values(self):
        out = T.silu(Tensor(np.array([0.0, 1.0, -1.0]))).data
        np.testing.assert_allclose(out, [0.0, 1 / (1 + np.exp(-1.0)), -1 / (1 + np.exp(1.0))], rtol=1e-15)

    def test_softplus_is_stable_for_large_inputs(self):
        out = T.softplus(Tensor(np.array([-800.0, 0.0, 800.0]))).data
        np.testing.assert_allclose(out, [0.0, np.log(2.0), 800.0])

    def test_upsample_replicates_blocks(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        out = T.upsample_nearest2x(x).data[0, 0]
        np.testing.assert_array_equal(out[:2, :2], 1.0)
        np.testing.assert_array_equal(out[2:, 2:], 4.0)

    def test_concat_channels_layout(self):
        a = Tensor(np.ones((1, 2, 3, 3)))
        b = Tensor(np.zeros((1, 1, 3, 3)))
        out = T.concat_channels(a, b)
        assert out.shape == (1, 3, 3, 3)
        assert out.data[0, :2].min() == 1.0 and out.data[0, 2].max() == 0.0

    def test_batch_norm_training_normalises_and_updates_running_stats(self, rng):
        x = rng.normal(3.0, 2.0, size=(4, 2, 5, 5))
        rm, rv = np.zeros(2), np.ones(2)
        out = T.batch_norm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=True, momentum=0.1)
        np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1.0, rtol=1e-4)
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
        unbiased = x.var(axis=(0, 2, 3), ddof=1)
        np.testing.assert_allclose(rv, 0.9 + 0.1 * unbiased)

    def test_batch_norm_eval_uses_running_stats(self):
        x = np.full((1, 1, 2, 2), 5.0)
        out = T.batch_norm2d(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)),
                             np.array([1.0]), np.array([4.0]), training=False, eps=1e-12)
        np.testing.assert_allclose(out.data, 2.0)


class TestBackwardMechanics:
    def test_gradient_accumulates_over_reuse(self):
        x = Tensor(np.array([2.0, 3.0]), requires_grad=True)
        T.backward((x * x + x).sum())
        np.testing.assert_array_equal(x.grad, [5.0, 7.0])

    def test_broadcast_gradient_is_reduced(self):
        a = Tensor(np.ones((3, 4)), requires_grad=True)
        b = Tensor(np.ones(4), requires_grad=True)
        T.backward((a * b).sum())
        np.testing.assert_array_equal(b.grad, np.full(4, 3.0))

    def test_no_grad_builds_no_graph(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            y = T.exp(x)
            assert not T.is_grad_enabled()
        assert T.is_grad_enabled()
        assert not y.requires_grad

    def test_graph_lists_ops_and_leaves(self):
        x = Tensor(np.ones((1, 1, 3, 3)), requires_grad=True)
        w = Tensor(np.ones((1, 1, 3, 3)), requires_grad=True)
        graph = T.backward(T.silu(T.conv2d(x, w, padding=1)).sum(), retain_graph=True)
        assert "conv2d" in graph.ops() and "silu" in graph.ops()
        assert {id(t) for t in graph.leaves()} == {id(x), id(w)}

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            T.backward(x * 2.0)

    def test_diamond_graph(self):
        # x feeds two branches: d/dx [exp(x) * x^2] = exp(x) (x^2 + 2x)
        x = Tensor(np.array([0.5, -1.0]), requires_grad=True)
        T.backward((T.exp(x) * x ** 2).sum())
        ref = np.exp(x.data) * (x.data ** 2 + 2 * x.data)
        np.testing.assert_allclose(x.grad, ref, rtol=1e-14)


class TestGradCheckHarness:
    def test_detects_planted_fault(self, rng):
        x = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        f = lambda: (x * x).sum()
        wrong = [2.0 * x.data * 1.01]
        assert finite_diff_check(f, [x], analytic=wrong) > 5e-3
        assert finite_diff_check(f, [x]) < 1e-8

    def test_coordinate_sampling(self, rng):
        x = Tensor(rng.normal(size=100), requires_grad=True)
        assert finite_diff_check(lambda: T.exp(x).sum(), [x], max_coords=10) < 1e-7

    def test_relative_error_floor(self):
        assert relative_error(0.0, 0.0) == 0.0
        assert relative_error(1.0, 1.1) == pytest.approx(0.1 / 1.1)


@settings(max_examples=30, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**16))
def test_conv2d_is_linear_in_input(a, b, seed):
    rng = np.random.default_rng(seed)
    x1, x2 = rng.normal(size=(2, 1, 2, 5, 5))
    w = Tensor(rng.normal(size=(3, 2, 3, 3)))
    lhs = T.conv2d(Tensor(a * x1 + b * x2), w, padding=1).data
    rhs = a * T.conv2d(Tensor(x1), w, padding=1).data + b * T.conv2d(Tensor(x2), w, padding=1).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**16), stride=st.sampled_from([1, 2]), pad=st.integers(0, 2))
def test_conv2d_adjoint_identity(seed, stride, pad):
    """<conv(x), g> == <x, conv^T(g)> where conv^T is the backward pass."""
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 2, 3, 3)))
    y = T.conv2d(x, w, stride=stride, padding=pad)
    g = rng.normal(size=y.shape)
    T.backward((y * Tensor(g)).sum())
    assert np.sum(y.data * g) == pytest.approx(np.sum(x.data * x.grad), rel=1e-10, abs=1e-10)
