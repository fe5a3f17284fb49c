import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from npnet import ops
from npnet.ops import BatchNormState, ConvSpec, ShapeError


def naive_conv(x, w, b=None, stride=1, padding=0, dilation=1):
    """Sliding-window dot products, one output element at a time."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding : padding + h, padding : padding + wd] = x
    ho = (h + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0 if b is None else float(b[oi])
                    for ci in range(c):
                        for i in range(k):
                            for j in range(k):
                                acc += xp[ni, ci, y * stride + i * dilation, xx * stride + j * dilation] * w[oi, ci, i, j]
                    out[ni, oi, y, xx] = acc
    return out


def reference_bilinear(img, out_h, out_w):
    """Per-pixel half-pixel-center bilinear interpolation of a 2-D array."""
    in_h, in_w = img.shape
    out = np.zeros((out_h, out_w))
    for dy in range(out_h):
        sy = min(max((dy + 0.5) * in_h / out_h - 0.5, 0), in_h - 1)
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, in_h - 1)
        fy = sy - y0
        for dx in range(out_w):
            sx = min(max((dx + 0.5) * in_w / out_w - 0.5, 0), in_w - 1)
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, in_w - 1)
            fx = sx - x0
            top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
            bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
            out[dy, dx] = top * (1 - fy) + bot * fy
    return out


class TestConv2d:
    def test_all_ones_kernel_sums_window(self):
        x = np.arange(1, 10, dtype=np.float32).reshape(1, 1, 3, 3)
        w = np.ones((1, 1, 3, 3), np.float32)
        out = ops.conv2d(x, ConvSpec(w))
        assert out.shape == (1, 1, 1, 1)
        assert out[0, 0, 0, 0] == naive_conv(x, w)[0, 0, 0, 0] == 45

    def test_unit_1x1_kernel_is_identity(self, rng):
        x = rng.standard_normal((2, 1, 5, 7)).astype(np.float32)
        out = ops.conv2d(x, ConvSpec(np.ones((1, 1, 1, 1), np.float32)))
        np.testing.assert_array_equal(out, x)

    def test_stride2_shape(self):
        x = np.zeros((1, 3, 224, 224), np.float32)
        spec = ConvSpec(np.zeros((8, 3, 3, 3), np.float32), stride=2, padding=1)
        assert ops.conv2d(x, spec).shape == (1, 8, 112, 112)

    def test_dilated_extent(self):
        x = np.ones((1, 1, 11, 11), np.float32)
        out = ops.conv2d(x, ConvSpec(np.ones((1, 1, 3, 3), np.float32), dilation=5))
        assert out.shape == (1, 1, 1, 1)
        assert out[0, 0, 0, 0] == 9

    @pytest.mark.parametrize(
        "stride,padding,dilation,k,bias",
        [(1, 1, 1, 3, True), (2, 1, 1, 3, False), (1, 3, 3, 3, False), (2, 2, 2, 3, True), (1, 0, 1, 1, True)],
    )
    def test_matches_naive_oracle(self, rng, stride, padding, dilation, k, bias):
        x = rng.standard_normal((2, 3, 9, 8)).astype(np.float32)
        w = rng.standard_normal((4, 3, k, k)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32) if bias else None
        got = ops.conv2d(x, ConvSpec(w, b, stride, padding, dilation))
        np.testing.assert_allclose(got, naive_conv(x, w, b, stride, padding, dilation), atol=1e-4)

    def test_channel_mismatch_names_dimension(self):
        with pytest.raises(ShapeError, match="channel"):
            ops.conv2d(np.zeros((1, 2, 4, 4), np.float32), ConvSpec(np.zeros((1, 3, 3, 3), np.float32)))

    def test_too_small_input_rejected(self):
        with pytest.raises(ShapeError, match="height"):
            ops.conv2d(np.zeros((1, 1, 2, 9), np.float32), ConvSpec(np.zeros((1, 1, 3, 3), np.float32)))

    def test_linearity(self, rng):
        x = rng.standard_normal((2, 4, 8, 8)).astype(np.float32)
        y = rng.standard_normal((2, 4, 8, 8)).astype(np.float32)
        spec = ConvSpec(rng.standard_normal((3, 4, 3, 3)).astype(np.float32), padding=2, dilation=2)
        a, b = 0.7, -1.3
        lhs = ops.conv2d(a * x + b * y, spec)
        rhs = a * ops.conv2d(x, spec) + b * ops.conv2d(y, spec)
        assert np.abs(lhs - rhs).max() <= 1e-4

    @settings(max_examples=40, deadline=None)
    @given(
        st.sampled_from([(3, 1, 1), (3, 2, 1), (3, 1, 5), (3, 1, 15), (3, 1, 20), (1, 1, 1)]),
        st.integers(1, 64),
        st.integers(1, 64),
    )
    def test_shape_law(self, conf, h, w):
        k, stride, dilation = conf
        padding = dilation * (k - 1) // 2
        spec = ConvSpec(np.zeros((1, 1, k, k), np.float32), stride=stride, padding=padding, dilation=dilation)
        expect_h = (h + 2 * padding - dilation * (k - 1) - 1) // stride + 1
        expect_w = (w + 2 * padding - dilation * (k - 1) - 1) // stride + 1
        assert ops.conv2d(np.zeros((1, 1, h, w), np.float32), spec).shape == (1, 1, expect_h, expect_w)

    def test_shape_law_exhaustive_npnet_set(self):
        # every (kernel, stride, dilation) used by NPNet, padding as the model uses it
        for k, stride, dilation in [(3, 2, 1), (3, 1, 1), (3, 1, 5), (3, 1, 15), (3, 1, 20), (1, 1, 1)]:
            padding = dilation * (k - 1) // 2
            extent = dilation * (k - 1) + 1
            spec = ConvSpec(np.zeros((1, 1, k, k), np.float32), stride=stride, padding=padding, dilation=dilation)
            for h in range(max(1, extent - 2 * padding), 65):
                out = spec.output_shape((1, 1, h, h))
                assert out[2] == (h + 2 * padding - dilation * (k - 1) - 1) // stride + 1


class TestBatchnorm:
    def test_constant_channel_goes_to_zero(self):
        x = np.full((2, 1, 3, 3), 7.0, np.float32)
        out = ops.batchnorm(x, BatchNormState.fresh(1))
        np.testing.assert_array_equal(out, 0)

    def test_normalizes_1234(self):
        x = np.array([1, 2, 3, 4], np.float32).reshape(1, 1, 2, 2)
        out = ops.batchnorm(x, BatchNormState.fresh(1))
        # oracle: direct mean/variance
        expected = (x - 2.5) / np.sqrt(1.25 + 1e-5)
        np.testing.assert_allclose(out, expected, rtol=1e-6)
        assert abs(out.mean()) < 1e-6
        assert abs(out.var() - 1) < 1e-4

    def test_eval_identity(self, rng):
        x = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
        state = BatchNormState.fresh(3, mode="eval")
        np.testing.assert_allclose(ops.batchnorm(x, state), x, rtol=1e-5)

    def test_running_stats_update(self):
        x = np.array([1, 2, 3, 4], np.float32).reshape(1, 1, 2, 2)
        state = BatchNormState.fresh(1)
        ops.batchnorm(x, state)
        np.testing.assert_allclose(state.running_mean, [0.1 * 2.5])
        np.testing.assert_allclose(state.running_var, [0.9 + 0.1 * (5 / 3)], rtol=1e-6)

    def test_eval_mode_leaves_running_stats(self, rng):
        state = BatchNormState.fresh(2, mode="eval")
        ops.batchnorm(rng.standard_normal((2, 2, 3, 3)).astype(np.float32), state)
        np.testing.assert_array_equal(state.running_mean, 0)
        np.testing.assert_array_equal(state.running_var, 1)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError, match="channel"):
            ops.batchnorm(np.zeros((1, 3, 2, 2), np.float32), BatchNormState.fresh(2))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.floats(1, 50), st.floats(-20, 20))
    def test_train_output_standardized(self, seed, scale, shift):
        x = (np.random.default_rng(seed).standard_normal((2, 4, 8, 8)) * scale + shift).astype(np.float32)
        out = ops.batchnorm(x, BatchNormState.fresh(4))
        assert np.abs(out.mean(axis=(0, 2, 3))).max() <= 1e-4
        assert np.abs(out.var(axis=(0, 2, 3)) - 1).max() <= 1e-3


class TestActivations:
    def test_relu(self):
        np.testing.assert_array_equal(ops.relu(np.array([-2.0, 3.0], np.float32)), [0, 3])

    def test_sigmoid_at_zero(self):
        assert ops.sigmoid(np.zeros(1, np.float32))[0] == 0.5
        assert ops.sigmoid_backward(np.ones(1, np.float32), np.zeros(1, np.float32))[0] == 0.25

    def test_sigmoid_saturates_without_overflow(self):
        with np.errstate(all="raise"):
            out = ops.sigmoid(np.array([-1e4, 1e4], np.float32))
        np.testing.assert_array_equal(out, [0, 1])

    def test_dispatch(self):
        x = np.array([-1.0, 1.0], np.float32)
        np.testing.assert_array_equal(ops.activation(x, "relu"), ops.relu(x))
        with pytest.raises(ValueError):
            ops.activation(x, "tanh")


class TestPoolConcatScale:
    def test_gap(self):
        x = np.array([1, 2, 3, 4], np.float32).reshape(1, 1, 2, 2)
        assert ops.global_avg_pool(x)[0, 0, 0, 0] == 2.5

    def test_gap_constant_and_shape(self):
        out = ops.global_avg_pool(np.full((3, 5, 4, 6), 1.5, np.float32))
        assert out.shape == (3, 5, 1, 1)
        np.testing.assert_array_equal(out, 1.5)

    def test_gap_backward_uniform(self):
        g = ops.global_avg_pool_backward(np.ones((1, 1, 1, 1), np.float32), np.zeros((1, 1, 2, 4), np.float32))
        np.testing.assert_array_equal(g, 1 / 8)

    def test_concat_shapes(self):
        a = np.zeros((1, 64, 28, 28), np.float32)
        assert ops.concat_channels(a, a).shape == (1, 128, 28, 28)
        assert ops.concat_many([a] * 4).shape == (1, 256, 28, 28)

    def test_concat_then_slice(self, rng):
        x = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
        out = ops.concat_channels(x, np.zeros((2, 5, 4, 4), np.float32))
        np.testing.assert_array_equal(out[:, :3], x)
        da, db = ops.split_channels(out, [3, 5])
        np.testing.assert_array_equal(da, x)
        assert db.shape == (2, 5, 4, 4)

    def test_concat_mismatch(self):
        with pytest.raises(ShapeError, match="height"):
            ops.concat_channels(np.zeros((1, 1, 4, 4), np.float32), np.zeros((1, 1, 5, 4), np.float32))

    def test_channel_scale(self, rng):
        x = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
        np.testing.assert_array_equal(ops.channel_scale(x, np.ones((2, 3, 1, 1), np.float32)), x)
        np.testing.assert_array_equal(ops.channel_scale(x, np.zeros((2, 3, 1, 1), np.float32)), 0)
        half = ops.sigmoid(np.zeros((1, 2, 1, 1), np.float32))
        np.testing.assert_array_equal(ops.channel_scale(np.full((1, 2, 3, 3), 2, np.float32), half), 1)
        with pytest.raises(ShapeError):
            ops.channel_scale(x, np.ones((2, 4, 1, 1), np.float32))


class TestBilinear:
    def test_identity(self, rng):
        x = rng.standard_normal((1, 2, 5, 7)).astype(np.float32)
        np.testing.assert_array_equal(ops.bilinear_resize(x, 5, 7), x)

    def test_2x2_to_4x4_corner(self):
        x = np.array([[1, 2], [3, 4]], np.float32).reshape(1, 1, 2, 2)
        out = ops.bilinear_resize(x, 4, 4)
        assert out[0, 0, 0, 0] == 1
        np.testing.assert_allclose(out[0, 0], reference_bilinear(x[0, 0], 4, 4), atol=1e-6)

    @pytest.mark.parametrize("shape,target", [((3, 4), (24, 32)), ((8, 8), (5, 3)), ((7, 5), (7, 11)), ((1, 1), (4, 4))])
    def test_matches_reference(self, rng, shape, target):
        img = rng.standard_normal(shape).astype(np.float32)
        got = ops.bilinear_resize(img[None, None], *target)[0, 0]
        np.testing.assert_allclose(got, reference_bilinear(img, *target), atol=1e-5)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 20), st.integers(1, 20), st.integers(1, 40), st.integers(1, 40), st.floats(-100, 100))
    def test_constant_preserved(self, h, w, oh, ow, c):
        x = np.full((1, 1, h, w), c, np.float32)
        np.testing.assert_allclose(ops.bilinear_resize(x, oh, ow), np.float32(c), rtol=1e-6, atol=1e-6)

    def test_backward_is_adjoint(self, rng):
        x = rng.standard_normal((1, 2, 4, 6)).astype(np.float32)
        g = rng.standard_normal((1, 2, 9, 5)).astype(np.float32)
        lhs = float((ops.bilinear_resize(x, 9, 5) * g).sum())
        rhs = float((x * ops.bilinear_resize_backward(g, x)).sum())
        assert lhs == pytest.approx(rhs, rel=1e-5)


class TestCrossEntropy:
    def test_uniform_logits(self):
        logits = np.zeros((2, 2, 3, 3), np.float32)
        target = np.zeros((2, 3, 3), np.int64)
        assert ops.softmax_cross_entropy(logits, target) == pytest.approx(math.log(2), abs=1e-7)

    def test_saturated(self):
        logits = np.zeros((1, 2, 2, 2), np.float32)
        logits[:, 1] = 20
        assert ops.softmax_cross_entropy(logits, np.ones((1, 2, 2), np.int64)) < 1e-6

    def test_gradient_uniform(self):
        logits = np.zeros((1, 2, 2, 3), np.float32)
        target = np.zeros((1, 2, 3), np.int64)
        g = ops.softmax_cross_entropy_backward(logits, target)
        np.testing.assert_allclose(g[0, :, 0, 0], np.array([-0.5, 0.5]) / 6, rtol=1e-6)

    def test_out_of_range(self):
        with pytest.raises(ValueError, match="range"):
            ops.softmax_cross_entropy(np.zeros((1, 2, 1, 1), np.float32), np.full((1, 1, 1), 2))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 5), st.floats(0.01, 30))
    def test_nonnegative(self, seed, k, scale):
        r = np.random.default_rng(seed)
        logits = (r.standard_normal((2, k, 3, 3)) * scale).astype(np.float32)
        assert ops.softmax_cross_entropy(logits, r.integers(0, k, (2, 3, 3))) >= 0

    @pytest.mark.parametrize("k", [2, 3, 7])
    def test_ln_k_on_zero_logits(self, k):
        loss = ops.softmax_cross_entropy(np.zeros((1, k, 2, 2), np.float32), np.zeros((1, 2, 2), np.int64))
        assert loss == pytest.approx(math.log(k), abs=1e-7)


def test_finite_outputs_on_finite_inputs(rng):
    x = (rng.standard_normal((2, 4, 8, 8)) * 100).astype(np.float32)
    spec = ConvSpec(rng.standard_normal((4, 4, 3, 3)).astype(np.float32), padding=1)
    y = ops.conv2d(x, spec)
    state = BatchNormState.fresh(4)
    z = ops.batchnorm(y, state)
    dx, dw, _ = ops.conv2d_backward(ops.batchnorm_backward(np.ones_like(z), y, state)[0], x, spec)
    for arr in (y, z, dx, dw, state.running_var):
        assert np.isfinite(arr).all()
