import numpy as np
import pytest

from app.backend.core.errors import NonFinite, NonIntegralOutput, ShapeMismatch, ShapeOverflow
from app.backend.core.tensor import (
    check_finite,
    col2im,
    conv2d,
    conv2d_backward,
    conv2d_forward,
    conv_output_extent,
    element_count,
    ewise,
    im2col,
    log_softmax,
    matmul,
    maxpool2d,
    maxpool2d_backward,
    pool_output_extent,
    softmax,
)


def naive_conv(x, w, b, stride, pad):
    c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, [(0, 0), (pad, pad), (pad, pad)])
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((o, oh, ow))
    for f in range(o):
        for i in range(oh):
            for j in range(ow):
                for ch in range(c):
                    for u in range(k):
                        for v in range(k):
                            out[f, i, j] += xp[ch, i * stride + u, j * stride + v] * w[f, ch, u, v]
                out[f, i, j] += b[f]
    return out


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 0.0], [0.0, 1.0]])
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        np.testing.assert_array_equal(matmul(a, b), b)

    def test_row_times_column(self):
        assert matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]])).tolist() == [[11.0]]

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(7, 5)), rng.normal(size=(5, 3))
        expected = np.array([[sum(a[i, k] * b[k, j] for k in range(5)) for j in range(3)] for i in range(7)])
        np.testing.assert_allclose(matmul(a, b), expected, atol=1e-12)

    def test_inner_dimension_mismatch(self):
        with pytest.raises(ShapeMismatch):
            matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_random_shapes_match_triple_loop(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            m, k, n = (int(v) for v in rng.integers(1, 7, size=3))
            a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
            expected = np.array([[sum(a[i, t] * b[t, j] for t in range(k)) for j in range(n)] for i in range(m)])
            np.testing.assert_allclose(matmul(a, b), expected, atol=1e-12)

    def test_associative(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            m, k, l, n = (int(v) for v in rng.integers(1, 9, size=4))
            a, b, c = rng.normal(size=(m, k)), rng.normal(size=(k, l)), rng.normal(size=(l, n))
            np.testing.assert_allclose(matmul(matmul(a, b), c), matmul(a, matmul(b, c)), rtol=1e-9, atol=1e-9)


class TestConv:
    def test_scalar_kernel_scales(self):
        out = conv2d(np.ones((1, 3, 3)), np.full((1, 1, 1, 1), 2.0), np.zeros(1))
        np.testing.assert_array_equal(out, np.full((1, 3, 3), 2.0))

    def test_full_kernel_sums(self):
        out = conv2d(np.array([[[1.0, 2.0], [3.0, 4.0]]]), np.ones((1, 1, 2, 2)), np.zeros(1))
        assert out.tolist() == [[[10.0]]]

    def test_matches_direct_loops(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(3, 9, 9))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        out = conv2d(x, w, b, stride=2, pad=1)
        assert out.shape == (4, 5, 5)
        np.testing.assert_allclose(out, naive_conv(x, w, b, 2, 1), atol=1e-12)

    def test_random_shapes_match_direct_loops(self):
        rng = np.random.default_rng(12)
        for _ in range(15):
            c, o = (int(v) for v in rng.integers(1, 4, size=2))
            k = int(rng.integers(1, 4))
            stride = int(rng.integers(1, 3))
            pad = int(rng.integers(0, k))
            out_extent = int(rng.integers(1, 5))
            # input extent chosen so the windows tile exactly
            size = (out_extent - 1) * stride + k - 2 * pad
            if size < 1:
                continue
            x = rng.normal(size=(c, size, size))
            w = rng.normal(size=(o, c, k, k))
            b = rng.normal(size=o)
            out = conv2d(x, w, b, stride=stride, pad=pad)
            assert out.shape == (o, out_extent, out_extent)
            np.testing.assert_allclose(out, naive_conv(x, w, b, stride, pad), atol=1e-12)

    def test_one_by_one_is_per_position_matmul(self):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(4, 5, 6))
        w = rng.normal(size=(3, 4, 1, 1))
        b = rng.normal(size=3)
        out = conv2d(x, w, b)
        for i in range(5):
            for j in range(6):
                expected = matmul(w[:, :, 0, 0], x[:, i, j][:, None])[:, 0] + b
                np.testing.assert_allclose(out[:, i, j], expected, atol=1e-12)

    def test_batch_equals_per_sample(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 2, 6, 6))
        w = rng.normal(size=(5, 2, 3, 3))
        b = rng.normal(size=5)
        batched = conv2d(x, w, b)
        for n in range(3):
            np.testing.assert_allclose(batched[n], conv2d(x[n], w, b), atol=1e-12)

    def test_non_integral_output(self):
        with pytest.raises(NonIntegralOutput):
            conv_output_extent(8, 3, 2, 0)

    def test_kernel_larger_than_input(self):
        with pytest.raises(ShapeMismatch):
            conv_output_extent(2, 5, 1, 0)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeMismatch):
            conv2d(np.zeros((2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))

    def test_col2im_is_adjoint_of_im2col(self):
        rng = np.random.default_rng(3)
        shape = (2, 3, 7, 7)
        x = rng.normal(size=shape)
        col = im2col(x, 3, 3, stride=2, pad=1)
        y = rng.normal(size=col.shape)
        lhs = float((col * y).sum())
        rhs = float((x * col2im(y, shape, 3, 3, stride=2, pad=1)).sum())
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(2, 2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        g = rng.normal(size=(2, 3, 3, 3))
        out, col = conv2d_forward(x, w, b, stride=1, pad=0)
        dx, dw, db = conv2d_backward(g, col, x.shape, w, 1, 0)

        def loss(x_, w_, b_):
            return float((conv2d_forward(x_, w_, b_, 1, 0)[0] * g).sum())

        h = 1e-6
        for arr, grad in ((x, dx), (w, dw), (b, db)):
            flat, gflat = arr.reshape(-1), grad.reshape(-1)
            for j in range(0, flat.size, 7):
                orig = flat[j]
                flat[j] = orig + h
                plus = loss(x, w, b)
                flat[j] = orig - h
                minus = loss(x, w, b)
                flat[j] = orig
                assert gflat[j] == pytest.approx((plus - minus) / (2 * h), abs=1e-6)


class TestMaxPool:
    def test_max_of_four(self):
        out, _ = maxpool2d(np.array([[[1.0, 2.0], [3.0, 4.0]]]), 2, 2)
        assert out.tolist() == [[[4.0]]]

    def test_constant_input_routes_to_lowest_index(self):
        x = np.ones((1, 4, 4))
        out, argmax = maxpool2d(x, 2, 2)
        np.testing.assert_array_equal(out, np.ones((1, 2, 2)))
        assert argmax.tolist() == [[[0, 2], [8, 10]]]
        grad = maxpool2d_backward(np.ones((1, 2, 2)), argmax, x.shape)
        expected = np.zeros((1, 4, 4))
        expected[0, ::2, ::2] = 1.0
        np.testing.assert_array_equal(grad, expected)

    def test_matches_window_scan(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(1, 6, 6))
        out, _ = maxpool2d(x, 3, 2)
        oh = pool_output_extent(6, 3, 2)
        assert out.shape == (1, oh, oh)
        for i in range(oh):
            for j in range(oh):
                window = x[0, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
                assert out[0, i, j] == window.max()

    def test_overhanging_windows_are_truncated(self):
        assert pool_output_extent(55, 3, 2) == 27
        assert pool_output_extent(32, 3, 2) == 16
        x = np.arange(16.0).reshape(1, 4, 4)
        out, _ = maxpool2d(x, 3, 2)
        assert out.tolist() == [[[10.0, 11.0], [14.0, 15.0]]]

    def test_random_shapes_match_window_scan(self):
        rng = np.random.default_rng(14)
        for _ in range(20):
            k = int(rng.integers(1, 4))
            stride = int(rng.integers(1, 4))
            h, w = (int(v) for v in rng.integers(k, 10, size=2))
            x = rng.normal(size=(2, h, w))
            out, _ = maxpool2d(x, k, stride)
            oh, ow = pool_output_extent(h, k, stride), pool_output_extent(w, k, stride)
            assert out.shape == (2, oh, ow)
            for ch in range(2):
                for i in range(oh):
                    for j in range(ow):
                        window = x[ch, i * stride:i * stride + k, j * stride:j * stride + k]
                        assert out[ch, i, j] == window.max()

    def test_stride_larger_than_kernel(self):
        assert pool_output_extent(5, 1, 3) == 2
        assert pool_output_extent(7, 2, 3) == 3
        x = np.arange(25.0).reshape(1, 5, 5)
        out, argmax = maxpool2d(x, 1, 3)
        assert out.tolist() == [[[0.0, 3.0], [15.0, 18.0]]]
        assert argmax.tolist() == [[[0, 3], [15, 18]]]
        grad = maxpool2d_backward(np.ones((1, 2, 2)), argmax, x.shape)
        expected = np.zeros((1, 5, 5))
        expected[0, ::3, ::3] = 1.0
        np.testing.assert_array_equal(grad, expected)

    def test_overlapping_windows_accumulate(self):
        x = np.zeros((1, 3, 3))
        x[0, 1, 1] = 5.0
        _, argmax = maxpool2d(x, 2, 1)
        grad = maxpool2d_backward(np.ones((1, 2, 2)), argmax, x.shape)
        assert grad[0, 1, 1] == 4.0
        assert grad.sum() == 4.0


class TestElementwise:
    def test_relu(self):
        assert ewise("relu", np.array([-1.0, 0.0, 2.0])).tolist() == [0.0, 0.0, 2.0]

    def test_mul(self):
        assert ewise("mul", np.array([2.0, 3.0]), np.array([4.0, 5.0])).tolist() == [8.0, 15.0]

    def test_pow_cube_root(self):
        assert ewise("pow", np.array([8.0]), 1 / 3)[0] == pytest.approx(2.0, rel=1e-15)

    def test_add_and_scale(self):
        a = np.array([1.0, 2.0])
        assert ewise("add", a, a, a).tolist() == [3.0, 6.0]
        assert ewise("scale", a, 0.5).tolist() == [0.5, 1.0]

    def test_no_broadcasting(self):
        with pytest.raises(ShapeMismatch):
            ewise("add", np.zeros(2), np.zeros((2, 1)))

    def test_unknown_op(self):
        with pytest.raises(ValueError):
            ewise("tanh", np.zeros(2))


class TestHelpers:
    def test_element_count(self):
        assert element_count((3, 227, 227)) == 154587

    def test_element_count_overflow(self):
        with pytest.raises(ShapeOverflow):
            element_count((2**32, 2**32))

    def test_zero_extent(self):
        with pytest.raises(ShapeMismatch):
            element_count((3, 0, 4))

    def test_check_finite(self):
        with pytest.raises(NonFinite):
            check_finite(np.array([1.0, np.nan]), "test")

    def test_softmax_is_stable(self):
        logits = np.array([[1000.0, 1000.0], [0.0, np.log(3.0)]])
        np.testing.assert_allclose(softmax(logits), [[0.5, 0.5], [0.25, 0.75]], atol=1e-12)
        np.testing.assert_allclose(np.exp(log_softmax(logits)), softmax(logits), atol=1e-12)
