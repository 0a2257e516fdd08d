import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dupsample.tensor_kernels import (
    ConvKernel,
    ShapeError,
    bilinear_resize,
    bilinear_resize_backward,
    conv2d_backward,
    conv2d_forward,
    depth_to_space,
    linear_map,
    space_to_depth,
)

from conftest import central_diff, max_rel_error


def naive_conv(x, w, b, stride, pad):
    """Loop-by-loop cross-correlation used as an oracle."""
    pt, pb, pl, pr = pad
    H, W, cin = x.shape
    kh, kw, _, cout = w.shape
    xp = np.zeros((H + pt + pb, W + pl + pr, cin))
    xp[pt:pt + H, pl:pl + W] = x
    oh = (H + pt + pb - kh) // stride + 1
    ow = (W + pl + pr - kw) // stride + 1
    out = np.zeros((oh, ow, cout))
    for i in range(oh):
        for j in range(ow):
            for o in range(cout):
                acc = b[o]
                for a in range(kh):
                    for c in range(kw):
                        for ci in range(cin):
                            acc += xp[i * stride + a, j * stride + c, ci] * w[a, c, ci, o]
                out[i, j, o] = acc
    return out


def direct_bilinear(x, out_h, out_w):
    """Per-pixel evaluation of the half-pixel formula."""
    H, W, C = x.shape
    out = np.zeros((out_h, out_w, C))

    def src(d, n_in, n_out):
        s = (d + 0.5) * n_in / n_out - 0.5
        s = min(max(s, 0.0), n_in - 1)
        i0 = int(np.floor(s))
        return i0, min(i0 + 1, n_in - 1), s - i0

    for i in range(out_h):
        y0, y1, fy = src(i, H, out_h)
        for j in range(out_w):
            x0, x1, fx = src(j, W, out_w)
            out[i, j] = ((1 - fy) * (1 - fx) * x[y0, x0] + (1 - fy) * fx * x[y0, x1]
                         + fy * (1 - fx) * x[y1, x0] + fy * fx * x[y1, x1])
    return out


class TestConvForward:
    def test_scalar_affine(self):
        k = ConvKernel(np.full((1, 1, 1, 1), 2.0), [3.0])
        np.testing.assert_array_equal(conv2d_forward(np.full((1, 1, 1), 5.0), k), [[[13.0]]])

    def test_sum_of_ones(self):
        k = ConvKernel(np.ones((3, 3, 1, 1)), [0.0])
        np.testing.assert_array_equal(conv2d_forward(np.ones((3, 3, 1)), k), [[[9.0]]])

    def test_ramp_center_tap_stride2(self):
        x = (4 * np.arange(4)[:, None] + np.arange(4)[None, :]).astype(float)[..., None]
        w = np.zeros((3, 3, 1, 1))
        w[1, 1] = 1.0
        out = conv2d_forward(x, ConvKernel(w, [0.0], stride=2, padding=1))
        np.testing.assert_array_equal(out[..., 0], [[0, 2], [8, 10]])

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, (0, 1, 1, 0)), (3, 2)])
    def test_matches_naive_loop(self, rng, stride, pad):
        x = rng.normal(size=(7, 6, 3))
        w = rng.normal(size=(3, 3, 3, 2))
        b = rng.normal(size=2)
        k = ConvKernel(w, b, stride, pad)
        np.testing.assert_allclose(conv2d_forward(x, k), naive_conv(x, w, b, stride, k.padding), atol=1e-12)

    def test_channel_mismatch_names_dimension(self):
        k = ConvKernel(np.ones((1, 1, 2, 1)), [0.0])
        with pytest.raises(ShapeError, match="channels"):
            conv2d_forward(np.ones((2, 2, 3)), k)

    def test_too_small_input(self):
        k = ConvKernel(np.ones((3, 3, 1, 1)), [0.0])
        with pytest.raises(ShapeError):
            conv2d_forward(np.ones((2, 2, 1)), k)

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError):
            ConvKernel(np.ones((2, 2, 1, 1)), [0.0])


class TestConvBackward:
    def test_scalar_case(self):
        k = ConvKernel(np.full((1, 1, 1, 1), 2.0), [3.0])
        gx, gw, gb = conv2d_backward(np.full((1, 1, 1), 5.0), k, np.ones((1, 1, 1)))
        assert gx.ravel().tolist() == [2.0]
        assert gw.ravel().tolist() == [5.0]
        assert gb.tolist() == [1.0]

    def test_zero_grad_out(self, rng):
        k = ConvKernel(rng.normal(size=(3, 3, 2, 3)), rng.normal(size=3), 2, 1)
        x = rng.normal(size=(5, 5, 2))
        gx, gw, gb = conv2d_backward(x, k, np.zeros((3, 3, 3)))
        assert not gx.any() and not gw.any() and not gb.any()

    def test_grad_out_shape_checked(self, rng):
        k = ConvKernel(rng.normal(size=(3, 3, 2, 3)), np.zeros(3), 1, 1)
        with pytest.raises(ShapeError):
            conv2d_backward(np.zeros((4, 4, 2)), k, np.zeros((4, 4, 2)))

    @pytest.mark.parametrize("shape,stride,pad", [((4, 4, 2), 1, 1), ((8, 8, 4), 2, 1), ((5, 7, 3), 2, (1, 0, 0, 1)),
                                                  ((6, 6, 2), 1, 0)])
    def test_finite_differences(self, rng, shape, stride, pad):
        cout = 3
        x = rng.normal(size=shape)
        w = rng.normal(size=(3, 3, shape[2], cout))
        b = rng.normal(size=cout)
        k0 = ConvKernel(w, b, stride, pad)
        oh, ow = k0.output_size(*shape[:2])
        g = rng.normal(size=(oh, ow, cout))

        def f_x(xv):
            return float(np.sum(conv2d_forward(xv, k0) * g))

        def f_w(wv):
            return float(np.sum(conv2d_forward(x, ConvKernel(wv, b, stride, pad)) * g))

        def f_b(bv):
            return float(np.sum(conv2d_forward(x, ConvKernel(w, bv, stride, pad)) * g))

        gx, gw, gb = conv2d_backward(x, k0, g)
        assert max_rel_error(gx, central_diff(f_x, x)) < 1e-4
        assert max_rel_error(gw, central_diff(f_w, w)) < 1e-4
        assert max_rel_error(gb, central_diff(f_b, b)) < 1e-4

    def test_input_grad_optional(self, rng):
        k = ConvKernel(rng.normal(size=(3, 3, 2, 3)), np.zeros(3), 1, 1)
        x = rng.normal(size=(4, 4, 2))
        g = rng.normal(size=(4, 4, 3))
        full = conv2d_backward(x, k, g)
        part = conv2d_backward(x, k, g, input_grad=False)
        assert part[0] is None
        np.testing.assert_array_equal(full[1], part[1])


class TestBilinear:
    GOLDEN_2x2_TO_4x4 = np.array([
        [1.0, 1.25, 1.75, 2.0],
        [1.5, 1.75, 2.25, 2.5],
        [2.5, 2.75, 3.25, 3.5],
        [3.0, 3.25, 3.75, 4.0],
    ])

    def test_identity_resize_exact(self, rng):
        x = rng.normal(size=(5, 7, 3))
        np.testing.assert_array_equal(bilinear_resize(x, 5, 7), x)

    @pytest.mark.parametrize("size", [(1, 1), (3, 9), (16, 2)])
    def test_constant_map(self, size):
        out = bilinear_resize(np.full((4, 5, 2), 7.0), *size)
        np.testing.assert_allclose(out, 7.0, rtol=0, atol=1e-12)

    def test_golden_2x2_to_4x4(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])[..., None]
        np.testing.assert_allclose(direct_bilinear(x, 4, 4)[..., 0], self.GOLDEN_2x2_TO_4x4, atol=1e-15)
        np.testing.assert_allclose(bilinear_resize(x, 4, 4)[..., 0], self.GOLDEN_2x2_TO_4x4, atol=1e-15)

    @pytest.mark.parametrize("src,dst", [((5, 7), (11, 3)), ((32, 32), (2, 2)), ((1, 3), (4, 4)), ((6, 4), (6, 9))])
    def test_matches_direct_formula(self, rng, src, dst):
        x = rng.normal(size=src + (2,))
        np.testing.assert_allclose(bilinear_resize(x, *dst), direct_bilinear(x, *dst), atol=1e-12)

    def test_linearity(self, rng):
        x, y = rng.normal(size=(2, 5, 6, 3))
        a, b = 1.7, -0.3
        np.testing.assert_allclose(bilinear_resize(a * x + b * y, 9, 4),
                                   a * bilinear_resize(x, 9, 4) + b * bilinear_resize(y, 9, 4), atol=1e-6)

    def test_backward_identity_size(self, rng):
        g = rng.normal(size=(4, 3, 2))
        np.testing.assert_array_equal(bilinear_resize_backward(g, 4, 3), g)

    def test_transpose_identity(self, rng):
        for _ in range(5):
            x = rng.normal(size=(5, 7, 2))
            g = rng.normal(size=(11, 3, 2))
            lhs = np.sum(bilinear_resize(x, 11, 3) * g)
            rhs = np.sum(x * bilinear_resize_backward(g, 5, 7))
            assert abs(lhs - rhs) < 1e-6

    def test_backward_preserves_total_weight(self):
        gx = bilinear_resize_backward(np.ones((4, 4, 1)), 2, 2)
        assert gx.sum() == pytest.approx(16.0, abs=1e-12)

    def test_bad_size(self):
        with pytest.raises(ValueError):
            bilinear_resize(np.ones((2, 2, 1)), 0, 3)


class TestDepthToSpace:
    def test_r1_identity(self, rng):
        x = rng.normal(size=(3, 4, 5))
        np.testing.assert_array_equal(depth_to_space(x, 1), x)
        np.testing.assert_array_equal(space_to_depth(x, 1), x)

    def test_unrolled(self):
        x = np.array([10.0, 20.0, 30.0, 40.0]).reshape(1, 1, 4)
        np.testing.assert_array_equal(depth_to_space(x, 2)[..., 0], [[10, 20], [30, 40]])
        np.testing.assert_array_equal(space_to_depth(np.array([[10.0, 20.0], [30.0, 40.0]])[..., None], 2).ravel(),
                                      [10, 20, 30, 40])

    def test_index_formula(self, rng):
        r, co = 3, 2
        x = rng.normal(size=(2, 3, r * r * co))
        y = depth_to_space(x, r)
        for i in range(2):
            for j in range(3):
                for a in range(r):
                    for b in range(r):
                        for c in range(co):
                            assert y[i * r + a, j * r + b, c] == x[i, j, (a * r + b) * co + c]

    @given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2 ** 32 - 1))
    def test_inverse_pair_and_multiset(self, r, h, w, c, seed):
        x = np.random.default_rng(seed).normal(size=(h, w, r * r * c))
        y = depth_to_space(x, r)
        np.testing.assert_array_equal(space_to_depth(y, r), x)
        np.testing.assert_array_equal(np.sort(y.ravel()), np.sort(x.ravel()))
        z = np.random.default_rng(seed).normal(size=(h * r, w * r, c))
        np.testing.assert_array_equal(depth_to_space(space_to_depth(z, r), r), z)

    def test_divisibility_errors(self):
        with pytest.raises(ShapeError):
            depth_to_space(np.ones((1, 1, 3)), 2)
        with pytest.raises(ShapeError):
            space_to_depth(np.ones((3, 4, 1)), 2)


class TestLinearMap:
    def test_identity(self, rng):
        x = rng.normal(size=(3, 4))
        np.testing.assert_array_equal(linear_map(x, np.eye(4)), x)

    def test_dot(self):
        assert linear_map([[1, 2]], [[3], [4]]).tolist() == [[11.0]]

    def test_associativity(self, rng):
        a, b, c = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=(2, 5))
        np.testing.assert_allclose(linear_map(linear_map(a, b), c), linear_map(a, linear_map(b, c)), atol=1e-6)

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            linear_map(np.ones((2, 3)), np.ones((2, 3)))


def test_1x1_conv_equals_per_pixel_linear_map(rng):
    x = rng.normal(size=(5, 6, 4))
    w = rng.normal(size=(1, 1, 4, 3))
    out = conv2d_forward(x, ConvKernel(w, np.zeros(3)))
    ref = linear_map(x.reshape(-1, 4), w[0, 0]).reshape(5, 6, 3)
    assert np.max(np.abs(out - ref)) < 1e-6


@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 4), st.sampled_from([1, 2]), st.integers(0, 1),
       st.integers(0, 2 ** 32 - 1))
def test_conv_grad_random_shapes(h, w, c, stride, pad, seed):
    rng = np.random.default_rng(seed)
    if h + 2 * pad < 3 or w + 2 * pad < 3:
        return
    k = ConvKernel(rng.normal(size=(3, 3, c, 2)), rng.normal(size=2), stride, pad)
    x = rng.normal(size=(h, w, c))
    oh, ow = k.output_size(h, w)
    g = rng.normal(size=(oh, ow, 2))
    gx, _, _ = conv2d_backward(x, k, g)
    num = central_diff(lambda xv: float(np.sum(conv2d_forward(xv, k) * g)), x)
    assert max_rel_error(gx, num) < 1e-4
