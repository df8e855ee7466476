"""Gradient checks for the layer primitives, all at float64."""
import numpy as np
import pytest

from spikeflow import ops
from spikeflow.errors import ShapeError


def numerical_grad(f, x, eps=1e-6):
    """Central differences of a scalar function with respect to every entry of x."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=['multi_index'])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        plus = f()
        x[idx] = old - eps
        minus = f()
        x[idx] = old
        grad[idx] = (plus - minus) / (2 * eps)
    return grad


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TestConv2d:
    def test_ones_kernel_sums_window(self):
        out = ops.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)))
        assert out.shape == (1, 1, 1, 1)
        assert out[0, 0, 0, 0] == 9.0

    def test_identity_kernel(self, rng):
        x = rng.normal(size=(2, 1, 5, 6))
        weight = np.zeros((1, 1, 3, 3))
        weight[0, 0, 1, 1] = 1.0
        np.testing.assert_array_equal(ops.conv2d(x, weight, padding=1), x)

    def test_stride_two_halves_resolution(self, rng):
        out = ops.conv2d(rng.normal(size=(1, 2, 16, 12)), rng.normal(size=(3, 2, 3, 3)), stride=2, padding=1)
        assert out.shape == (1, 3, 8, 6)
        assert ops.conv_output_size(16, 3, 2, 1) == 8

    def test_linear_in_input(self, rng):
        x = rng.normal(size=(1, 2, 6, 6))
        w = rng.normal(size=(3, 2, 3, 3))
        np.testing.assert_allclose(ops.conv2d(2.5 * x, w, padding=1), 2.5 * ops.conv2d(x, w, padding=1))

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError, match='3 channels'):
            ops.conv2d(rng.normal(size=(1, 3, 4, 4)), rng.normal(size=(2, 2, 3, 3)))

    @pytest.mark.parametrize('stride,padding', [(1, 1), (2, 1), (1, 0)])
    def test_backward_matches_finite_differences(self, rng, stride, padding):
        x = rng.normal(size=(2, 3, 8, 8))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        g = rng.normal(size=ops.conv2d(x, w, b, stride, padding).shape)

        def loss():
            return float(np.sum(ops.conv2d(x, w, b, stride, padding) * g))

        dx, dw, db = ops.conv2d_backward(g, x, w, stride, padding)
        assert rel_err(dx, numerical_grad(loss, x)) <= 1e-5
        assert rel_err(dw, numerical_grad(loss, w)) <= 1e-5
        assert rel_err(db, numerical_grad(loss, b)) <= 1e-5

    def test_backward_without_input_grad(self, rng):
        x = rng.normal(size=(1, 2, 4, 4))
        w = rng.normal(size=(2, 2, 3, 3))
        g = rng.normal(size=(1, 2, 4, 4))
        dx, dw, _ = ops.conv2d_backward(g, x, w, 1, 1, need_dx=False)
        assert dx is None
        np.testing.assert_allclose(dw, ops.conv2d_backward(g, x, w, 1, 1)[1])

    def test_adjoint_identity(self, rng):
        x = rng.normal(size=(2, 3, 8, 8))
        w = rng.normal(size=(4, 3, 3, 3))
        v = rng.normal(size=(2, 4, 4, 4))
        lhs = np.sum(ops.conv2d(x, w, stride=2, padding=1) * v)
        dx, _, _ = ops.conv2d_backward(v, x, w, 2, 1)
        assert np.sum(x * dx) == pytest.approx(lhs, rel=1e-6, abs=1e-9)


class TestUpsample:
    def test_constant_stays_constant(self):
        out = ops.upsample_bilinear2x(np.full((1, 2, 3, 5), 5.0))
        assert out.shape == (1, 2, 6, 10)
        np.testing.assert_allclose(out, 5.0)

    def test_single_pixel(self):
        out = ops.upsample_bilinear2x(np.array([[[[7.0]]]]))
        np.testing.assert_array_equal(out, np.full((1, 1, 2, 2), 7.0))

    def test_half_pixel_centres(self):
        out = ops.upsample_bilinear2x(np.array([[0.0, 4.0]]))
        np.testing.assert_allclose(out[0], [0.0, 1.0, 3.0, 4.0])

    def test_backward_matches_finite_differences(self, rng):
        x = rng.normal(size=(1, 2, 3, 4))
        g = rng.normal(size=(1, 2, 6, 8))
        grad = ops.upsample_bilinear2x_backward(g)
        assert rel_err(grad, numerical_grad(lambda: float(np.sum(ops.upsample_bilinear2x(x) * g)), x)) <= 1e-5

    def test_adjoint_identity(self, rng):
        x = rng.normal(size=(2, 3, 5, 4))
        v = rng.normal(size=(2, 3, 10, 8))
        lhs = np.sum(ops.upsample_bilinear2x(x) * v)
        assert np.sum(x * ops.upsample_bilinear2x_backward(v)) == pytest.approx(lhs, rel=1e-6, abs=1e-9)


class TestBilinearWarp:
    def test_zero_flow_is_identity(self, rng):
        image = rng.random((6, 7))
        np.testing.assert_array_equal(ops.bilinear_warp(image, np.zeros((2, 6, 7))), image)

    def test_integer_flow_recovers_shifted_image(self, rng):
        image = rng.random((5, 6))
        shifted = np.zeros_like(image)
        shifted[:, 1:] = image[:, :-1]
        flow = np.zeros((2, 5, 6))
        flow[0] = 1.0
        warped = ops.bilinear_warp(shifted, flow)
        np.testing.assert_allclose(warped[:, :-1], image[:, :-1])

    def test_clamps_to_border(self):
        image = np.arange(12, dtype=np.float64).reshape(3, 4)
        flow = np.zeros((2, 3, 4))
        flow[0] = 10.0
        np.testing.assert_array_equal(ops.bilinear_warp(image, flow), np.repeat(image[:, -1:], 4, axis=1))

    def test_batched_matches_single(self, rng):
        images = rng.random((3, 5, 5))
        flows = rng.uniform(-1, 1, size=(3, 2, 5, 5))
        batched = ops.bilinear_warp(images, flows)
        for i in range(3):
            np.testing.assert_allclose(batched[i], ops.bilinear_warp(images[i], flows[i]))

    def test_flow_gradient_matches_finite_differences(self, rng):
        h, w = 7, 8
        image = rng.random((h, w))
        gy, gx = np.mgrid[0:h, 0:w]
        # Smooth flow with fractional parts away from integer sample positions.
        flow = np.stack([0.25 + 0.1 * np.sin(gx / 3.0), 0.25 + 0.1 * np.cos(gy / 4.0)])
        g = rng.normal(size=(h, w))

        def loss():
            return float(np.sum(ops.bilinear_warp(image, flow) * g))

        _, dflow = ops.bilinear_warp_backward(g, image, flow)
        numeric = numerical_grad(loss, flow)
        assert rel_err(dflow[:, 1:-1, 1:-1], numeric[:, 1:-1, 1:-1]) <= 1e-4

    def test_image_gradient_is_adjoint(self, rng):
        image = rng.random((6, 6))
        flow = rng.uniform(-2, 2, size=(2, 6, 6))
        v = rng.normal(size=(6, 6))
        dimage, _ = ops.bilinear_warp_backward(v, image, flow)
        field = rng.normal(size=(6, 6))
        assert np.sum(ops.bilinear_warp(field, flow) * v) == pytest.approx(np.sum(field * dimage), rel=1e-6, abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ops.bilinear_warp(np.zeros((4, 4)), np.zeros((2, 4, 5)))


class TestPointwise:
    def test_tanh_at_zero(self):
        y = ops.tanh(np.zeros(3))
        np.testing.assert_array_equal(y, 0.0)
        np.testing.assert_array_equal(ops.tanh_backward(np.ones(3), y), 1.0)

    def test_concat_preserves_order(self, rng):
        a = rng.normal(size=(2, 2, 3, 3))
        b = rng.normal(size=(2, 3, 3, 3))
        out = ops.concat_channels([a, b])
        assert out.shape == (2, 5, 3, 3)
        np.testing.assert_array_equal(out[:, :2], a)
        np.testing.assert_array_equal(out[:, 2:], b)
        da, db = ops.concat_channels_backward(out, [2, 3])
        np.testing.assert_array_equal(da, a)
        np.testing.assert_array_equal(db, b)

    def test_add_and_mul(self, rng):
        a, b, g = rng.normal(size=(3, 4, 4))
        da, db = ops.mul_backward(g, a, b)
        np.testing.assert_array_equal(da, g * b)
        np.testing.assert_array_equal(db, g * a)
        assert all(d is g for d in ops.add_backward(g))
        with pytest.raises(ShapeError):
            ops.add(a, np.zeros((3, 3)))

    def test_crop_round_trip(self, rng):
        x = rng.normal(size=(1, 1, 6, 6))
        part = ops.crop(x, 1, 2, 3, 4)
        np.testing.assert_array_equal(part, x[..., 1:4, 2:6])
        back = ops.crop_backward(np.ones_like(part), x.shape, 1, 2)
        assert back.sum() == 12
        with pytest.raises(ShapeError):
            ops.crop(x, 4, 0, 3, 3)

    def test_relu_backward_masks_negative(self):
        y = ops.relu(np.array([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(ops.relu_backward(np.ones(3), y), [0.0, 0.0, 1.0])

    def test_composite_chain(self, rng):
        x = rng.normal(size=(1, 2, 5, 5))
        w = 0.3 * rng.normal(size=(3, 2, 3, 3))
        g = rng.normal(size=(1, 3, 5, 5))

        def loss():
            return float(np.sum(ops.scale(ops.tanh(ops.conv2d(x, w, padding=1)), 4.0) * g))

        y = ops.tanh(ops.conv2d(x, w, padding=1))
        d_pre = ops.tanh_backward(ops.scale_backward(g, 4.0), y)
        dx, dw, _ = ops.conv2d_backward(d_pre, x, w, 1, 1)
        assert rel_err(dx, numerical_grad(loss, x)) <= 1e-5
        assert rel_err(dw, numerical_grad(loss, w)) <= 1e-5
