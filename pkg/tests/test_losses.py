import numpy as np
import pytest

from spikeflow.errors import ConfigError, DataError, ShapeError
from spikeflow.losses import (
    LossConfig,
    charbonnier,
    charbonnier_grad,
    downsample_images,
    interior_mask,
    multiscale_ssl_loss,
    multiscale_supervised_loss,
    photometric_loss,
    smoothness_loss,
    supervised_loss,
    total_ssl_loss,
)
from spikeflow.synth import synth_scene

RHO_ZERO = (1e-6) ** 0.45


@pytest.fixture
def rng():
    return np.random.default_rng(11)


def fd_flow_grad(loss, flow, eps=1e-6):
    grad = np.zeros_like(flow)
    for idx in np.ndindex(flow.shape):
        old = flow[idx]
        flow[idx] = old + eps
        plus = loss()
        flow[idx] = old - eps
        minus = loss()
        flow[idx] = old
        grad[idx] = (plus - minus) / (2 * eps)
    return grad


class TestCharbonnier:
    def test_value_at_zero(self):
        assert charbonnier(0.0) == pytest.approx(1.995262e-3, rel=1e-6)
        assert charbonnier(0.0) == pytest.approx(RHO_ZERO)

    def test_even(self, rng):
        x = rng.normal(size=50)
        np.testing.assert_array_equal(charbonnier(x), charbonnier(-x))

    def test_derivative_matches_finite_differences(self, rng):
        x = rng.normal(size=20)
        eps = 1e-7
        numeric = (charbonnier(x + eps) - charbonnier(x - eps)) / (2 * eps)
        np.testing.assert_allclose(charbonnier_grad(x), numeric, atol=1e-6)


class TestPhotometricLoss:
    def test_shifted_image_recovered_by_flow(self, rng):
        image_t = rng.random((8, 10))
        image_tdt = np.zeros_like(image_t)
        image_tdt[:, 1:] = image_t[:, :-1]
        flow = np.zeros((2, 8, 10))
        flow[0] = 1.0
        value, _ = photometric_loss(image_t, image_tdt, flow)
        assert value == pytest.approx(interior_mask(8, 10).sum() * RHO_ZERO)

    def test_identical_images_zero_flow_is_floor(self, rng):
        image = rng.random((6, 6))
        value, grad = photometric_loss(image, image, np.zeros((2, 6, 6)))
        assert value == pytest.approx(16 * RHO_ZERO)
        np.testing.assert_allclose(grad, 0.0, atol=1e-12)

    def test_never_below_floor(self, rng):
        for _ in range(5):
            value, _ = photometric_loss(rng.random((7, 7)), rng.random((7, 7)),
                                        rng.uniform(-2, 2, size=(2, 7, 7)))
            assert value >= 25 * RHO_ZERO

    def test_normalized_is_per_pixel_mean(self, rng):
        a, b = rng.random((2, 9, 9))
        flow = rng.uniform(-1, 1, size=(2, 9, 9))
        total, _ = photometric_loss(a, b, flow)
        mean, _ = photometric_loss(a, b, flow, normalize=True)
        assert mean == pytest.approx(total / 49)

    def test_mask_restricts_sum(self, rng):
        a, b = rng.random((2, 6, 6))
        mask = np.zeros((6, 6), dtype=bool)
        mask[2, 3] = True
        value, grad = photometric_loss(a, b, np.zeros((2, 6, 6)), mask=mask)
        assert value == pytest.approx(float(charbonnier(a[2, 3] - b[2, 3])))
        assert np.count_nonzero(grad[0]) <= 1

    def test_batch_is_sum_of_samples(self, rng):
        a, b = rng.random((2, 3, 6, 6))
        flows = rng.uniform(-1, 1, size=(3, 2, 6, 6))
        value, grad = photometric_loss(a, b, flows)
        parts = [photometric_loss(a[i], b[i], flows[i]) for i in range(3)]
        assert value == pytest.approx(sum(v for v, _ in parts))
        for i, (_, g) in enumerate(parts):
            np.testing.assert_allclose(grad[i], g)

    def test_gradient_matches_finite_differences(self, rng):
        h, w = 8, 8
        gy, gx = np.mgrid[0:h, 0:w]
        a = np.sin(gx / 2.0) + np.cos(gy / 3.0)
        b = np.sin((gx - 0.7) / 2.0) + np.cos((gy - 0.4) / 3.0)
        flow = np.stack([0.3 + 0.1 * np.cos(gy / 2.0), 0.35 + 0.1 * np.sin(gx / 5.0)])
        _, grad = photometric_loss(a, b, flow)
        numeric = fd_flow_grad(lambda: photometric_loss(a, b, flow)[0], flow)
        np.testing.assert_allclose(grad, numeric, rtol=1e-4, atol=1e-7)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            photometric_loss(np.zeros((4, 4)), np.zeros((4, 5)), np.zeros((2, 4, 4)))

    def test_ground_truth_beats_zero_flow_on_synthetic_scene(self):
        scene = synth_scene('square', (2.0, 1.0), 64, 64, seed=0)
        at_gt, _ = photometric_loss(scene.image_before, scene.image_after, scene.gt_flow)
        at_zero, _ = photometric_loss(scene.image_before, scene.image_after, np.zeros_like(scene.gt_flow))
        assert at_gt < at_zero


class TestSmoothnessLoss:
    def test_constant_flow(self):
        value, grad = smoothness_loss(np.full((2, 5, 5), 3.0))
        assert value == 0.0
        assert not grad.any()

    def test_column_index_flow(self):
        flow = np.zeros((2, 4, 4))
        flow[0] = np.arange(4)[None, :]
        value, _ = smoothness_loss(flow)
        assert value == 12.0

    def test_translation_invariant(self, rng):
        flow = rng.normal(size=(2, 6, 7))
        assert smoothness_loss(flow + 2.5)[0] == pytest.approx(smoothness_loss(flow)[0])

    def test_gradient_matches_finite_differences(self, rng):
        flow = rng.normal(size=(2, 5, 6))
        _, grad = smoothness_loss(flow)
        numeric = fd_flow_grad(lambda: smoothness_loss(flow)[0], flow)
        np.testing.assert_allclose(grad, numeric, atol=1e-5)

    def test_normalized_divides_by_pixel_count(self, rng):
        flow = rng.normal(size=(2, 4, 8))
        assert smoothness_loss(flow, normalize=True)[0] == pytest.approx(smoothness_loss(flow)[0] / 32)

    def test_too_small(self):
        with pytest.raises(ShapeError):
            smoothness_loss(np.zeros((2, 1, 5)))


class TestTotalSslLoss:
    def test_alpha_zero_is_photometric(self, rng):
        a, b = rng.random((2, 6, 6))
        flow = rng.normal(size=(2, 6, 6))
        cfg = LossConfig(alpha=0.0, normalize=False)
        assert total_ssl_loss(a, b, flow, cfg)[0] == photometric_loss(a, b, flow)[0]

    def test_constant_flow_identical_images(self, rng):
        image = rng.random((6, 6))
        cfg = LossConfig(normalize=False)
        value, _ = total_ssl_loss(image, image, np.zeros((2, 6, 6)), cfg)
        assert value == pytest.approx(16 * RHO_ZERO)

    def test_recomposition(self, rng):
        a, b = rng.random((2, 8, 8))
        flow = rng.normal(size=(2, 8, 8))
        cfg = LossConfig(alpha=10.0, normalize=True)
        value, grad = total_ssl_loss(a, b, flow, cfg)
        photo, d_photo = photometric_loss(a, b, flow, normalize=True)
        smooth, d_smooth = smoothness_loss(flow, normalize=True)
        assert value == pytest.approx(photo + 10.0 * smooth)
        np.testing.assert_allclose(grad, d_photo + 10.0 * d_smooth)

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            LossConfig(mode='unsupervised')
        with pytest.raises(ConfigError):
            LossConfig(alpha=-1.0)


class TestSupervisedLoss:
    def test_exact_prediction(self, rng):
        gt = rng.normal(size=(2, 5, 5))
        value, grad = supervised_loss(gt.copy(), gt)
        assert value == 0.0
        assert not grad.any()

    def test_unit_offset(self):
        gt = np.zeros((2, 4, 4))
        gt[:, 1:3, 1:3] = 2.0
        pred = gt.copy()
        pred[0] += 1.0
        value, grad = supervised_loss(pred, gt)
        assert value == pytest.approx(1.0)
        assert grad[0, 0, 0] == 0.0

    def test_matches_pixel_loop(self, rng):
        gt = rng.normal(size=(2, 6, 6))
        gt[:, rng.random((6, 6)) < 0.4] = 0.0
        pred = rng.normal(size=(2, 6, 6))
        total, k = 0.0, 0
        for y in range(6):
            for x in range(6):
                if gt[0, y, x] != 0 or gt[1, y, x] != 0:
                    total += (pred[0, y, x] - gt[0, y, x]) ** 2 + (pred[1, y, x] - gt[1, y, x]) ** 2
                    k += 1
        assert supervised_loss(pred, gt)[0] == pytest.approx(total / k, rel=1e-12)

    def test_no_valid_pixels(self):
        with pytest.raises(DataError, match='no supervised pixels'):
            supervised_loss(np.ones((2, 3, 3)), np.zeros((2, 3, 3)))


class TestMultiscale:
    def test_downsample_block_mean(self):
        image = np.arange(16, dtype=np.float64).reshape(4, 4)
        np.testing.assert_allclose(downsample_images(image, 2), [[2.5, 4.5], [10.5, 12.5]])
        with pytest.raises(ShapeError):
            downsample_images(np.zeros((5, 4)), 2)

    def test_ssl_sums_over_scales(self, rng):
        a, b = rng.random((2, 8, 8))
        flows = [rng.normal(size=(2, 4, 4)), rng.normal(size=(2, 8, 8))]
        cfg = LossConfig()
        total, grads = multiscale_ssl_loss(a, b, flows, cfg)
        coarse = total_ssl_loss(downsample_images(a, 2), downsample_images(b, 2), flows[0], cfg)[0]
        fine = total_ssl_loss(a, b, flows[1], cfg)[0]
        assert total == pytest.approx(coarse + fine)
        assert [g.shape for g in grads] == [(2, 4, 4), (2, 8, 8)]

    def test_supervised_targets_scaled(self):
        gt = np.full((2, 8, 8), 4.0)
        flows = [np.full((2, 4, 4), 2.0), np.full((2, 8, 8), 4.0)]
        total, _ = multiscale_supervised_loss(flows, gt)
        assert total == 0.0
