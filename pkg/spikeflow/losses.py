"""Training objectives: self-supervised photometric + smoothness, and supervised MSE.

Every loss returns ``(value, d_flow)`` where d_flow is the gradient with
respect to the flow it was given. Images are treated as constants.
"""
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from spikeflow import ops
from spikeflow.errors import ConfigError, DataError, ShapeError

LOSS_MODES = ('ssl', 'supervised')


@dataclass
class LossConfig:
    """Loss weights and switches.

    normalize divides the photometric sum by the interior pixel count and the
    smoothness sum by H * W, so alpha does not depend on the crop size.
    """

    alpha: float = 10.0
    r: float = 0.45
    eta: float = 1e-3
    normalize: bool = True
    event_mask: bool = False
    multiscale: bool = False
    mode: str = 'ssl'

    def __post_init__(self):
        if self.mode not in LOSS_MODES:
            raise ConfigError(f"loss.mode must be one of {LOSS_MODES}, got '{self.mode}'")
        if self.alpha < 0:
            raise ConfigError("loss.alpha must be >= 0")
        if self.eta <= 0:
            raise ConfigError("loss.eta must be > 0")
        if self.r <= 0:
            raise ConfigError("loss.r must be > 0")


def charbonnier(x: np.ndarray, r: float = 0.45, eta: float = 1e-3) -> np.ndarray:
    """rho(x) = (x^2 + eta^2)^r, elementwise."""
    x = np.asarray(x)
    return (x * x + eta * eta) ** r


def charbonnier_grad(x: np.ndarray, r: float = 0.45, eta: float = 1e-3) -> np.ndarray:
    x = np.asarray(x)
    return 2.0 * r * x * (x * x + eta * eta) ** (r - 1.0)


def interior_mask(height: int, width: int) -> np.ndarray:
    """True everywhere except the outermost pixel ring."""
    mask = np.zeros((height, width), dtype=bool)
    mask[1:-1, 1:-1] = True
    return mask


def _as_batch(images: np.ndarray, flow: np.ndarray) -> Tuple[np.ndarray, np.ndarray, bool]:
    if flow.ndim == 3:
        if images.ndim != 2:
            raise ShapeError(f"image {list(images.shape)} does not pair with flow {list(flow.shape)}")
        return images[None], flow[None], True
    if flow.ndim == 4 and images.ndim == 3 and images.shape[0] == flow.shape[0]:
        return images, flow, False
    raise ShapeError(f"image {list(images.shape)} does not pair with flow {list(flow.shape)}")


def photometric_loss(image_t: np.ndarray, image_tdt: np.ndarray, flow: np.ndarray,
                     r: float = 0.45, eta: float = 1e-3, normalize: bool = False,
                     mask: np.ndarray = None) -> Tuple[float, np.ndarray]:
    """Sum of rho(I_t - warp(I_tdt, flow)) over interior pixels.

    Batched inputs ([N, H, W] images, [N, 2, H, W] flow) sum over samples.
    An optional boolean mask ([H, W] or [N, H, W]) further restricts the sum.
    """
    image_t = np.asarray(image_t)
    image_tdt = np.asarray(image_tdt)
    flow = np.asarray(flow)
    if image_t.shape != image_tdt.shape:
        raise ShapeError(f"images differ in shape: {list(image_t.shape)} vs {list(image_tdt.shape)}")
    img_t, flw, single = _as_batch(image_t, flow)
    img_tdt = image_tdt[None] if single else image_tdt
    n, h, w = img_t.shape

    valid = np.broadcast_to(interior_mask(h, w), (n, h, w))
    if mask is not None:
        valid = valid & np.broadcast_to(np.asarray(mask, dtype=bool), (n, h, w))
    weights = valid.astype(flw.dtype)
    if normalize:
        counts = np.maximum(valid.sum(axis=(1, 2)), 1).astype(flw.dtype)
        weights = weights / counts[:, None, None]

    warped = ops.bilinear_warp(img_tdt, flw)
    residual = img_t - warped
    value = float(np.sum(charbonnier(residual, r, eta) * weights))

    d_warped = -charbonnier_grad(residual, r, eta) * weights
    _, d_flow = ops.bilinear_warp_backward(d_warped, img_tdt, flw)
    return value, (d_flow[0] if single else d_flow)


def smoothness_loss(flow: np.ndarray, normalize: bool = False) -> Tuple[float, np.ndarray]:
    """Sum of absolute horizontal and vertical neighbour differences of u and v."""
    flow = np.asarray(flow)
    single = flow.ndim == 3
    flw = flow[None] if single else flow
    if flw.ndim != 4 or flw.shape[1] != 2:
        raise ShapeError(f"flow must be [2, H, W] or [N, 2, H, W], got {list(flow.shape)}")
    h, w = flw.shape[-2:]
    if h < 2 or w < 2:
        raise ShapeError(f"smoothness needs at least 2x2 flow, got {h}x{w}")

    dx = flw[..., :, 1:] - flw[..., :, :-1]
    dy = flw[..., 1:, :] - flw[..., :-1, :]
    norm = float(h * w) if normalize else 1.0
    value = float(np.abs(dx).sum() + np.abs(dy).sum()) / norm

    # np.sign gives the zero subgradient at ties.
    sx = np.sign(dx) / norm
    sy = np.sign(dy) / norm
    grad = np.zeros_like(flw)
    grad[..., :, 1:] += sx
    grad[..., :, :-1] -= sx
    grad[..., 1:, :] += sy
    grad[..., :-1, :] -= sy
    return value, (grad[0] if single else grad)


def total_ssl_loss(image_t: np.ndarray, image_tdt: np.ndarray, flow: np.ndarray,
                   cfg: LossConfig = None, mask: np.ndarray = None) -> Tuple[float, np.ndarray]:
    """photometric + alpha * smoothness."""
    cfg = cfg or LossConfig()
    photo, d_photo = photometric_loss(image_t, image_tdt, flow, cfg.r, cfg.eta, cfg.normalize, mask)
    if cfg.alpha == 0:
        return photo, d_photo
    smooth, d_smooth = smoothness_loss(flow, cfg.normalize)
    return photo + cfg.alpha * smooth, d_photo + cfg.alpha * d_smooth


def supervised_loss(flow_pred: np.ndarray, flow_gt: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean over pixels with non-zero ground truth of the squared u and v errors."""
    flow_pred = np.asarray(flow_pred)
    flow_gt = np.asarray(flow_gt)
    if flow_pred.shape != flow_gt.shape:
        raise ShapeError(f"prediction {list(flow_pred.shape)} and ground truth {list(flow_gt.shape)} differ")
    channel_axis = flow_gt.ndim - 3
    valid = np.any(flow_gt != 0, axis=channel_axis, keepdims=True)
    k = int(valid.sum())
    if k == 0:
        raise DataError("no supervised pixels")
    diff = (flow_pred - flow_gt) * valid
    value = float(np.sum(diff * diff)) / k
    return value, 2.0 * diff / k


def downsample_images(images: np.ndarray, factor: int) -> np.ndarray:
    """Block-mean downsampling of the last two axes by an integer factor."""
    if factor == 1:
        return images
    h, w = images.shape[-2:]
    if h % factor or w % factor:
        raise ShapeError(f"{h}x{w} images do not divide by {factor}")
    shape = images.shape[:-2] + (h // factor, factor, w // factor, factor)
    return images.reshape(shape).mean(axis=(-3, -1))


def multiscale_ssl_loss(image_t: np.ndarray, image_tdt: np.ndarray, flows: Sequence[np.ndarray],
                        cfg: LossConfig = None) -> Tuple[float, List[np.ndarray]]:
    """Self-supervised loss summed over every prediction scale.

    Coarse flows are compared against block-averaged images of matching size;
    flows are read as displacements in their own scale's pixels.
    """
    cfg = cfg or LossConfig()
    total = 0.0
    grads = []
    full = image_t.shape[-1]
    for flow in flows:
        factor = full // flow.shape[-1]
        value, grad = total_ssl_loss(downsample_images(image_t, factor),
                                     downsample_images(image_tdt, factor), flow, cfg)
        total += value
        grads.append(grad)
    return total, grads


def multiscale_supervised_loss(flows: Sequence[np.ndarray],
                               flow_gt: np.ndarray) -> Tuple[float, List[np.ndarray]]:
    """Supervised loss at every scale; targets are block-averaged and divided by the factor."""
    total = 0.0
    grads = []
    full = flow_gt.shape[-1]
    for flow in flows:
        factor = full // flow.shape[-1]
        target = downsample_images(flow_gt, factor) / factor
        value, grad = supervised_loss(flow, target)
        total += value
        grads.append(grad)
    return total, grads
