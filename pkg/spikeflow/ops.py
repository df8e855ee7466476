"""Layer primitives and their exact reverse-mode gradients.

Every forward function has a matching ``*_backward`` that returns the
vector-Jacobian product for the upstream gradient it is given. Arrays are
numpy ndarrays in NCHW layout.

Reduction order: conv2d contracts (C, kh, kw) per output element and, for the
weight gradient, (N, Ho, Wo) per weight, both in a single ``tensordot`` call
with a fixed axis order; the input gradient accumulates kernel taps in
row-major (kh, kw) order. Results do not depend on any worker count.
"""
from functools import lru_cache
from typing import Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from spikeflow.errors import ShapeError


def _check_same(a: np.ndarray, b: np.ndarray, what: str):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {list(a.shape)} and {list(b.shape)} differ")


# -- convolution --------------------------------------------------------

def _conv_windows(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(x, (k, k), axis=(2, 3))
    return windows[:, :, ::stride, ::stride]


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    """Spatial output length of a convolution."""
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray = None,
           stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlation of x [N, C, H, W] with weight [O, C, k, k] plus bias [O]."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {list(x.shape)} and {list(weight.shape)}")
    out_ch, in_ch, kh, kw = weight.shape
    if kh != kw:
        raise ShapeError(f"conv2d expects square kernels, got {kh}x{kw}")
    if x.shape[1] != in_ch:
        raise ShapeError(f"conv2d input has {x.shape[1]} channels, weight expects {in_ch}")
    if x.shape[2] + 2 * padding < kh or x.shape[3] + 2 * padding < kw:
        raise ShapeError(f"conv2d input {list(x.shape[2:])} smaller than kernel {kh}x{kw}")
    if bias is not None and bias.shape != (out_ch,):
        raise ShapeError(f"conv2d bias has shape {list(bias.shape)}, expected [{out_ch}]")

    windows = _conv_windows(x, kh, stride, padding)
    out = np.tensordot(windows, weight, axes=([1, 4, 5], [1, 2, 3]))  # [N, Ho, Wo, O]
    out = out.transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward(dy: np.ndarray, x: np.ndarray, weight: np.ndarray,
                    stride: int = 1, padding: int = 0,
                    need_dx: bool = True) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dx, dweight, dbias) of conv2d for upstream dy [N, O, Ho, Wo].

    dx is None when need_dx is False.
    """
    _, _, k, _ = weight.shape
    n, _, ho, wo = dy.shape
    windows = _conv_windows(x, k, stride, padding)
    if windows.shape[2:4] != (ho, wo):
        raise ShapeError(f"conv2d upstream grad {list(dy.shape)} does not match output size {list(windows.shape[2:4])}")

    dweight = np.tensordot(dy, windows, axes=([0, 2, 3], [0, 2, 3]))  # [O, C, k, k]
    dbias = dy.sum(axis=(0, 2, 3))
    if not need_dx:
        return None, dweight, dbias

    hp, wp = x.shape[2] + 2 * padding, x.shape[3] + 2 * padding
    dxp = np.zeros((n, x.shape[1], hp, wp), dtype=np.result_type(dy, weight))
    for i in range(k):
        for j in range(k):
            contrib = np.tensordot(dy, weight[:, :, i, j], axes=([1], [0]))  # [N, Ho, Wo, C]
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib.transpose(0, 3, 1, 2)
    dx = dxp[:, :, padding:hp - padding, padding:wp - padding] if padding else dxp
    return np.ascontiguousarray(dx), dweight, dbias


# -- resampling ---------------------------------------------------------

@lru_cache(maxsize=64)
def _upsample_matrix(n: int, dtype_name: str) -> np.ndarray:
    """[2n, n] linear interpolation matrix with half-pixel centres and edge clamping."""
    out = np.arange(2 * n, dtype=np.float64)
    src = np.clip((out + 0.5) / 2.0 - 0.5, 0.0, n - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    frac = src - lo
    matrix = np.zeros((2 * n, n))
    rows = np.arange(2 * n)
    np.add.at(matrix, (rows, lo), 1.0 - frac)
    np.add.at(matrix, (rows, hi), frac)
    return matrix.astype(dtype_name)


def upsample_bilinear2x(x: np.ndarray) -> np.ndarray:
    """Bilinear 2x upsampling of the last two axes."""
    h, w = x.shape[-2:]
    if h < 1 or w < 1:
        raise ShapeError(f"cannot upsample an empty map {list(x.shape)}")
    rows = _upsample_matrix(h, x.dtype.name)
    cols = _upsample_matrix(w, x.dtype.name)
    return np.ascontiguousarray(np.einsum('ph,...hw,qw->...pq', rows, x, cols, optimize=True))


def upsample_bilinear2x_backward(dy: np.ndarray) -> np.ndarray:
    """Adjoint of upsample_bilinear2x."""
    h, w = dy.shape[-2] // 2, dy.shape[-1] // 2
    rows = _upsample_matrix(h, dy.dtype.name)
    cols = _upsample_matrix(w, dy.dtype.name)
    return np.ascontiguousarray(np.einsum('ph,...pq,qw->...hw', rows, dy, cols, optimize=True))


# -- warping ------------------------------------------------------------

def _warp_coords(flow: np.ndarray):
    h, w = flow.shape[-2:]
    gy, gx = np.meshgrid(np.arange(h, dtype=flow.dtype), np.arange(w, dtype=flow.dtype), indexing='ij')
    xs = gx + flow[..., 0, :, :]
    ys = gy + flow[..., 1, :, :]
    xc = np.clip(xs, 0, w - 1)
    yc = np.clip(ys, 0, h - 1)
    x0 = np.minimum(np.floor(xc).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(yc).astype(np.int64), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = xc - x0
    wy = yc - y0
    # Gradient w.r.t. the sample coordinate vanishes where clamping is active.
    x_live = (xs >= 0) & (xs <= w - 1)
    y_live = (ys >= 0) & (ys <= h - 1)
    return x0, x1, y0, y1, wx, wy, x_live, y_live


def _batched(image: np.ndarray, flow: np.ndarray):
    if image.shape[-2:] != flow.shape[-2:] or flow.shape[-3] != 2:
        raise ShapeError(f"warp image {list(image.shape)} and flow {list(flow.shape)} are incompatible")
    if image.ndim == 2 and flow.ndim == 3:
        return image[None], flow[None], True
    if image.ndim == 3 and flow.ndim == 4 and image.shape[0] == flow.shape[0]:
        return image, flow, False
    raise ShapeError(f"warp image {list(image.shape)} and flow {list(flow.shape)} are incompatible")


def bilinear_warp(image: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Sample image at (x + u, y + v) with bilinear weights and clamp-to-border.

    image is [H, W] with flow [2, H, W], or batched [N, H, W] with [N, 2, H, W].
    """
    img, flw, single = _batched(image, flow)
    x0, x1, y0, y1, wx, wy, _, _ = _warp_coords(flw)
    n = np.arange(img.shape[0])[:, None, None]
    top = (1 - wx) * img[n, y0, x0] + wx * img[n, y0, x1]
    bottom = (1 - wx) * img[n, y1, x0] + wx * img[n, y1, x1]
    out = (1 - wy) * top + wy * bottom
    return out[0] if single else out


def bilinear_warp_backward(dout: np.ndarray, image: np.ndarray,
                           flow: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients (dimage, dflow) of bilinear_warp."""
    img, flw, single = _batched(image, flow)
    dout = dout[None] if single else dout
    x0, x1, y0, y1, wx, wy, x_live, y_live = _warp_coords(flw)
    n = np.broadcast_to(np.arange(img.shape[0])[:, None, None], x0.shape)

    i00, i01 = img[n, y0, x0], img[n, y0, x1]
    i10, i11 = img[n, y1, x0], img[n, y1, x1]
    dflow = np.zeros_like(flw)
    dflow[:, 0] = dout * ((1 - wy) * (i01 - i00) + wy * (i11 - i10)) * x_live
    dflow[:, 1] = dout * ((1 - wx) * (i10 - i00) + wx * (i11 - i01)) * y_live

    dimage = np.zeros_like(img)
    for ys, xs, weight in (
        (y0, x0, (1 - wy) * (1 - wx)),
        (y0, x1, (1 - wy) * wx),
        (y1, x0, wy * (1 - wx)),
        (y1, x1, wy * wx),
    ):
        np.add.at(dimage, (n, ys, xs), dout * weight)
    if single:
        return dimage[0], dflow[0]
    return dimage, dflow


# -- pointwise ----------------------------------------------------------

def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_same(a, b, 'add')
    return a + b


def add_backward(dy: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return dy, dy


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_same(a, b, 'mul')
    return a * b


def mul_backward(dy: np.ndarray, a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return dy * b, dy * a


def scale(x: np.ndarray, factor: float) -> np.ndarray:
    return x * factor


def scale_backward(dy: np.ndarray, factor: float) -> np.ndarray:
    return dy * factor


def tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def tanh_backward(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Uses the forward output: d tanh = 1 - tanh^2."""
    return dy * (1.0 - y * y)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    return dy * (y > 0)


def concat_channels(tensors: Sequence[np.ndarray]) -> np.ndarray:
    """Concatenate NCHW tensors along the channel axis."""
    first = tensors[0]
    for other in tensors[1:]:
        if other.shape[0] != first.shape[0] or other.shape[2:] != first.shape[2:]:
            raise ShapeError(f"concat: shapes {list(first.shape)} and {list(other.shape)} are incompatible")
    return np.concatenate(tensors, axis=1)


def concat_channels_backward(dy: np.ndarray, channels: Sequence[int]) -> Tuple[np.ndarray, ...]:
    """Split the upstream gradient back into the concatenated parts."""
    bounds = np.cumsum(channels)[:-1]
    return tuple(np.ascontiguousarray(part) for part in np.split(dy, bounds, axis=1))


def crop(x: np.ndarray, top: int, left: int, height: int, width: int) -> np.ndarray:
    """Spatial crop of the last two axes."""
    h, w = x.shape[-2:]
    if top < 0 or left < 0 or top + height > h or left + width > w:
        raise ShapeError(f"crop {height}x{width} at ({top}, {left}) exceeds map {h}x{w}")
    return x[..., top:top + height, left:left + width]


def crop_backward(dy: np.ndarray, input_shape: Tuple[int, ...], top: int, left: int) -> np.ndarray:
    dx = np.zeros(input_shape, dtype=dy.dtype)
    height, width = dy.shape[-2:]
    dx[..., top:top + height, left:left + width] = dy
    return dx
