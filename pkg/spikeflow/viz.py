"""Colour-wheel rendering of flow fields."""
import numpy as np
from matplotlib.colors import hsv_to_rgb

from spikeflow.errors import ShapeError


def flow_to_rgb(flow: np.ndarray, flow_scale: float = 40.0) -> np.ndarray:
    """uint8 [H, W, 3] image: hue is direction, saturation is |flow| / flow_scale.

    Value is fixed at 1, so zero flow renders white.
    """
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ShapeError(f"flow must be [2, H, W], got {list(flow.shape)}")
    if flow_scale <= 0:
        raise ShapeError("flow_scale must be > 0")
    u, v = flow
    hue = (np.arctan2(v, u) / (2 * np.pi)) % 1.0
    saturation = np.clip(np.hypot(u, v) / flow_scale, 0.0, 1.0)
    hsv = np.stack([hue, saturation, np.ones_like(hue)], axis=-1)
    return np.rint(hsv_to_rgb(hsv) * 255).astype(np.uint8)
