"""Evaluation metrics: average endpoint error and n-pixel error rates."""
from dataclasses import dataclass, field
from typing import Dict, Iterable, List

import numpy as np

from spikeflow.errors import DataError, ShapeError

NPE_THRESHOLDS = (1, 2, 3)


def endpoint_error(flow_pred: np.ndarray, flow_gt: np.ndarray) -> np.ndarray:
    """Per-pixel Euclidean distance between two [2, H, W] (or [N, 2, H, W]) fields."""
    flow_pred = np.asarray(flow_pred, dtype=np.float64)
    flow_gt = np.asarray(flow_gt, dtype=np.float64)
    if flow_pred.shape != flow_gt.shape:
        raise ShapeError(f"prediction {list(flow_pred.shape)} and ground truth {list(flow_gt.shape)} differ")
    diff = flow_pred - flow_gt
    return np.hypot(diff[..., 0, :, :], diff[..., 1, :, :])


def _masked_errors(flow_pred, flow_gt, event_mask) -> np.ndarray:
    errors = endpoint_error(flow_pred, flow_gt)
    mask = np.broadcast_to(np.asarray(event_mask, dtype=bool), errors.shape)
    if not mask.any():
        raise DataError("event mask is empty")
    return errors[mask]


def aee(flow_pred: np.ndarray, flow_gt: np.ndarray, event_mask: np.ndarray) -> float:
    """Mean endpoint error over pixels that contain events."""
    return float(_masked_errors(flow_pred, flow_gt, event_mask).mean())


def npe(flow_pred: np.ndarray, flow_gt: np.ndarray, event_mask: np.ndarray, n: float) -> float:
    """Percentage of masked pixels whose endpoint error exceeds n pixels."""
    errors = _masked_errors(flow_pred, flow_gt, event_mask)
    return float(100.0 * np.count_nonzero(errors > n) / errors.size)


@dataclass
class FlowMetrics:
    """Pixel-weighted running AEE and nPE over many samples."""

    pixels: int = 0
    error_sum: float = 0.0
    outliers: Dict[int, int] = field(default_factory=lambda: {n: 0 for n in NPE_THRESHOLDS})

    def update(self, flow_pred: np.ndarray, flow_gt: np.ndarray, event_mask: np.ndarray):
        errors = _masked_errors(flow_pred, flow_gt, event_mask)
        self.pixels += errors.size
        self.error_sum += float(errors.sum())
        for n in self.outliers:
            self.outliers[n] += int(np.count_nonzero(errors > n))

    @property
    def aee(self) -> float:
        if not self.pixels:
            raise DataError("no evaluated pixels")
        return self.error_sum / self.pixels

    def npe(self, n: int) -> float:
        if not self.pixels:
            raise DataError("no evaluated pixels")
        return 100.0 * self.outliers[n] / self.pixels

    def to_record(self) -> Dict[str, float]:
        record = {'aee': self.aee}
        for n in self.outliers:
            record[f'{n}pe'] = self.npe(n)
        record['pixels'] = self.pixels
        return record


def improvement_percent(baseline: float, value: float) -> float:
    """Relative reduction of an error metric against a baseline, in percent."""
    if baseline == 0:
        return 0.0
    return 100.0 * (baseline - value) / baseline


def format_report(record: Dict[str, object], keys: Iterable[str] = None) -> str:
    """One key=value line per metric, floats at six significant digits."""
    lines: List[str] = []
    for key in keys or record.keys():
        value = record[key]
        if isinstance(value, float):
            value = f'{value:.6g}'
        lines.append(f'{key}={value}')
    return '\n'.join(lines)
