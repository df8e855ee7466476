"""Event streams and the former/latter event-volume input representation."""
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterator, List, Sequence

import numpy as np

from spikeflow.errors import DataError, ShapeError


class Polarity(IntEnum):
    """Sign of the log-intensity change that triggered an event."""

    ON = 1
    OFF = -1


# Volume slice index for each polarity.
ON_SLICE = 0
OFF_SLICE = 1


@dataclass(frozen=True)
class Event:
    """A single address-event: pixel, timestamp in microseconds, polarity."""

    x: int
    y: int
    t: int
    p: Polarity


class EventStream:
    """Time-ordered events from one sensor, stored column-wise."""

    def __init__(self, x, y, t, p, width: int, height: int, check: bool = True):
        self.x = np.asarray(x, dtype=np.int64)
        self.y = np.asarray(y, dtype=np.int64)
        self.t = np.asarray(t, dtype=np.int64)
        self.p = np.asarray(p, dtype=np.int8)
        self.width = int(width)
        self.height = int(height)
        if check:
            self.validate()

    @classmethod
    def from_events(cls, events: Sequence[Event], width: int, height: int) -> 'EventStream':
        """Build a stream from Event records."""
        return cls(
            [e.x for e in events],
            [e.y for e in events],
            [e.t for e in events],
            [int(e.p) for e in events],
            width,
            height,
        )

    @classmethod
    def empty(cls, width: int, height: int) -> 'EventStream':
        """An event-free stream of the given resolution."""
        return cls([], [], [], [], width, height)

    def validate(self):
        """Check column lengths, bounds, polarity values and time order."""
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise ShapeError(
                f"event columns differ in length: x={len(self.x)} y={len(self.y)} "
                f"t={n} p={len(self.p)}"
            )
        if n == 0:
            return
        if self.x.min() < 0 or self.x.max() >= self.width:
            raise DataError(f"event x outside [0, {self.width})")
        if self.y.min() < 0 or self.y.max() >= self.height:
            raise DataError(f"event y outside [0, {self.height})")
        if self.t.min() < 0:
            raise DataError("negative event timestamp")
        if not np.isin(self.p, (Polarity.ON, Polarity.OFF)).all():
            raise DataError("polarity must be +1 (ON) or -1 (OFF)")
        if np.any(np.diff(self.t) < 0):
            raise DataError("events are not sorted by timestamp")

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[Event]:
        for x, y, t, p in zip(self.x, self.y, self.t, self.p):
            yield Event(int(x), int(y), int(t), Polarity(int(p)))

    @property
    def events(self) -> List[Event]:
        """Events as a list of records."""
        return list(self)

    def count(self, polarity: Polarity) -> int:
        """Number of events with the given polarity."""
        return int(np.count_nonzero(self.p == polarity))

    def translated(self, dx: int, dy: int) -> 'EventStream':
        """Copy of the stream with every event moved by (dx, dy)."""
        return EventStream(self.x + dx, self.y + dy, self.t, self.p, self.width, self.height)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.p, other.p)
        )


def kernel(a):
    """Bilinear sampling kernel k_b(a) = max(0, 1 - |a|)."""
    return np.maximum(0.0, 1.0 - np.abs(a))


def normalize_timestamps(stream: EventStream, num_bins: int) -> np.ndarray:
    """Map timestamps linearly onto [0, B-1]; a zero-length interval maps to 0."""
    if num_bins < 2:
        raise DataError(f"bin count must be >= 2, got {num_bins}")
    if len(stream) == 0:
        raise DataError("empty stream")
    t = stream.t.astype(np.float64)
    span = t[-1] - t[0]
    if span == 0:
        return np.zeros_like(t)
    return (num_bins - 1) * (t - t[0]) / span


class EventVolume:
    """Per-polarity bilinear event counts, shape [2, B, H, W]."""

    def __init__(self, bins: np.ndarray):
        bins = np.asarray(bins)
        if bins.ndim != 4 or bins.shape[0] != 2:
            raise ShapeError(f"event volume must be [2, B, H, W], got {list(bins.shape)}")
        self.bins = bins

    @property
    def num_bins(self) -> int:
        return self.bins.shape[1]

    @property
    def shape(self):
        return self.bins.shape

    def as_channels(self) -> np.ndarray:
        """The volume flattened to [2B, H, W] channels (analog network input)."""
        _, b, h, w = self.bins.shape
        return self.bins.reshape(2 * b, h, w)

    def event_mask(self) -> np.ndarray:
        """Boolean [H, W] map of pixels that received at least one event."""
        return self.bins.sum(axis=(0, 1)) > 0


def build_event_volume(stream: EventStream, num_bins: int, dtype=np.float64) -> EventVolume:
    """Voxelize a stream with temporal bilinear kernels, one slice per polarity."""
    if num_bins < 2 or num_bins % 2:
        raise DataError(f"bin count must be even and >= 2, got {num_bins}")
    bins = np.zeros((2, num_bins, stream.height, stream.width), dtype=dtype)
    if len(stream) == 0:
        return EventVolume(bins)

    ts = normalize_timestamps(stream, num_bins)
    lower = np.floor(ts).astype(np.int64)
    frac = ts - lower
    slices = np.where(stream.p == Polarity.ON, ON_SLICE, OFF_SLICE)

    # Integer pixels: spatial kernels are unit deposits, time splits over two bins.
    for offset, weight in ((0, 1.0 - frac), (1, frac)):
        b = lower + offset
        keep = (b < num_bins) & (weight > 0)
        np.add.at(bins, (slices[keep], b[keep], stream.y[keep], stream.x[keep]), weight[keep])
    return EventVolume(bins)


def group_former_latter(volume: EventVolume) -> np.ndarray:
    """Rearrange a volume into T = B/2 frames of (former-ON, former-OFF, latter-ON, latter-OFF)."""
    num_bins = volume.num_bins
    if num_bins % 2:
        raise DataError(f"former/latter grouping needs an even bin count, got {num_bins}")
    steps = num_bins // 2
    former = volume.bins[:, :steps]
    latter = volume.bins[:, steps:]
    # [2 groups, 2 polarities, T, H, W] -> [T, 4, H, W]
    stacked = np.stack([former, latter])
    _, _, _, h, w = stacked.shape
    return np.ascontiguousarray(stacked.transpose(2, 0, 1, 3, 4).reshape(steps, 4, h, w))


def ungroup_former_latter(frames: np.ndarray) -> EventVolume:
    """Inverse of group_former_latter."""
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[1] != 4:
        raise ShapeError(f"grouped input must be [T, 4, H, W], got {list(frames.shape)}")
    steps, _, h, w = frames.shape
    stacked = frames.reshape(steps, 2, 2, h, w).transpose(1, 2, 0, 3, 4)
    return EventVolume(np.ascontiguousarray(np.concatenate([stacked[0], stacked[1]], axis=1)))


def encode_stream(stream: EventStream, num_bins: int, dtype=np.float64) -> np.ndarray:
    """Stream to GroupedInput in one call."""
    return group_former_latter(build_event_volume(stream, num_bins, dtype=dtype))


def event_mask_from_frames(frames: np.ndarray) -> np.ndarray:
    """Pixels with any event in a GroupedInput ([T, 4, H, W] or batched [N, T, 4, H, W])."""
    frames = np.asarray(frames)
    if frames.ndim == 4:
        return frames.sum(axis=(0, 1)) > 0
    if frames.ndim == 5:
        return frames.sum(axis=(1, 2)) > 0
    raise ShapeError(f"expected grouped frames, got shape {list(frames.shape)}")
