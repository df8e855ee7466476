"""Synthetic moving-pattern scenes rendered through an idealised event sensor.

A textured pattern translates (and optionally rotates about its centre) over
one frame interval. Each pixel fires an event whenever its log intensity moves
one contrast threshold away from the level it last fired at; event times are
interpolated linearly between render substeps.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from spikeflow.errors import SceneError
from spikeflow.events import EventStream, Polarity

logger = logging.getLogger(__name__)

PATTERNS = ('bar', 'square', 'disk', 'checkerboard')
DEFAULT_INTERVAL_US = 50_000
LOG_EPS = 1e-3
MAX_SUBSTEP_PX = 0.25


@dataclass
class SynthScene:
    """Events, the grayscale pair bracketing them and the analytic flow."""

    stream: EventStream
    image_before: np.ndarray
    image_after: np.ndarray
    gt_flow: np.ndarray
    params: Dict[str, object] = field(default_factory=dict)

    @property
    def pattern_mask(self) -> np.ndarray:
        """Pixels covered by the pattern at the start of the interval."""
        return np.any(self.gt_flow != 0, axis=0)


def _rotation(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


def _coverage(signed_distance: np.ndarray) -> np.ndarray:
    """Anti-aliased inside fraction from a signed distance (negative inside)."""
    return np.clip(0.5 - signed_distance, 0.0, 1.0)


def _pattern_shape(pattern: str, lx: np.ndarray, ly: np.ndarray, size: float) -> Tuple[np.ndarray, np.ndarray]:
    """(coverage, texture) of a pattern in its own coordinates; texture is 1 or -1."""
    half = size / 2
    if pattern == 'bar':
        # Full-height vertical bar an eighth of the scene wide.
        dist = np.abs(lx) - size / 16
        return _coverage(dist), np.ones_like(lx)
    if pattern == 'square':
        dist = np.maximum(np.abs(lx), np.abs(ly)) - half / 2
        return _coverage(dist), np.ones_like(lx)
    if pattern == 'disk':
        dist = np.hypot(lx, ly) - size / 6
        return _coverage(dist), np.ones_like(lx)
    if pattern == 'checkerboard':
        dist = np.maximum(np.abs(lx), np.abs(ly)) - half
        cell = max(size / 8, 1.0)
        parity = (np.floor(lx / cell) + np.floor(ly / cell)) % 2
        return _coverage(dist), np.where(parity == 0, 1.0, -1.0)
    raise SceneError(f"unknown pattern '{pattern}', expected one of {PATTERNS}")


def render(pattern: str, height: int, width: int, center: np.ndarray, angle: float,
           contrast: float) -> np.ndarray:
    """Intensity image in [0, 1] with the pattern centred at ``center`` and rotated by ``angle``."""
    gy, gx = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64),
                         indexing='ij')
    # Pattern coordinates: undo the rotation about the centre.
    inv = _rotation(-angle)
    dx, dy = gx - center[0], gy - center[1]
    lx = inv[0, 0] * dx + inv[0, 1] * dy
    ly = inv[1, 0] * dx + inv[1, 1] * dy
    cover, texture = _pattern_shape(pattern, lx, ly, float(min(height, width)))
    background = 0.5 - contrast / 2
    foreground = 0.5 + contrast / 2 * texture
    return background + cover * (foreground - background)


def analytic_flow(pattern: str, height: int, width: int, center: np.ndarray,
                  velocity: Tuple[float, float], rotation: float) -> np.ndarray:
    """Displacement of every pattern pixel over the interval, zero elsewhere; [2, H, W]."""
    gy, gx = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64),
                         indexing='ij')
    rot = _rotation(rotation)
    dx, dy = gx - center[0], gy - center[1]
    u = rot[0, 0] * dx + rot[0, 1] * dy + velocity[0] - dx
    v = rot[1, 0] * dx + rot[1, 1] * dy + velocity[1] - dy
    # Pixel centres inside the pattern footprint at t = 0.
    cover, _ = _pattern_shape(pattern, dx, dy, float(min(height, width)))
    inside = cover >= 0.5
    return np.stack([np.where(inside, u, 0.0), np.where(inside, v, 0.0)])


def _substeps(velocity, rotation: float, height: int, width: int) -> int:
    reach = np.hypot(height, width) / 2
    travel = np.hypot(*velocity) + abs(rotation) * reach
    return max(1, int(np.ceil(travel / MAX_SUBSTEP_PX)))


def _threshold_crossings(log_frames: np.ndarray, theta: float, interval_us: int):
    """Per-pixel crossings of a log-intensity sequence [K+1, H, W] -> (x, y, t, p) arrays."""
    steps = log_frames.shape[0] - 1
    reference = log_frames[0].copy()
    xs, ys, ts, ps = [], [], [], []
    for k in range(1, steps + 1):
        prev, cur = log_frames[k - 1], log_frames[k]
        diff = cur - reference
        count = np.floor(np.abs(diff) / theta).astype(np.int64)
        if not count.any():
            continue
        sign = np.sign(diff)
        delta = cur - prev
        for j in range(1, int(count.max()) + 1):
            yy, xx = np.nonzero(count >= j)
            level = reference[yy, xx] + sign[yy, xx] * j * theta
            step = delta[yy, xx]
            frac = np.where(step != 0, (level - prev[yy, xx]) / np.where(step != 0, step, 1.0), 1.0)
            frac = np.clip(frac, 0.0, 1.0)
            xs.append(xx)
            ys.append(yy)
            ts.append(np.rint((k - 1 + frac) / steps * interval_us).astype(np.int64))
            ps.append(np.where(sign[yy, xx] > 0, int(Polarity.ON), int(Polarity.OFF)))
        reference += sign * count * theta
    if not xs:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, empty, empty
    return np.concatenate(xs), np.concatenate(ys), np.concatenate(ts), np.concatenate(ps)


def _shot_noise(rng: np.random.Generator, rate_hz: float, height: int, width: int, interval_us: int):
    """Background events: Poisson counts per pixel, uniform times, random polarity."""
    counts = rng.poisson(rate_hz * interval_us * 1e-6, size=(height, width))
    yy, xx = np.nonzero(counts)
    reps = counts[yy, xx]
    xs = np.repeat(xx, reps)
    ys = np.repeat(yy, reps)
    ts = rng.integers(0, interval_us + 1, size=xs.size)
    ps = np.where(rng.random(xs.size) < 0.5, int(Polarity.ON), int(Polarity.OFF))
    return xs, ys, ts, ps


def synth_scene(pattern: str, velocity: Tuple[float, float], height: int, width: int,
                event_rate: float = 0.0, theta: float = 0.2, seed: int = 0,
                contrast: float = 0.6, rotation: float = 0.0,
                interval_us: int = DEFAULT_INTERVAL_US) -> SynthScene:
    """Render a moving pattern through a log-threshold event sensor.

    velocity is in pixels per interval, rotation in radians per interval and
    event_rate the background noise rate in Hz per pixel.
    """
    velocity = (float(velocity[0]), float(velocity[1]))
    speed = float(np.hypot(*velocity))
    if speed > min(height, width) / 4:
        raise SceneError(f"velocity magnitude {speed:g} exceeds min(H, W) / 4 = {min(height, width) / 4:g}")
    if theta <= 0:
        raise SceneError("contrast threshold theta must be > 0")
    if pattern not in PATTERNS:
        raise SceneError(f"unknown pattern '{pattern}', expected one of {PATTERNS}")
    if not 0 <= contrast < 1:
        raise SceneError("contrast must lie in [0, 1)")
    if event_rate < 0:
        raise SceneError("event_rate must be >= 0")

    rng = np.random.default_rng(seed)
    # Keep the pattern centred over the interval.
    start = np.array([width / 2 - velocity[0] / 2, height / 2 - velocity[1] / 2])
    moving = speed > 0 or rotation != 0

    steps = _substeps(velocity, rotation, height, width) if moving else 1
    frames = []
    for k in range(steps + 1):
        s = k / steps
        center = start + s * np.asarray(velocity)
        frames.append(render(pattern, height, width, center, s * rotation, contrast))
    frames = np.stack(frames)

    if moving:
        xs, ys, ts, ps = _threshold_crossings(np.log(frames + LOG_EPS), theta, interval_us)
        if xs.size == 0:
            raise SceneError("no events generated")
    else:
        xs = ys = ts = ps = np.zeros(0, dtype=np.int64)

    if event_rate > 0:
        noise = _shot_noise(rng, event_rate, height, width, interval_us)
        xs, ys, ts, ps = (np.concatenate([a, b]) for a, b in zip((xs, ys, ts, ps), noise))

    order = np.lexsort((xs, ys, ts))
    stream = EventStream(xs[order], ys[order], ts[order], ps[order], width, height)
    gt_flow = analytic_flow(pattern, height, width, start, velocity, rotation) if moving \
        else np.zeros((2, height, width))

    logger.debug("synth %s v=%s rot=%g: %d events", pattern, velocity, rotation, len(stream))
    params = {
        'pattern': pattern, 'velocity': list(velocity), 'theta': theta, 'seed': seed,
        'contrast': contrast, 'rotation': rotation, 'event_rate': event_rate,
        'interval_us': interval_us,
    }
    return SynthScene(stream, frames[0], frames[-1], gt_flow, params)


def synth_dataset(count: int, size: Tuple[int, int] = (64, 64), seed: int = 0, theta: float = 0.2,
                  max_speed: float = None, max_rotation: float = 0.1,
                  patterns: Tuple[str, ...] = PATTERNS) -> List[SynthScene]:
    """Random translating and rotating scenes; scene i depends only on (seed, i)."""
    height, width = size
    max_speed = min(height, width) / 8 if max_speed is None else max_speed
    scenes = []
    for index in range(count):
        rng = np.random.default_rng([seed, index])
        pattern = patterns[int(rng.integers(len(patterns)))]
        speed = rng.uniform(0.5, max_speed)
        heading = rng.uniform(0, 2 * np.pi)
        velocity = (speed * np.cos(heading), speed * np.sin(heading))
        rotation = rng.uniform(-max_rotation, max_rotation)
        contrast = rng.uniform(0.4, 0.8)
        scenes.append(synth_scene(pattern, velocity, height, width, theta=theta,
                                  seed=int(rng.integers(2**31)), contrast=contrast,
                                  rotation=rotation))
    logger.info("generated %d synthetic scenes at %dx%d", count, height, width)
    return scenes
