"""Training samples, on-disk datasets, augmentation and batching."""
import logging
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from spikeflow import formats
from spikeflow.errors import DataError, ShapeError
from spikeflow.events import encode_stream, event_mask_from_frames
from spikeflow.synth import SynthScene

logger = logging.getLogger(__name__)

SCENE_GLOB = 'scene_*.evt'

# Independent random streams drawn for the same (seed, epoch, index) key.
STREAM_SHUFFLE = 0
STREAM_AUGMENT = 1
STREAM_SPLIT = 2


def make_rng(seed: int, epoch: int, index: int, stream: int) -> np.random.Generator:
    """Counter-based generator keyed by (seed, epoch, index, stream).

    The draw for one sample never depends on which worker produced it or on
    the order samples were requested.
    """
    key = np.random.SeedSequence([seed, epoch, index, stream])
    return np.random.Generator(np.random.Philox(key))


@dataclass
class Sample:
    """One training instance: grouped event frames, grayscale pair, flow and event mask."""

    frames: np.ndarray
    image_before: Optional[np.ndarray]
    image_after: Optional[np.ndarray]
    flow: Optional[np.ndarray]
    mask: np.ndarray
    name: str = ''

    @property
    def height(self) -> int:
        return self.frames.shape[-2]

    @property
    def width(self) -> int:
        return self.frames.shape[-1]

    @classmethod
    def from_scene(cls, scene: SynthScene, timesteps: int, name: str = '') -> 'Sample':
        frames = encode_stream(scene.stream, 2 * timesteps)
        return cls(frames, scene.image_before, scene.image_after, scene.gt_flow,
                   event_mask_from_frames(frames), name)

    def _map(self, fn) -> 'Sample':
        """Apply a spatial transform to every [..., H, W] field."""
        def opt(a):
            return None if a is None else np.ascontiguousarray(fn(a))
        return replace(self, frames=np.ascontiguousarray(fn(self.frames)),
                       image_before=opt(self.image_before), image_after=opt(self.image_after),
                       flow=opt(self.flow), mask=np.ascontiguousarray(fn(self.mask)))


class FlowDataset:
    """An indexable collection of samples sharing one resolution and timestep count."""

    def __init__(self, samples: Sequence[Sample], timesteps: int):
        self.samples = list(samples)
        self.timesteps = timesteps
        shapes = {(s.height, s.width) for s in self.samples}
        if len(shapes) > 1:
            raise ShapeError(f"samples have mixed resolutions: {sorted(shapes)}")

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int) -> Sample:
        return self.samples[index]

    @property
    def resolution(self) -> Tuple[int, int]:
        if not self.samples:
            raise DataError("dataset is empty")
        return self.samples[0].height, self.samples[0].width

    @property
    def has_flow(self) -> bool:
        return bool(self.samples) and all(s.flow is not None for s in self.samples)

    @property
    def has_images(self) -> bool:
        return bool(self.samples) and all(s.image_before is not None and s.image_after is not None
                                          for s in self.samples)

    def subset(self, indices: Sequence[int]) -> 'FlowDataset':
        return FlowDataset([self.samples[i] for i in indices], self.timesteps)

    @classmethod
    def from_scenes(cls, scenes: Sequence[SynthScene], timesteps: int) -> 'FlowDataset':
        return cls([Sample.from_scene(s, timesteps, f'scene_{i:04d}') for i, s in enumerate(scenes)],
                   timesteps)

    @classmethod
    def load(cls, directory: os.PathLike, timesteps: int) -> 'FlowDataset':
        """Read every scene_XXXX.evt in a directory plus its optional images and flow."""
        root = Path(directory)
        if not root.is_dir():
            raise DataError(f"dataset directory not found: {root}")
        samples = []
        for evt in sorted(root.glob(SCENE_GLOB)):
            stem = evt.with_suffix('')
            stream = formats.read_events(evt)
            frames = encode_stream(stream, 2 * timesteps)
            before = Path(f'{stem}_before.pgm')
            after = Path(f'{stem}_after.pgm')
            flo = stem.with_suffix('.flo')
            images = (formats.read_pgm(before), formats.read_pgm(after)) \
                if before.exists() and after.exists() else (None, None)
            flow = formats.read_flow(flo).astype(np.float64) if flo.exists() else None
            samples.append(Sample(frames, images[0], images[1], flow,
                                  event_mask_from_frames(frames), stem.name))
        if not samples:
            raise DataError(f"no {SCENE_GLOB} files in {root}")
        logger.info("loaded %d samples from %s", len(samples), root)
        return cls(samples, timesteps)


def save_scene(scene: SynthScene, directory: os.PathLike, index: int) -> List[Path]:
    """Write one scene as scene_XXXX.evt / _before.pgm / _after.pgm / .flo."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    stem = root / f'scene_{index:04d}'
    paths = [stem.with_suffix('.evt'), Path(f'{stem}_before.pgm'), Path(f'{stem}_after.pgm'),
             stem.with_suffix('.flo')]
    formats.write_events(scene.stream, paths[0])
    formats.write_pgm(scene.image_before, paths[1])
    formats.write_pgm(scene.image_after, paths[2])
    formats.write_flow(scene.gt_flow, paths[3])
    return paths


def save_dataset(scenes: Sequence[SynthScene], directory: os.PathLike) -> List[Path]:
    paths = []
    for index, scene in enumerate(scenes):
        paths += save_scene(scene, directory, index)
    return paths


# -- augmentation --

def hflip(sample: Sample) -> Sample:
    """Mirror left-right; u changes sign."""
    out = sample._map(lambda a: a[..., ::-1])
    if out.flow is not None:
        out.flow[0] *= -1
    return out


def vflip(sample: Sample) -> Sample:
    """Mirror top-bottom; v changes sign."""
    out = sample._map(lambda a: a[..., ::-1, :])
    if out.flow is not None:
        out.flow[1] *= -1
    return out


def rot90(sample: Sample, k: int) -> Sample:
    """Rotate by k quarter turns (numpy orientation); (u, v) -> (v, -u) per turn."""
    k %= 4
    if k == 0:
        return sample
    out = sample._map(lambda a: np.rot90(a, k, axes=(-2, -1)))
    if out.flow is not None:
        u, v = out.flow[0].copy(), out.flow[1].copy()
        for _ in range(k):
            u, v = v, -u
        out.flow[0], out.flow[1] = u, v
    return out


def crop(sample: Sample, top: int, left: int, height: int, width: int) -> Sample:
    if top < 0 or left < 0 or top + height > sample.height or left + width > sample.width:
        raise ShapeError(f"crop {height}x{width} at ({top}, {left}) does not fit "
                         f"{sample.height}x{sample.width} sample")
    return sample._map(lambda a: a[..., top:top + height, left:left + width])


def augment(sample: Sample, cfg, rng: np.random.Generator) -> Sample:
    """Random flips, quarter-turn rotation and crop applied jointly to every field.

    cfg provides hflip, vflip, rotate (booleans) and crop_h, crop_w (0 keeps the
    full size). All draws happen whether or not a transform is enabled, so the
    random stream stays aligned across configurations.
    """
    flip_h, flip_v = rng.random() < 0.5, rng.random() < 0.5
    turns = int(rng.integers(4))
    u_top, u_left = rng.random(), rng.random()

    out = sample
    if cfg.hflip and flip_h:
        out = hflip(out)
    if cfg.vflip and flip_v:
        out = vflip(out)
    if cfg.rotate and turns:
        out = rot90(out, turns)
    crop_h = cfg.crop_h or out.height
    crop_w = cfg.crop_w or out.width
    if crop_h > out.height or crop_w > out.width:
        raise ShapeError(f"crop {crop_h}x{crop_w} larger than input {out.height}x{out.width}")
    if (crop_h, crop_w) != (out.height, out.width):
        top = int(u_top * (out.height - crop_h + 1))
        left = int(u_left * (out.width - crop_w + 1))
        out = crop(out, top, left, crop_h, crop_w)
    return out


# -- splitting and batching --

def train_val_split(dataset: FlowDataset, val_fraction: float, seed: int) -> Tuple[FlowDataset, FlowDataset]:
    """Deterministic shuffled split; both parts non-empty whenever the dataset has two samples."""
    n = len(dataset)
    if n == 0:
        raise DataError("dataset is empty")
    n_val = int(round(n * val_fraction))
    if val_fraction > 0 and n > 1:
        n_val = min(max(n_val, 1), n - 1)
    else:
        n_val = 0
    order = make_rng(seed, 0, 0, STREAM_SPLIT).permutation(n)
    return dataset.subset(sorted(order[n_val:])), dataset.subset(sorted(order[:n_val]))


@dataclass
class Batch:
    """Stacked samples; images and flow are None when any sample lacks them."""

    frames: np.ndarray
    image_before: Optional[np.ndarray]
    image_after: Optional[np.ndarray]
    flow: Optional[np.ndarray]
    mask: np.ndarray
    indices: List[int]

    def __len__(self) -> int:
        return self.frames.shape[0]

    def sample(self, i: int) -> 'Batch':
        """Batch of one, the i-th entry."""
        def pick(a):
            return None if a is None else a[i:i + 1]
        return Batch(self.frames[i:i + 1], pick(self.image_before), pick(self.image_after),
                     pick(self.flow), self.mask[i:i + 1], [self.indices[i]])


def collate(samples: Sequence[Sample], indices: Sequence[int], dtype=np.float64) -> Batch:
    def stack(field_name):
        values = [getattr(s, field_name) for s in samples]
        if any(v is None for v in values):
            return None
        return np.stack(values).astype(dtype)
    return Batch(np.stack([s.frames for s in samples]).astype(dtype), stack('image_before'),
                 stack('image_after'), stack('flow'), np.stack([s.mask for s in samples]),
                 list(indices))


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return make_rng(seed, epoch, 0, STREAM_SHUFFLE).permutation(n)


def load_batch(dataset: FlowDataset, indices: Sequence[int], cfg, seed: int, epoch: int,
               train: bool = True, dtype=np.float64) -> Batch:
    """Fetch and (for training) augment the given sample indices."""
    samples = []
    for index in indices:
        sample = dataset[int(index)]
        if train:
            sample = augment(sample, cfg, make_rng(seed, epoch, int(index), STREAM_AUGMENT))
        samples.append(sample)
    return collate(samples, indices, dtype)


def batch_indices(n: int, batch_size: int, seed: int, epoch: int, shuffle: bool = True) -> Iterator[List[int]]:
    order = epoch_order(n, seed, epoch) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        yield [int(i) for i in order[start:start + batch_size]]
