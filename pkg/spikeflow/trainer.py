"""Backpropagation-through-time training: Adam, lr schedule, checkpoints and the epoch loop."""
import json
import logging
import os
from collections import OrderedDict, deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from spikeflow import losses
from spikeflow.data import Batch, FlowDataset, batch_indices, load_batch, train_val_split
from spikeflow.errors import ConfigError, DataError, NumericError, SnapshotError
from spikeflow.formats import decode_snapshot, encode_snapshot
from spikeflow.lif import LEAK_MIN, V_TH_MIN, LifConfig
from spikeflow.losses import LossConfig
from spikeflow.metrics import FlowMetrics
from spikeflow.models import ModelSpec, Network, build_model
from spikeflow.profiler import measure_activity
from spikeflow.tensor import resolve_dtype

logger = logging.getLogger(__name__)

THREADS_ENV = 'SPIKEFLOW_THREADS'
CHECKPOINT_MAGIC = 'SPIKEFLOW-CKPT 1'


def worker_threads() -> int:
    """Data-loading worker cap from SPIKEFLOW_THREADS (default 1)."""
    raw = os.environ.get(THREADS_ENV, '1')
    try:
        threads = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got '{raw}'") from exc
    return max(threads, 1)


@dataclass
class TrainConfig:
    """Optimisation and augmentation settings. Defaults follow the self-supervised protocol."""

    epochs: int = 100
    batch_size: int = 8
    lr: float = 1e-4
    lr_decay: float = 0.7
    lr_period: int = 10
    crop_h: int = 256
    crop_w: int = 256
    hflip: bool = True
    vflip: bool = True
    rotate: bool = True
    val_fraction: float = 0.2
    eval_every: int = 1
    checkpoint_every: int = 10
    clip_norm: float = 0.0
    precision: str = '32'

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("train.epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.lr < 0:
            raise ConfigError("train.lr must be >= 0")
        if self.lr_period < 1:
            raise ConfigError("train.lr_period must be >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("train.val_fraction must lie in [0, 1)")
        if self.crop_h < 0 or self.crop_w < 0:
            raise ConfigError("train.crop_h and train.crop_w must be >= 0")
        resolve_dtype(self.precision)

    @classmethod
    def ssl(cls, **overrides) -> 'TrainConfig':
        return cls(**overrides)

    @classmethod
    def supervised(cls, **overrides) -> 'TrainConfig':
        """Fixed learning rate, flips only and a 288x384 crop."""
        values = dict(epochs=50, lr_decay=1.0, crop_h=288, crop_w=384, rotate=False)
        values.update(overrides)
        return cls(**values)

    @property
    def dtype(self) -> np.dtype:
        return resolve_dtype(self.precision)


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Step schedule: lr * decay ** (epoch // period)."""
    return cfg.lr * cfg.lr_decay ** (epoch // cfg.lr_period)


class Adam:
    """Adam with bias correction; moments are kept per parameter name."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: Dict[str, np.ndarray] = OrderedDict()
        self.v: Dict[str, np.ndarray] = OrderedDict()

    def step(self, params, lr: float):
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for name, param in params.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(param.value)
                self.v[name] = np.zeros_like(param.value)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * param.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * param.grad * param.grad
            param.value -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_tensors(self) -> 'OrderedDict[str, np.ndarray]':
        tensors = OrderedDict()
        for name in self.m:
            tensors[f'adam.m.{name}'] = self.m[name]
            tensors[f'adam.v.{name}'] = self.v[name]
        return tensors

    def load_state_tensors(self, tensors: Dict[str, np.ndarray], step_count: int):
        self.step_count = step_count
        self.m.clear()
        self.v.clear()
        for key, value in tensors.items():
            if key.startswith('adam.m.'):
                self.m[key[len('adam.m.'):]] = value.copy()
            elif key.startswith('adam.v.'):
                self.v[key[len('adam.v.'):]] = value.copy()


@dataclass
class StepResult:
    loss: float
    samples: int
    grad_norm: float


def _diagnostics(network: Network) -> dict:
    return {
        'activity': {layer.name: layer.activity for layer in network.lif_layers()},
        'max_abs_u': {layer.name: layer.max_abs_u for layer in network.lif_layers()},
    }


def sample_loss(network: Network, batch: Batch, loss_cfg: LossConfig):
    """Forward one sample (a batch of one) and return (loss, d_final, d_scales)."""
    out = network.run(batch.frames)
    if not np.all(np.isfinite(out.flow)):
        raise NumericError(f"non-finite flow on sample {batch.indices[0]}", _diagnostics(network))
    if loss_cfg.mode == 'supervised':
        if batch.flow is None:
            raise DataError("supervised training needs ground-truth flow")
        if loss_cfg.multiscale:
            value, grads = losses.multiscale_supervised_loss(out.flows, batch.flow)
            return value, grads[-1], grads[:-1] + [None]
        value, grad = losses.supervised_loss(out.flows[-1], batch.flow)
        return value, grad, None

    if batch.image_before is None or batch.image_after is None:
        raise DataError("self-supervised training needs the grayscale image pair")
    mask = batch.mask if loss_cfg.event_mask else None
    if loss_cfg.multiscale:
        value, grads = losses.multiscale_ssl_loss(batch.image_before, batch.image_after, out.flows, loss_cfg)
        return value, grads[-1], grads[:-1] + [None]
    value, grad = losses.total_ssl_loss(batch.image_before, batch.image_after, out.flows[-1], loss_cfg, mask)
    return value, grad, None


def compute_gradients(network: Network, batch: Batch, loss_cfg: LossConfig) -> float:
    """Accumulate dL/dparam for every sample of the batch, in sample order.

    Returns the summed loss. Gradients are added to whatever the parameters
    already hold, so several calls before one update equal one larger batch.
    """
    total = 0.0
    for i in range(len(batch)):
        value, d_final, d_scales = sample_loss(network, batch.sample(i), loss_cfg)
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss on sample {batch.indices[i]}", _diagnostics(network))
        network.backward(d_final, d_scales)
        total += value
    return total


def grad_norm(network: Network) -> float:
    return float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in network.parameters().values())))


def clamp_dynamics(network: Network):
    """Keep thresholds at or above V_TH_MIN and leaks within [LEAK_MIN, 1]."""
    for layer in network.lif_layers():
        np.maximum(layer.v_th.value, V_TH_MIN, out=layer.v_th.value)
        np.clip(layer.leak.value, LEAK_MIN, 1.0, out=layer.leak.value)


def train_step(network: Network, optimizer: Adam, batch: Batch, loss_cfg: LossConfig,
               lr: float, clip_norm: float = 0.0) -> StepResult:
    """One optimisation step over a batch; raises NumericError without updating on failure."""
    network.zero_grad()
    loss = compute_gradients(network, batch, loss_cfg)
    norm = grad_norm(network)
    if not np.isfinite(norm):
        raise NumericError("non-finite gradient", _diagnostics(network))
    params = network.parameters()
    if clip_norm and norm > clip_norm:
        for param in params.values():
            param.grad *= clip_norm / norm
    optimizer.step(params, lr)
    clamp_dynamics(network)
    return StepResult(loss, len(batch), norm)


def predict(network: Network, frames: np.ndarray) -> np.ndarray:
    """Final flow [2, H, W] for one grouped input."""
    frames = np.asarray(frames, dtype=network.dtype)
    return network.run(frames[None]).flow[0]


def evaluate(network: Network, dataset: FlowDataset) -> Optional[Dict[str, float]]:
    """AEE and 1/2/3PE over a dataset with ground truth, masked by event pixels."""
    if not len(dataset) or not dataset.has_flow:
        return None
    metrics = FlowMetrics()
    for sample in dataset.samples:
        if not sample.mask.any():
            continue
        metrics.update(predict(network, sample.frames), sample.flow, sample.mask)
    return metrics.to_record() if metrics.pixels else None


@dataclass
class Checkpoint:
    """Model manifest, parameters, optimizer moments and epoch counter.

    Shuffling and augmentation draws are keyed by (seed, epoch, index), so the
    seed and epoch are the complete random state.
    """

    spec: ModelSpec
    lif: LifConfig
    seed: int
    epoch: int
    params: 'OrderedDict[str, np.ndarray]'
    optimizer: 'OrderedDict[str, np.ndarray]' = field(default_factory=OrderedDict)
    optimizer_steps: int = 0
    precision: str = '32'

    def manifest(self) -> 'OrderedDict[str, object]':
        items = OrderedDict()
        for key, value in asdict(self.spec).items():
            items[f'model.{key}'] = value
        for key, value in asdict(self.lif).items():
            items[f'lif.{key}'] = value
        items['seed'] = self.seed
        items['epoch'] = self.epoch
        items['optimizer.steps'] = self.optimizer_steps
        items['precision'] = self.precision
        return items

    def to_bytes(self) -> bytes:
        header = [CHECKPOINT_MAGIC] + [f'{k}={v}' for k, v in self.manifest().items()]
        tensors = OrderedDict(self.params)
        tensors.update(self.optimizer)
        return ('\n'.join(header) + '\n\n').encode('utf-8') + encode_snapshot(tensors)

    def save(self, path: os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def from_bytes(cls, blob: bytes) -> 'Checkpoint':
        head, sep, body = blob.partition(b'\n\n')
        if not sep:
            raise SnapshotError("checkpoint header is not terminated")
        lines = head.decode('utf-8').splitlines()
        if not lines or lines[0] != CHECKPOINT_MAGIC:
            raise SnapshotError("not a spikeflow checkpoint")
        manifest = dict(line.split('=', 1) for line in lines[1:])
        try:
            spec = ModelSpec(manifest['model.kind'], int(manifest['model.base_channels']),
                             manifest['model.neuron'], int(manifest['model.timesteps']),
                             float(manifest['model.flow_scale']))
            lif = LifConfig(float(manifest['lif.v_th']), float(manifest['lif.leak']),
                            float(manifest['lif.gamma']), manifest['lif.reset'])
            seed = int(manifest['seed'])
            epoch = int(manifest['epoch'])
            steps = int(manifest['optimizer.steps'])
            precision = manifest['precision']
        except (KeyError, ValueError) as exc:
            raise SnapshotError(f"checkpoint manifest is incomplete: {exc}") from exc
        tensors = decode_snapshot(body)
        params = OrderedDict((k, v) for k, v in tensors.items() if not k.startswith('adam.'))
        optimizer = OrderedDict((k, v) for k, v in tensors.items() if k.startswith('adam.'))
        return cls(spec, lif, seed, epoch, params, optimizer, steps, precision)

    @classmethod
    def load(cls, path: os.PathLike) -> 'Checkpoint':
        path = Path(path)
        if not path.exists():
            raise DataError(f"checkpoint not found: {path}")
        return cls.from_bytes(path.read_bytes())

    def build(self) -> Network:
        """Network with this checkpoint's parameters."""
        network = build_model(self.spec, self.seed, self.lif, resolve_dtype(self.precision))
        network.load_state_dict(self.params)
        return network


def snapshot(network: Network, optimizer: Adam, epoch: int, precision: str) -> Checkpoint:
    return Checkpoint(network.spec, network.lif, network.seed, epoch, network.state_dict(),
                      OrderedDict((k, v.copy()) for k, v in optimizer.state_tensors().items()),
                      optimizer.step_count, precision)


def _check_mode(dataset: FlowDataset, loss_cfg: LossConfig):
    if not len(dataset):
        raise DataError("dataset is empty")
    if loss_cfg.mode == 'supervised' and not dataset.has_flow:
        raise DataError("supervised mode requires ground-truth flow for every sample")
    if loss_cfg.mode == 'ssl' and not dataset.has_images:
        raise DataError("self-supervised mode requires grayscale image pairs for every sample")


def _epoch_activity(network: Network, dataset: FlowDataset) -> Dict[str, float]:
    """Per-layer firing rate averaged over every sample of a split."""
    if network.spec.neuron != 'spiking' or not len(dataset):
        return {}
    return dict(measure_activity(network, [s.frames for s in dataset.samples]).layers)


def fit(dataset: FlowDataset, spec: ModelSpec, cfg: TrainConfig, loss_cfg: LossConfig = None,
        lif: LifConfig = None, seed: int = 0, out_dir: os.PathLike = None,
        resume: Checkpoint = None) -> Tuple[Checkpoint, List[dict]]:
    """Train from scratch (or from ``resume``) and return the final checkpoint and epoch log.

    With out_dir set, periodic checkpoints and a line-delimited JSON log
    (train_log.jsonl) are written there.
    """
    loss_cfg = loss_cfg or LossConfig()
    lif = lif or LifConfig()
    _check_mode(dataset, loss_cfg)
    if resume is not None:
        network = resume.build()
        seed = resume.seed
        start = resume.epoch
    else:
        network = build_model(spec, seed, lif, cfg.dtype)
        start = 0
    optimizer = Adam()
    if resume is not None:
        optimizer.load_state_tensors(resume.optimizer, resume.optimizer_steps)

    train_set, val_set = train_val_split(dataset, cfg.val_fraction, seed)
    out = Path(out_dir) if out_dir is not None else None
    log_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / 'train_log.jsonl'
        if resume is None:
            log_path.write_text('')

    records = []
    threads = worker_threads()
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for epoch in range(start, cfg.epochs):
            lr = lr_at(cfg, epoch)
            pending = iter(batch_indices(len(train_set), cfg.batch_size, seed, epoch))
            in_flight = deque()
            loss_sum = 0.0
            seen = 0
            while True:
                # At most `threads` augmented batches are held ahead of the optimiser.
                for idx in pending:
                    in_flight.append(pool.submit(load_batch, train_set, idx, cfg, seed, epoch, True,
                                                 network.dtype))
                    if len(in_flight) >= threads:
                        break
                if not in_flight:
                    break
                batch = in_flight.popleft().result()
                try:
                    result = train_step(network, optimizer, batch, loss_cfg, lr, cfg.clip_norm)
                except NumericError as exc:
                    logger.warning("aborted step at epoch %d: %s (%s)", epoch, exc, exc.diagnostics)
                    raise
                loss_sum += result.loss
                seen += result.samples

            record = OrderedDict(epoch=epoch, lr=lr, loss=loss_sum / max(seen, 1))
            if cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
                metrics = evaluate(network, val_set)
                record['val_aee'] = metrics['aee'] if metrics else None
            record['activity'] = _epoch_activity(network, val_set if len(val_set) else train_set)
            record['v_th'] = {layer.name: layer.v_th.value.item() for layer in network.lif_layers()}
            record['leak'] = {layer.name: layer.leak.value.item() for layer in network.lif_layers()}
            records.append(record)
            logger.info("epoch %d lr=%.3g loss=%.6g val_aee=%s", epoch, lr, record['loss'],
                        record.get('val_aee'))
            if log_path is not None:
                with log_path.open('a') as handle:
                    handle.write(json.dumps(record) + '\n')
            if out is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                snapshot(network, optimizer, epoch + 1, cfg.precision).save(out / f'epoch_{epoch + 1:04d}.ckpt')

    final = snapshot(network, optimizer, max(cfg.epochs, start), cfg.precision)
    if out is not None:
        final.save(out / 'final.ckpt')
    return final, records
