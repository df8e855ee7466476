"""Spiking U-Net family, spiking Fire-FlowNet and their analog counterparts."""
import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from spikeflow import ops
from spikeflow.errors import ConfigError, ShapeError, UsageError
from spikeflow.events import EventVolume
from spikeflow.layers import Conv2d, ConvUnit, LifLayer, ResidualBlock, make_activation
from spikeflow.lif import LifConfig
from spikeflow.tensor import Parameter, resolve_dtype

logger = logging.getLogger(__name__)

KINDS = ('unet', 'firenet')
NEURONS = ('spiking', 'analog')
SIZE_NAMES = {64: 'Base', 32: 'Mini', 16: 'Micro', 8: 'Nano', 4: 'Pico'}
FIRENET_CHANNELS = 32
UNET_DIVISOR = 16


@dataclass
class ModelSpec:
    """Architecture choice and the flow output range."""

    kind: str = 'unet'
    base_channels: int = 64
    neuron: str = 'spiking'
    timesteps: int = 5
    flow_scale: float = 40.0

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in KINDS:
            raise ConfigError(f"unknown model kind '{self.kind}', expected one of {KINDS}")
        if self.neuron not in NEURONS:
            raise ConfigError(f"unknown neuron type '{self.neuron}', expected one of {NEURONS}")
        if self.kind == 'unet' and self.base_channels not in SIZE_NAMES:
            raise ConfigError(f"base_channels must be one of {sorted(SIZE_NAMES)}, got {self.base_channels}")
        if self.timesteps < 1:
            raise ConfigError("timesteps must be >= 1")
        if self.flow_scale <= 0:
            raise ConfigError("flow_scale must be > 0")

    @property
    def num_bins(self) -> int:
        return 2 * self.timesteps

    @property
    def input_channels(self) -> int:
        """4 former/latter channels per timestep, or every bin at once for analog models."""
        return 4 if self.neuron == 'spiking' else 2 * self.num_bins

    @property
    def label(self) -> str:
        suffix = 'SNN' if self.neuron == 'spiking' else 'ANN'
        if self.kind == 'firenet':
            return f'Fire-{suffix}'
        return f'{SIZE_NAMES[self.base_channels]}-{suffix}'

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class FlowOutput:
    """Result of one forward pass.

    flow is the final full-scale prediction; flows holds every scale from
    coarse to fine and accumulators the pre-tanh sums; both keep the batch
    axis even for a single sample.
    """

    flow: np.ndarray
    flows: List[np.ndarray]
    accumulators: List[np.ndarray]
    activity: Dict[str, float] = field(default_factory=dict)
    steps: int = 1


class Network:
    """Shared plumbing: parameters, state reset, timestep unrolling and BPTT."""

    def __init__(self, spec: ModelSpec, lif: LifConfig, seed: int, dtype):
        self.spec = spec
        self.lif = lif
        self.seed = seed
        self.dtype = resolve_dtype(dtype)
        self._rng = np.random.default_rng(seed)
        self._lif_count = 0
        self._cache = None

    # -- construction helpers --

    def _conv(self, name: str, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1,
              propagate: bool = True) -> Conv2d:
        return Conv2d(name, in_ch, out_ch, kernel, self._rng, stride, self.dtype, propagate)

    def _act(self):
        name = f'layer{self._lif_count}'
        self._lif_count += 1
        return make_activation(name, self.spec.neuron, self.lif, self.dtype)

    def _unit(self, name: str, in_ch: int, out_ch: int, stride: int = 1, propagate: bool = True) -> ConvUnit:
        return ConvUnit(self._conv(name, in_ch, out_ch, 3, stride, propagate), self._act())

    # -- introspection --

    def convs(self) -> List[Conv2d]:
        raise NotImplementedError

    def activations(self) -> list:
        raise NotImplementedError

    @property
    def input_conv(self) -> Conv2d:
        return self.convs()[0]

    @property
    def head_convs(self) -> List[Conv2d]:
        raise NotImplementedError

    def lif_layers(self) -> List[LifLayer]:
        return [act for act in self.activations() if isinstance(act, LifLayer)]

    def parameters(self) -> 'OrderedDict[str, Parameter]':
        params = OrderedDict()
        for conv in self.convs():
            params.update(conv.parameters())
        for act in self.activations():
            params.update(act.parameters())
        return params

    def num_parameters(self, include_dynamics: bool = False) -> int:
        """Synaptic weight and bias count; thresholds and leaks only on request."""
        total = sum(p.size for conv in self.convs() for p in conv.parameters().values())
        if include_dynamics:
            total += 2 * len(self.lif_layers())
        return total

    def zero_grad(self):
        for param in self.parameters().values():
            param.zero_grad()

    def state_dict(self) -> 'OrderedDict[str, np.ndarray]':
        return OrderedDict((name, p.value.copy()) for name, p in self.parameters().items())

    def load_state_dict(self, tensors: Dict[str, np.ndarray]):
        params = self.parameters()
        missing = [name for name in params if name not in tensors]
        if missing:
            raise ShapeError(f"checkpoint lacks parameters: {', '.join(missing[:5])}")
        for name, param in params.items():
            value = np.asarray(tensors[name])
            if value.shape != param.shape:
                raise ShapeError(f"{name}: checkpoint shape {list(value.shape)} != model {list(param.shape)}")
            param.value[...] = value

    def reset_state(self):
        """Zero membrane potentials and drop cached activations."""
        for conv in self.convs():
            conv.reset()
        for act in self.activations():
            act.reset()
        self._cache = None

    def reset_stats(self):
        for conv in self.convs():
            conv.reset_stats()
        for act in self.activations():
            act.reset_stats()

    def check_input(self, height: int, width: int):
        pass

    # -- per-timestep graph, supplied by subclasses --

    def _step(self, x: np.ndarray) -> List[np.ndarray]:
        raise NotImplementedError

    def _step_backward(self, d_heads: Sequence[np.ndarray]):
        raise NotImplementedError

    # -- forward / backward --

    def forward(self, frames: np.ndarray) -> FlowOutput:
        """Run a GroupedInput ([T, 4, H, W] or batched [N, T, 4, H, W]) through time."""
        if self.spec.neuron != 'spiking':
            raise UsageError("analog networks take the whole volume; use forward_analog")
        frames = np.asarray(frames, dtype=self.dtype)
        single = frames.ndim == 4
        if single:
            frames = frames[None]
        if frames.ndim != 5 or frames.shape[2] != 4:
            raise ShapeError(f"grouped input must be [N, T, 4, H, W], got {list(frames.shape)}")
        self.check_input(*frames.shape[-2:])
        self.reset_state()
        self.reset_stats()

        accumulators = None
        for t in range(frames.shape[1]):
            heads = self._step(frames[:, t])
            if accumulators is None:
                accumulators = [h.copy() for h in heads]
            else:
                for acc, head in zip(accumulators, heads):
                    acc += head
        return self._finish(accumulators, frames.shape[1], single)

    def forward_analog(self, volume) -> FlowOutput:
        """Single pass of an analog model over all bins stacked as channels.

        Accepts an EventVolume, one [2B, H, W] channel stack or a batch [N, 2B, H, W].
        """
        if self.spec.neuron != 'analog':
            raise UsageError("spiking networks consume grouped frames; use forward")
        if isinstance(volume, EventVolume):
            volume = volume.as_channels()
        x = np.asarray(volume, dtype=self.dtype)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.ndim != 4 or x.shape[1] != self.spec.input_channels:
            raise ShapeError(
                f"analog input must be [N, {self.spec.input_channels}, H, W], got {list(x.shape)}"
            )
        self.check_input(*x.shape[-2:])
        self.reset_state()
        self.reset_stats()
        heads = self._step(np.ascontiguousarray(x))
        return self._finish([h.copy() for h in heads], 1, single)

    def run(self, inputs: np.ndarray) -> FlowOutput:
        """forward or forward_analog depending on the neuron type; inputs are grouped frames."""
        if self.spec.neuron == 'spiking':
            return self.forward(inputs)
        frames = np.asarray(inputs)
        single = frames.ndim == 4
        if single:
            frames = frames[None]
        n, steps, _, h, w = frames.shape
        # [N, T, (g, p), H, W] -> [N, p, (g, T), H, W], i.e. the ungrouped volume.
        volume = frames.reshape(n, steps, 2, 2, h, w).transpose(0, 3, 2, 1, 4, 5)
        channels = volume.reshape(n, 4 * steps, h, w)
        return self.forward_analog(channels[0] if single else channels)

    def _finish(self, accumulators: List[np.ndarray], steps: int, single: bool) -> FlowOutput:
        scale = self.spec.flow_scale
        squashed = [np.tanh(acc) for acc in accumulators]
        flows = [scale * s for s in squashed]
        activity = OrderedDict((layer.name, layer.activity) for layer in self.lif_layers())
        self._cache = {'squashed': squashed, 'steps': steps, 'single': single}
        flow = flows[-1][0] if single else flows[-1]
        return FlowOutput(flow, flows, accumulators, activity, steps)

    def backward(self, d_flow: np.ndarray, d_scales: Optional[Sequence[np.ndarray]] = None):
        """Backpropagate dL/dflow (and optionally per-scale grads) through every timestep.

        Gradients accumulate into the parameters; call zero_grad between steps.
        """
        if self._cache is None:
            raise UsageError("backward called without a preceding forward")
        squashed = self._cache['squashed']
        steps = self._cache['steps']
        d_flow = np.asarray(d_flow, dtype=self.dtype)
        if self._cache['single'] and d_flow.ndim == 3:
            d_flow = d_flow[None]
        grads = [None] * len(squashed)
        if d_scales is not None:
            for s, g in enumerate(d_scales):
                if g is not None:
                    grads[s] = np.asarray(g, dtype=self.dtype)
        grads[-1] = d_flow if grads[-1] is None else grads[-1] + d_flow

        scale = self.spec.flow_scale
        d_acc = []
        for s, (y, g) in enumerate(zip(squashed, grads)):
            if g is None:
                d_acc.append(np.zeros_like(y))
            else:
                d_acc.append(ops.tanh_backward(ops.scale_backward(g, scale), y))
        # Every timestep's head output feeds the accumulator with unit weight.
        for _ in range(steps):
            self._step_backward(d_acc)
        self._cache = None


class SpikingUNet(Network):
    """Four stride-2 encoders, two residual blocks, four upsampling decoders with flow heads."""

    def __init__(self, spec: ModelSpec, lif: LifConfig, seed: int, dtype=np.float32):
        super().__init__(spec, lif, seed, dtype)
        b = spec.base_channels
        enc_ch = [b, 2 * b, 4 * b, 8 * b]
        self.encoders = []
        in_ch = spec.input_channels
        for i, ch in enumerate(enc_ch):
            self.encoders.append(self._unit(f'encoder{i}', in_ch, ch, stride=2, propagate=i > 0))
            in_ch = ch

        self.residuals = []
        for j in range(2):
            first = self._unit(f'residual{j}a', 8 * b, 8 * b)
            second = self._unit(f'residual{j}b', 8 * b, 8 * b)
            self.residuals.append(ResidualBlock(first, second))

        dec_ch = [2 * b, b, max(b // 2, 1), max(b // 2, 1)]
        self.decoders = []
        self.heads = []
        self._concat = []
        prev = 8 * b
        for s, ch in enumerate(dec_ch):
            skip = enc_ch[3 - s]
            self._concat.append((prev, skip))
            self.decoders.append(self._unit(f'decoder{s}', prev + skip, ch))
            self.heads.append(self._conv(f'head{s}', ch, 2, kernel=1))
            prev = ch

    def convs(self) -> List[Conv2d]:
        convs = [unit.conv for unit in self.encoders]
        for block in self.residuals:
            convs += [block.first.conv, block.second.conv]
        convs += [unit.conv for unit in self.decoders]
        return convs + self.heads

    def activations(self) -> list:
        acts = [unit.act for unit in self.encoders]
        for block in self.residuals:
            acts += [block.first.act, block.second.act]
        return acts + [unit.act for unit in self.decoders]

    @property
    def head_convs(self) -> List[Conv2d]:
        return list(self.heads)

    def check_input(self, height: int, width: int):
        if height % UNET_DIVISOR or width % UNET_DIVISOR:
            raise ShapeError(
                f"U-Net input {height}x{width} must be a multiple of {UNET_DIVISOR} in both dimensions"
            )

    def _step(self, x: np.ndarray) -> List[np.ndarray]:
        skips = []
        h = x
        for unit in self.encoders:
            h = unit.forward(h)
            skips.append(h)
        for block in self.residuals:
            h = block.forward(h)
        heads = []
        for s, unit in enumerate(self.decoders):
            up = ops.upsample_bilinear2x(ops.concat_channels([h, skips[3 - s]]))
            h = unit.forward(up)
            heads.append(self.heads[s].forward(h))
        return heads

    def _step_backward(self, d_heads: Sequence[np.ndarray]):
        d_skips = [None] * len(self.encoders)
        d_h = None
        for s in reversed(range(len(self.decoders))):
            g = self.heads[s].backward(d_heads[s])
            if d_h is not None:
                g = g + d_h
            d_up = self.decoders[s].backward(g)
            d_cat = ops.upsample_bilinear2x_backward(d_up)
            d_h, d_skips[3 - s] = ops.concat_channels_backward(d_cat, self._concat[s])
        for block in reversed(self.residuals):
            d_h = block.backward(d_h)
        for i in reversed(range(len(self.encoders))):
            d_h = self.encoders[i].backward(d_h + d_skips[i])
        return d_h


class FireNet(Network):
    """Lightweight full-resolution network: five stride-1 stages of 32 channels."""

    def __init__(self, spec: ModelSpec, lif: LifConfig, seed: int, dtype=np.float32):
        super().__init__(spec, lif, seed, dtype)
        ch = FIRENET_CHANNELS
        self.stem = self._unit('stem', spec.input_channels, ch, propagate=False)
        self.stage1 = self._unit('stage1', ch, ch)
        self.block1 = ResidualBlock(self._unit('residual0a', ch, ch), self._unit('residual0b', ch, ch))
        self.stage2 = self._unit('stage2', ch, ch)
        self.block2 = ResidualBlock(self._unit('residual1a', ch, ch), self._unit('residual1b', ch, ch))
        self.head = self._conv('head0', ch, 2, kernel=1)

    def _stages(self) -> list:
        return [self.stem, self.stage1, self.block1, self.stage2, self.block2]

    def convs(self) -> List[Conv2d]:
        convs = []
        for stage in self._stages():
            if isinstance(stage, ResidualBlock):
                convs += [stage.first.conv, stage.second.conv]
            else:
                convs.append(stage.conv)
        return convs + [self.head]

    def activations(self) -> list:
        acts = []
        for stage in self._stages():
            if isinstance(stage, ResidualBlock):
                acts += [stage.first.act, stage.second.act]
            else:
                acts.append(stage.act)
        return acts

    @property
    def head_convs(self) -> List[Conv2d]:
        return [self.head]

    def _step(self, x: np.ndarray) -> List[np.ndarray]:
        h = x
        for stage in self._stages():
            h = stage.forward(h)
        return [self.head.forward(h)]

    def _step_backward(self, d_heads: Sequence[np.ndarray]):
        d_h = self.head.backward(d_heads[0])
        for stage in reversed(self._stages()):
            d_h = stage.backward(d_h)
        return d_h


def build_model(spec: ModelSpec, seed: int = 0, lif: LifConfig = None, dtype=np.float32) -> Network:
    """Instantiate the network a ModelSpec describes, deterministically from seed."""
    lif = lif or LifConfig()
    if spec.kind == 'unet':
        network = SpikingUNet(spec, lif, seed, dtype)
    elif spec.kind == 'firenet':
        network = FireNet(spec, lif, seed, dtype)
    else:
        raise ConfigError(f"unknown model kind '{spec.kind}'")
    logger.info("built %s (%s): %d parameters", spec.label, spec.kind, network.num_parameters())
    return network
