"""Stateful network layers that remember what they need for backward.

Each layer keeps a stack of forward inputs (or a spike trace). Backward
calls must mirror forward calls in reverse order, one per timestep.
"""
from typing import Dict, List

import numpy as np

from spikeflow import ops
from spikeflow.lif import LifConfig, LifParams, LifState, SpikeTrace, lif_backward_step, lif_step
from spikeflow.tensor import Parameter, fan_in_uniform


class Conv2d:
    """Square-kernel convolution with 'same'-style padding."""

    def __init__(self, name: str, in_channels: int, out_channels: int, kernel: int,
                 rng: np.random.Generator, stride: int = 1, dtype=np.float64,
                 propagate: bool = True):
        self.name = name
        self.propagate = propagate
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = kernel // 2
        self.weight = Parameter(fan_in_uniform(rng, (out_channels, in_channels, kernel, kernel), dtype))
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype))
        self._inputs: List[np.ndarray] = []
        self.reset_stats()

    def parameters(self) -> Dict[str, Parameter]:
        return {f'{self.name}.weight': self.weight, f'{self.name}.bias': self.bias}

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._inputs.append(x)
        y = ops.conv2d(x, self.weight.value, self.bias.value, self.stride, self.padding)
        self.input_activity += float(x.mean()) * x.shape[0]
        self.samples_seen += x.shape[0]
        self.output_shape = y.shape[1:]
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x = self._inputs.pop()
        dx, dw, db = ops.conv2d_backward(dy, x, self.weight.value, self.stride, self.padding,
                                         need_dx=self.propagate)
        self.weight.accumulate(dw)
        self.bias.accumulate(db)
        return dx

    @property
    def synapses_per_neuron(self) -> int:
        return self.kernel * self.kernel * self.in_channels

    def reset(self):
        self._inputs.clear()

    def reset_stats(self):
        self.input_activity = 0.0
        self.samples_seen = 0
        self.output_shape = None


class LifLayer:
    """A population of LIF neurons sharing one learnable threshold and leak."""

    def __init__(self, name: str, config: LifConfig, dtype=np.float64):
        self.name = name
        self.config = config
        self.v_th = Parameter(np.array(config.v_th, dtype=dtype))
        self.leak = Parameter(np.array(config.leak, dtype=dtype))
        self.state: LifState = None
        self.trace = SpikeTrace()
        self._d_u_next = None
        self.reset_stats()

    def parameters(self) -> Dict[str, Parameter]:
        return {f'{self.name}.v_th': self.v_th, f'{self.name}.leak': self.leak}

    @property
    def params(self) -> LifParams:
        return LifParams(self.v_th.value.item(), self.leak.value.item(),
                         self.config.gamma, self.config.reset)

    def forward(self, current: np.ndarray) -> np.ndarray:
        if self.state is None:
            self.state = LifState.zeros(current.shape, current.dtype)
        self.state, spikes, _, record = lif_step(self.state, current, self.params)
        self.trace.append(record)
        self.spike_count += float(spikes.sum())
        self.neuron_steps += spikes.size
        self.max_abs_u = max(self.max_abs_u, float(np.max(np.abs(self.state.u))))
        return spikes

    def backward(self, d_spikes: np.ndarray) -> np.ndarray:
        record = self.trace.records.pop()
        if self._d_u_next is None:
            self._d_u_next = np.zeros_like(record.u)
        d_current, self._d_u_next, d_vth, d_leak = lif_backward_step(
            record, d_spikes, self._d_u_next, self.params
        )
        self.v_th.grad += d_vth
        self.leak.grad += d_leak
        return d_current

    @property
    def activity(self) -> float:
        """Mean spikes per neuron per timestep since the last stats reset."""
        return self.spike_count / self.neuron_steps if self.neuron_steps else 0.0

    def reset(self):
        """Zero membrane state; samples never share state."""
        self.state = None
        self.trace = SpikeTrace()
        self._d_u_next = None

    def reset_stats(self):
        self.spike_count = 0.0
        self.neuron_steps = 0
        self.max_abs_u = 0.0


class ReluLayer:
    """Analog activation used by the non-spiking baselines."""

    def __init__(self, name: str):
        self.name = name
        self._outputs: List[np.ndarray] = []

    def parameters(self) -> Dict[str, Parameter]:
        return {}

    def forward(self, x: np.ndarray) -> np.ndarray:
        y = ops.relu(x)
        self._outputs.append(y)
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return ops.relu_backward(dy, self._outputs.pop())

    def reset(self):
        self._outputs.clear()

    def reset_stats(self):
        pass


def make_activation(name: str, neuron: str, lif: LifConfig, dtype):
    """LIF layer for spiking models, ReLU for analog ones."""
    if neuron == 'spiking':
        return LifLayer(name, lif, dtype)
    return ReluLayer(name)


class ConvUnit:
    """Convolution followed by its activation."""

    def __init__(self, conv: Conv2d, act):
        self.conv = conv
        self.act = act

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.act.forward(self.conv.forward(x))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return self.conv.backward(self.act.backward(dy))


class ResidualBlock:
    """Two 3x3 convs; the block input is added to the second conv's current."""

    def __init__(self, first: ConvUnit, second: ConvUnit):
        self.first = first
        self.second = second

    def forward(self, x: np.ndarray) -> np.ndarray:
        a = self.first.forward(x)
        current = ops.add(self.second.conv.forward(a), x)
        return self.second.act.forward(current)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        d_current = self.second.act.backward(dy)
        d_skip, d_conv = ops.add_backward(d_current)
        d_a = self.second.conv.backward(d_conv)
        return d_skip + self.first.backward(d_a)
