"""Spiking activity, operation counts and the 45nm energy model."""
import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from spikeflow.errors import DataError, UsageError
from spikeflow.models import Network

logger = logging.getLogger(__name__)

# Energy per operation in picojoules, 32-bit floating point in 45nm CMOS.
E_AC_PJ = 0.9
E_MAC_PJ = 4.6
PJ_PER_MJ = 1e9


@dataclass
class LayerProfile:
    """Operation-count inputs for one convolution.

    neurons is the output size (C_out * H_out * W_out), synapses the
    operations per output neuron (k * k * C_in) and activity the mean input
    spike rate per neuron per timestep. Layers that are not spike driven (the
    analog input layer and the flow heads) run as MACs every timestep.
    """

    name: str
    neurons: int
    synapses: int
    activity: float = 1.0
    timesteps: int = 1
    spike_driven: bool = True


@dataclass
class ActivityReport:
    """Per-layer firing rates plus the totals they were computed from."""

    layers: 'OrderedDict[str, float]'
    conv_inputs: 'OrderedDict[str, float]'
    spikes: float
    neuron_steps: int

    @property
    def mean(self) -> float:
        """Neuron-weighted mean spikes per neuron per timestep."""
        return self.spikes / self.neuron_steps if self.neuron_steps else 0.0


def measure_activity(network: Network, inputs: Sequence[np.ndarray]) -> ActivityReport:
    """Mean spikes per neuron per timestep at every LIF layer over a set of grouped inputs."""
    if network.spec.neuron != 'spiking':
        raise UsageError("activity undefined for analog networks")
    if not len(inputs):
        raise DataError("activity measurement needs at least one sample")
    lifs = network.lif_layers()
    convs = network.convs()
    spikes = np.zeros(len(lifs))
    steps = np.zeros(len(lifs), dtype=np.int64)
    conv_sum = np.zeros(len(convs))
    conv_seen = np.zeros(len(convs), dtype=np.int64)
    for frames in inputs:
        network.forward(np.asarray(frames, dtype=network.dtype))
        for i, layer in enumerate(lifs):
            spikes[i] += layer.spike_count
            steps[i] += layer.neuron_steps
        for i, conv in enumerate(convs):
            conv_sum[i] += conv.input_activity
            conv_seen[i] += conv.samples_seen
    network.reset_state()
    layers = OrderedDict((layer.name, float(spikes[i] / steps[i]) if steps[i] else 0.0)
                         for i, layer in enumerate(lifs))
    conv_inputs = OrderedDict((conv.name, float(conv_sum[i] / conv_seen[i]) if conv_seen[i] else 0.0)
                              for i, conv in enumerate(convs))
    return ActivityReport(layers, conv_inputs, float(spikes.sum()), int(steps.sum()))


def layer_profiles(network: Network, inputs: Sequence[np.ndarray]) -> Tuple[List[LayerProfile], Optional[ActivityReport]]:
    """One LayerProfile per convolution; activity is measured for spiking networks."""
    if not len(inputs):
        raise DataError("profiling needs at least one sample")
    spiking = network.spec.neuron == 'spiking'
    report = None
    if spiking:
        report = measure_activity(network, inputs)
    else:
        network.run(np.asarray(inputs[0], dtype=network.dtype))
    timesteps = network.spec.timesteps if spiking else 1
    mac_layers = {id(network.input_conv)} | {id(head) for head in network.head_convs}

    profiles = []
    for conv in network.convs():
        neurons = int(np.prod(conv.output_shape))
        driven = spiking and id(conv) not in mac_layers
        activity = report.conv_inputs[conv.name] if driven else 1.0
        profiles.append(LayerProfile(conv.name, neurons, conv.synapses_per_neuron, activity,
                                     timesteps, driven))
    return profiles, report


def count_ops(profiles: Sequence[LayerProfile]) -> Tuple[float, float]:
    """(ops_snn, ops_ann): T * sum(M * C * F) over spike-driven layers, and sum(M * C) over all."""
    ops_snn = 0.0
    ops_ann = 0.0
    for p in profiles:
        ops_ann += p.neurons * p.synapses
        if p.spike_driven:
            ops_snn += p.timesteps * p.neurons * p.synapses * p.activity
    return ops_snn, ops_ann


def count_mac_ops(profiles: Sequence[LayerProfile]) -> float:
    """MACs of the layers that are not spike driven, executed every timestep."""
    return float(sum(p.timesteps * p.neurons * p.synapses for p in profiles if not p.spike_driven))


@dataclass
class EnergyReport:
    """Operation counts and energies; energies always recompute from the stored counts."""

    ops_ann: float
    ops_snn: Optional[float] = None
    mac_ops: float = 0.0
    params: int = 0
    activity_percent: Optional[float] = None
    reference_mj: Optional[float] = None
    label: str = ''

    @property
    def spiking(self) -> bool:
        return self.ops_snn is not None

    @property
    def e_ann_mj(self) -> float:
        return self.ops_ann * E_MAC_PJ / PJ_PER_MJ

    @property
    def e_snn_mj(self) -> Optional[float]:
        if not self.spiking:
            return None
        return (self.ops_snn * E_AC_PJ + self.mac_ops * E_MAC_PJ) / PJ_PER_MJ

    @property
    def e_total_mj(self) -> float:
        return self.e_snn_mj if self.spiking else self.e_ann_mj

    @property
    def improvement(self) -> Optional[float]:
        """Reference energy over this model's energy (the analog tally by default)."""
        reference = self.e_ann_mj if self.reference_mj is None else self.reference_mj
        if self.e_total_mj == 0:
            return None
        return reference / self.e_total_mj

    def to_record(self) -> Dict[str, object]:
        record = asdict(self)
        record.update(e_ann_mj=self.e_ann_mj, e_snn_mj=self.e_snn_mj,
                      e_total_mj=self.e_total_mj, improvement=self.improvement)
        return record

    def to_table(self) -> str:
        def fmt(value, spec):
            return 'n/a' if value is None else format(value, spec)
        header = ('Model', 'Params(x10^6)', 'OPS_ANN(x10^9)', 'Avg. Spiking Activity(%)',
                  'OPS_SNN(x10^9)', 'E_total(mJ)', 'Improvement(x)')
        row = (
            self.label or '-',
            fmt(self.params / 1e6, '.3f'),
            fmt(self.ops_ann / 1e9, '.3f'),
            fmt(self.activity_percent, '.2f'),
            fmt(None if self.ops_snn is None else self.ops_snn / 1e9, '.3f'),
            fmt(self.e_total_mj, '.3f'),
            fmt(self.improvement, '.2f'),
        )
        widths = [max(len(h), len(r)) for h, r in zip(header, row)]
        lines = ['  '.join(h.ljust(w) for h, w in zip(header, widths)),
                 '  '.join(r.ljust(w) for r, w in zip(row, widths))]
        return '\n'.join(lines)


def energy(ops_snn: Optional[float], ops_ann: float, mac_ops: float = 0.0,
           reference: Optional[float] = None) -> EnergyReport:
    """Energy model over given op counts; ops_snn None marks an analog model."""
    if ops_ann < 0 or (ops_snn is not None and ops_snn < 0) or mac_ops < 0:
        raise DataError("operation counts must be >= 0")
    return EnergyReport(ops_ann=float(ops_ann), ops_snn=None if ops_snn is None else float(ops_snn),
                        mac_ops=float(mac_ops), reference_mj=reference)


def profile(network: Network, inputs: Sequence[np.ndarray], reference: Optional[float] = None) -> EnergyReport:
    """Full report for a network over a sample set."""
    profiles, activity = layer_profiles(network, inputs)
    ops_snn, ops_ann = count_ops(profiles)
    if network.spec.neuron == 'spiking':
        report = energy(ops_snn, ops_ann, count_mac_ops(profiles), reference)
        report.activity_percent = 100.0 * activity.mean
    else:
        report = energy(None, ops_ann, reference=reference)
    report.params = network.num_parameters()
    report.label = network.spec.label
    logger.info("profiled %s over %d samples: E_total=%.4g mJ", report.label, len(inputs), report.e_total_mj)
    return report
