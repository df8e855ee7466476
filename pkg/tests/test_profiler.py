import numpy as np
import pytest

from spikeflow.errors import DataError, UsageError
from spikeflow.layers import LifLayer
from spikeflow.lif import LifConfig
from spikeflow.models import ModelSpec, build_model
from spikeflow.profiler import (
    E_AC_PJ,
    E_MAC_PJ,
    LayerProfile,
    count_mac_ops,
    count_ops,
    energy,
    layer_profiles,
    measure_activity,
    profile,
)


def inputs(count=2, steps=2, size=16, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.uniform(0, 2, size=(steps, 4, size, size)) for _ in range(count)]


class TestOperationCounts:
    def test_single_layer(self):
        ops_snn, ops_ann = count_ops([LayerProfile('conv', 100, 9, activity=0.5, timesteps=5)])
        assert ops_ann == 900
        assert ops_snn == 2250

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        profiles = [LayerProfile(f'l{i}', int(rng.integers(1, 5000)), int(rng.integers(1, 600)),
                                 float(rng.random()), 5, bool(rng.random() < 0.7)) for i in range(12)]
        ops_snn, ops_ann = count_ops(profiles)
        snn = ann = mac = 0.0
        for p in profiles:
            ann += p.neurons * p.synapses
            if p.spike_driven:
                snn += p.timesteps * p.neurons * p.synapses * p.activity
            else:
                mac += p.timesteps * p.neurons * p.synapses
        assert ops_snn == snn
        assert ops_ann == ann
        assert count_mac_ops(profiles) == mac

    def test_linear_in_activity_and_timesteps(self):
        base = count_ops([LayerProfile('c', 64, 27, 0.2, 2)])[0]
        assert count_ops([LayerProfile('c', 64, 27, 0.4, 2)])[0] == pytest.approx(2 * base)
        assert count_ops([LayerProfile('c', 64, 27, 0.2, 6)])[0] == pytest.approx(3 * base)

    def test_full_activity_single_step_equals_ann(self):
        profiles = [LayerProfile('a', 256, 36, 1.0, 1), LayerProfile('b', 128, 72, 1.0, 1)]
        ops_snn, ops_ann = count_ops(profiles)
        assert ops_snn == ops_ann


class TestEnergy:
    def test_ann_energy(self):
        assert energy(None, 1e9).e_ann_mj == pytest.approx(4.6)

    def test_snn_to_ann_ratio(self):
        report = energy(1e9, 1e9)
        assert report.e_snn_mj / report.e_ann_mj == pytest.approx(E_AC_PJ / E_MAC_PJ)
        assert report.improvement == pytest.approx(4.6 / 0.9)

    def test_mac_ops_cost_full_price(self):
        report = energy(0.0, 1e9, mac_ops=1e9)
        assert report.e_snn_mj == pytest.approx(4.6)

    def test_zero_ops(self):
        report = energy(0.0, 0.0)
        assert report.e_total_mj == 0.0
        assert report.e_ann_mj == 0.0
        assert report.improvement is None

    def test_reference_energy(self):
        report = energy(1e9, 2e9, reference=1.8)
        assert report.improvement == pytest.approx(2.0)

    def test_negative_ops(self):
        with pytest.raises(DataError):
            energy(-1.0, 5.0)

    def test_analog_table_marks_missing_columns(self):
        text = energy(None, 3e9).to_table()
        header, row = text.splitlines()
        assert 'OPS_SNN' in header
        assert 'n/a' in row
        assert '13.800' in row


class TestActivity:
    def test_huge_threshold_silences_every_layer(self):
        network = build_model(ModelSpec(kind='firenet', timesteps=2), lif=LifConfig(v_th=1e30))
        report = measure_activity(network, inputs())
        assert all(rate == 0.0 for rate in report.layers.values())
        assert report.mean == 0.0

    def test_constant_drive_fires_every_step(self):
        layer = LifLayer('layer0', LifConfig(v_th=0.01, leak=1.0))
        for _ in range(5):
            layer.forward(np.ones((1, 2, 3, 3)))
        assert layer.activity == 1.0

    def test_reproducible(self):
        network = build_model(ModelSpec(kind='firenet', timesteps=2), seed=3, lif=LifConfig(v_th=0.5))
        first = measure_activity(network, inputs())
        second = measure_activity(network, inputs())
        assert first.layers == second.layers
        assert 0.0 < first.mean < 1.0

    def test_analog_network_rejected(self):
        network = build_model(ModelSpec(kind='firenet', neuron='analog', timesteps=2))
        with pytest.raises(UsageError, match='activity undefined'):
            measure_activity(network, inputs())

    def test_empty_input_set(self):
        with pytest.raises(DataError):
            measure_activity(build_model(ModelSpec(kind='firenet')), [])


class TestProfile:
    def test_first_layer_and_heads_are_macs(self):
        network = build_model(ModelSpec(base_channels=4, timesteps=2), lif=LifConfig(v_th=0.5))
        profiles, _ = layer_profiles(network, inputs())
        by_name = {p.name: p for p in profiles}
        assert not by_name['encoder0'].spike_driven
        assert not by_name['head3'].spike_driven
        assert by_name['encoder1'].spike_driven
        assert by_name['encoder0'].neurons == 4 * 8 * 8
        assert by_name['encoder0'].synapses == 9 * 4

    def test_spiking_report(self):
        network = build_model(ModelSpec(kind='firenet', timesteps=2), lif=LifConfig(v_th=0.5))
        report = profile(network, inputs())
        assert report.label == 'Fire-SNN'
        assert report.params == network.num_parameters()
        assert 0.0 < report.activity_percent < 100.0
        assert report.ops_ann == 16 * 16 * (32 * 9 * 4 + 6 * 32 * 9 * 32 + 2 * 32)
        assert report.e_total_mj == pytest.approx(report.e_snn_mj)
        record = report.to_record()
        assert record['ops_snn'] == report.ops_snn

    def test_analog_report(self):
        network = build_model(ModelSpec(kind='firenet', neuron='analog', timesteps=2))
        report = profile(network, inputs())
        assert report.ops_snn is None
        assert report.e_snn_mj is None
        assert report.e_total_mj == pytest.approx(report.e_ann_mj)
        assert report.improvement == pytest.approx(1.0)
