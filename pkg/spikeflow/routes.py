"""Flask routes for the report server."""
import threading
from contextlib import contextmanager

import numpy as np
from flask import Blueprint, current_app, jsonify, request

from spikeflow.data import FlowDataset
from spikeflow.errors import DataError, SpikeFlowError, UsageError
from spikeflow.events import Polarity
from spikeflow.profiler import profile
from spikeflow.synth import synth_scene
from spikeflow.trainer import Checkpoint, evaluate

main = Blueprint('main', __name__)

session = None
_session_lock = threading.Lock()


class ReportSession:
    """Lazily loaded checkpoint, network and dataset for one configuration.

    The network carries membrane state between timesteps, so requests take
    turns on it through network_in_use().
    """

    def __init__(self, checkpoint_path, data_path):
        self.checkpoint_path = checkpoint_path
        self.data_path = data_path
        self._checkpoint = None
        self._network = None
        self._dataset = None
        self._lock = threading.RLock()

    @property
    def checkpoint(self) -> Checkpoint:
        with self._lock:
            if self._checkpoint is None:
                if not self.checkpoint_path:
                    raise UsageError("no checkpoint configured (set SPIKEFLOW_CHECKPOINT)")
                self._checkpoint = Checkpoint.load(self.checkpoint_path)
            return self._checkpoint

    @property
    def network(self):
        with self._lock:
            if self._network is None:
                self._network = self.checkpoint.build()
            return self._network

    @property
    def dataset(self) -> FlowDataset:
        with self._lock:
            if self._dataset is None:
                if not self.data_path:
                    raise UsageError("no dataset configured (set SPIKEFLOW_DATA)")
                self._dataset = FlowDataset.load(self.data_path, self.checkpoint.spec.timesteps)
            return self._dataset

    @contextmanager
    def network_in_use(self):
        with self._lock:
            yield self.network


def get_session() -> ReportSession:
    """Get or create the session for the app's configuration."""
    global session
    key = (current_app.config['SPIKEFLOW_CHECKPOINT'], current_app.config['SPIKEFLOW_DATA'])
    with _session_lock:
        if session is None or (session.checkpoint_path, session.data_path) != key:
            session = ReportSession(*key)
        return session


@main.errorhandler(SpikeFlowError)
def handle_error(exc):
    status = 400 if isinstance(exc, UsageError) else 422
    return jsonify({'success': False, 'error': str(exc)}), status


@main.route('/')
def index():
    """List the available endpoints."""
    return jsonify({'endpoints': ['/api/model', '/api/evaluate', '/api/profile', '/api/synth']})


@main.route('/api/model')
def get_model():
    """Manifest, parameter count and learned neuron dynamics."""
    s = get_session()
    network = s.network
    return jsonify({
        'success': True,
        'manifest': dict(s.checkpoint.manifest()),
        'label': network.spec.label,
        'parameters': network.num_parameters(),
        'v_th': {layer.name: layer.v_th.value.item() for layer in network.lif_layers()},
        'leak': {layer.name: layer.leak.value.item() for layer in network.lif_layers()},
    })


@main.route('/api/evaluate')
def get_evaluation():
    """AEE and 1/2/3PE on the configured dataset."""
    s = get_session()
    dataset = s.dataset
    with s.network_in_use() as network:
        record = evaluate(network, dataset)
    if record is None:
        raise DataError("dataset has no ground-truth flow or no events")
    return jsonify({'success': True, 'metrics': record})


@main.route('/api/profile')
def get_profile():
    """Operation counts and energy of the configured checkpoint."""
    s = get_session()
    inputs = [sample.frames for sample in s.dataset.samples]
    with s.network_in_use() as network:
        report = profile(network, inputs)
    return jsonify({'success': True, 'report': report.to_record()})


@main.route('/api/synth', methods=['POST'])
def make_scene():
    """Generate a scene and summarise its events and flow."""
    data = request.get_json(silent=True) or {}
    try:
        height, width = (int(v) for v in data.get('size', (64, 64)))
        velocity = tuple(float(v) for v in data.get('velocity', (2.0, 0.0)))
        scene = synth_scene(
            data.get('pattern', 'bar'), velocity, height, width,
            event_rate=float(data.get('rate', 0.0)), theta=float(data.get('theta', 0.2)),
            seed=int(data.get('seed', 0)), contrast=float(data.get('contrast', 0.6)),
            rotation=float(data.get('rotation', 0.0)),
        )
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid synth request: {exc}") from exc
    mask = scene.pattern_mask
    magnitude = np.hypot(scene.gt_flow[0], scene.gt_flow[1])
    return jsonify({
        'success': True,
        'events': len(scene.stream),
        'on': scene.stream.count(Polarity.ON),
        'off': scene.stream.count(Polarity.OFF),
        'pattern_pixels': int(mask.sum()),
        'mean_flow': [float(c[mask].mean()) if mask.any() else 0.0 for c in scene.gt_flow],
        'max_flow': float(magnitude.max()),
    })
