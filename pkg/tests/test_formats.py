"""Tests for the EVT1, FLO1, netpbm and snapshot formats."""
import hashlib
from collections import OrderedDict

import numpy as np
import pytest

from spikeflow import formats
from spikeflow.errors import DataError, EventFormatError, FlowFormatError, SnapshotError
from spikeflow.events import Event, EventStream, Polarity


@pytest.fixture
def stream():
    return EventStream.from_events([
        Event(0, 1, 10, Polarity.ON),
        Event(2, 0, 15, Polarity.OFF),
        Event(3, 2, 15, Polarity.ON),
    ], width=4, height=3)


class TestEventFiles:
    def test_round_trip(self, stream, tmp_path):
        path = tmp_path / 'scene.evt'
        formats.write_events(stream, path)
        assert formats.read_events(path) == stream

    def test_large_stream_rewrite_is_bit_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        n = 100_000
        big = EventStream(rng.integers(0, 640, n), rng.integers(0, 480, n),
                          np.sort(rng.integers(0, 10**9, n)), np.where(rng.random(n) < 0.5, 1, -1),
                          640, 480)
        first = tmp_path / 'a.evt'
        second = tmp_path / 'b.evt'
        formats.write_events(big, first)
        formats.write_events(formats.read_events(first), second)
        assert hashlib.sha256(first.read_bytes()).digest() == hashlib.sha256(second.read_bytes()).digest()

    def test_record_layout(self, stream):
        blob = formats.encode_events(stream)
        assert blob[:4] == b'EVT1'
        assert len(blob) == formats.EVENT_HEADER.size + 3 * 16

    def test_bad_magic(self, stream):
        blob = b'XXXX' + formats.encode_events(stream)[4:]
        with pytest.raises(EventFormatError, match='bad magic') as info:
            formats.decode_events(blob)
        assert info.value.code == 'bad_magic'

    def test_truncated_record(self, stream):
        blob = formats.encode_events(stream)[:-5]
        with pytest.raises(EventFormatError) as info:
            formats.decode_events(blob)
        assert info.value.code == 'truncated'

    def test_unsorted_timestamps(self, stream):
        records = np.frombuffer(formats.encode_events(stream), dtype=formats.EVENT_RECORD,
                                offset=formats.EVENT_HEADER.size).copy()
        records['t'] = [30, 20, 10]
        blob = formats.encode_events(stream)[:formats.EVENT_HEADER.size] + records.tobytes()
        with pytest.raises(EventFormatError) as info:
            formats.decode_events(blob)
        assert info.value.code == 'unsorted'

    def test_out_of_bounds_pixel(self, stream):
        records = np.frombuffer(formats.encode_events(stream), dtype=formats.EVENT_RECORD,
                                offset=formats.EVENT_HEADER.size).copy()
        records['x'][2] = 9
        blob = formats.encode_events(stream)[:formats.EVENT_HEADER.size] + records.tobytes()
        with pytest.raises(EventFormatError) as info:
            formats.decode_events(blob)
        assert info.value.code == 'out_of_bounds'

    def test_empty_stream(self, tmp_path):
        path = tmp_path / 'empty.evt'
        formats.write_events(EventStream.empty(5, 6), path)
        loaded = formats.read_events(path)
        assert len(loaded) == 0
        assert (loaded.width, loaded.height) == (5, 6)


class TestFlowFiles:
    def test_round_trip(self, tmp_path):
        flow = np.random.default_rng(0).normal(size=(2, 5, 7)).astype(np.float32)
        path = tmp_path / 'gt.flo'
        formats.write_flow(flow, path)
        loaded = formats.read_flow(path)
        assert loaded.dtype == np.float32
        np.testing.assert_array_equal(loaded, flow)

    def test_layout_is_row_major_pairs(self, tmp_path):
        flow = np.zeros((2, 1, 2), dtype=np.float32)
        flow[0, 0, 1] = 3.0
        flow[1, 0, 1] = -1.0
        path = tmp_path / 'gt.flo'
        formats.write_flow(flow, path)
        blob = path.read_bytes()
        assert blob[:4] == b'FLO1'
        values = np.frombuffer(blob, dtype='<f4', offset=formats.FLOW_HEADER.size)
        assert values.tolist() == [0.0, 0.0, 3.0, -1.0]

    def test_bad_magic(self, tmp_path):
        path = tmp_path / 'bad.flo'
        path.write_bytes(b'NOPE' + b'\x00' * 12)
        with pytest.raises(FlowFormatError):
            formats.read_flow(path)

    def test_wrong_length(self, tmp_path):
        path = tmp_path / 'short.flo'
        formats.write_flow(np.zeros((2, 3, 3)), path)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(FlowFormatError):
            formats.read_flow(path)

    def test_rejects_wrong_shape(self, tmp_path):
        with pytest.raises(FlowFormatError):
            formats.write_flow(np.zeros((3, 2, 2)), tmp_path / 'x.flo')


class TestNetpbm:
    def test_pgm_round_trip_quantizes_to_8_bits(self, tmp_path):
        image = np.linspace(0, 1, 12).reshape(3, 4)
        path = tmp_path / 'img.pgm'
        formats.write_pgm(image, path)
        np.testing.assert_allclose(formats.read_pgm(path), image, atol=0.5 / 255)

    def test_ppm_round_trip(self, tmp_path):
        rgb = np.random.default_rng(0).integers(0, 256, size=(4, 5, 3)).astype(np.uint8)
        path = tmp_path / 'img.ppm'
        formats.write_ppm(rgb, path)
        np.testing.assert_array_equal(formats.read_ppm(path), rgb)

    def test_wrong_kind_rejected(self, tmp_path):
        path = tmp_path / 'img.pgm'
        formats.write_pgm(np.zeros((2, 2)), path)
        with pytest.raises(DataError):
            formats.read_ppm(path)

    def test_files_are_binary_netpbm(self, tmp_path):
        formats.write_pgm(np.zeros((2, 3)), tmp_path / 'img.pgm')
        formats.write_ppm(np.zeros((2, 3, 3), dtype=np.uint8), tmp_path / 'img.ppm')
        assert (tmp_path / 'img.pgm').read_bytes()[:2] == b'P5'
        assert (tmp_path / 'img.ppm').read_bytes()[:2] == b'P6'

    def test_channel_order_is_rgb(self, tmp_path):
        rgb = np.zeros((1, 2, 3), dtype=np.uint8)
        rgb[0, 0] = [255, 0, 0]
        formats.write_ppm(rgb, tmp_path / 'red.ppm')
        assert formats.read_ppm(tmp_path / 'red.ppm')[0, 0].tolist() == [255, 0, 0]

    def test_missing_image(self, tmp_path):
        with pytest.raises(DataError, match='not found'):
            formats.read_pgm(tmp_path / 'absent.pgm')


class TestSnapshots:
    def test_round_trip_preserves_order_dtype_and_shape(self, tmp_path):
        tensors = OrderedDict([
            ('encoder0.weight', np.arange(24, dtype=np.float32).reshape(2, 3, 2, 2)),
            ('layer0.v_th', np.array(0.75)),
            ('counter', np.array([1, 2, 3], dtype=np.int64)),
        ])
        path = tmp_path / 'snap.bin'
        formats.save_snapshot(tensors, path)
        loaded = formats.load_snapshot(path)
        assert list(loaded) == list(tensors)
        for name, value in tensors.items():
            assert loaded[name].dtype == value.dtype
            assert loaded[name].shape == value.shape
            np.testing.assert_array_equal(loaded[name], value)

    def test_bad_magic(self):
        with pytest.raises(SnapshotError):
            formats.decode_snapshot(b'JUNK\x00\x00\x00\x00')

    def test_truncated_block(self):
        blob = formats.encode_snapshot({'w': np.ones(10)})
        with pytest.raises(SnapshotError):
            formats.decode_snapshot(blob[:-8])

    def test_unsupported_dtype(self):
        with pytest.raises(SnapshotError):
            formats.encode_snapshot({'w': np.ones(3, dtype=np.int16)})
