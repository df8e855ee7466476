"""Binary and text file formats: EVT1 events, FLO1 flow, netpbm images, tensor snapshots."""
import logging
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Union

import cv2
import numpy as np

from spikeflow.errors import DataError, EventFormatError, FlowFormatError, SnapshotError
from spikeflow.events import EventStream

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

EVENT_MAGIC = b'EVT1'
EVENT_HEADER = struct.Struct('<4sHHQ')
EVENT_RECORD = np.dtype([
    ('x', '<u2'),
    ('y', '<u2'),
    ('t', '<u8'),
    ('p', 'i1'),
    ('pad', 'V3'),
])

FLOW_MAGIC = b'FLO1'
FLOW_HEADER = struct.Struct('<4sHH')

SNAPSHOT_MAGIC = b'SNP1'
SNAPSHOT_DTYPES = {0: np.dtype('<f4'), 1: np.dtype('<f8'), 2: np.dtype('<i8')}
SNAPSHOT_CODES = {np.dtype('float32'): 0, np.dtype('float64'): 1, np.dtype('int64'): 2}


# -- EVT1 ---------------------------------------------------------------

def encode_events(stream: EventStream) -> bytes:
    """Serialize a stream to EVT1 bytes."""
    records = np.zeros(len(stream), dtype=EVENT_RECORD)
    records['x'] = stream.x
    records['y'] = stream.y
    records['t'] = stream.t
    records['p'] = stream.p
    header = EVENT_HEADER.pack(EVENT_MAGIC, stream.width, stream.height, len(stream))
    return header + records.tobytes()


def decode_events(blob: bytes) -> EventStream:
    """Parse EVT1 bytes, rejecting bad magic, truncation, disorder and out-of-range pixels."""
    if len(blob) < EVENT_HEADER.size:
        raise EventFormatError('truncated', 'file shorter than the EVT1 header')
    magic, width, height, count = EVENT_HEADER.unpack_from(blob)
    if magic != EVENT_MAGIC:
        raise EventFormatError('bad_magic', 'bad magic')
    expected = EVENT_HEADER.size + count * EVENT_RECORD.itemsize
    if len(blob) < expected:
        raise EventFormatError(
            'truncated', f'truncated record: need {expected} bytes, file has {len(blob)}'
        )
    records = np.frombuffer(blob, dtype=EVENT_RECORD, count=count, offset=EVENT_HEADER.size)
    t = records['t'].astype(np.int64)
    if np.any(np.diff(t) < 0):
        raise EventFormatError('unsorted', 'unsorted timestamps')
    x = records['x'].astype(np.int64)
    y = records['y'].astype(np.int64)
    if count and (x.max() >= width or y.max() >= height):
        raise EventFormatError('out_of_bounds', 'event pixel outside the sensor')
    return EventStream(x, y, t, records['p'].astype(np.int8), width, height)


def write_events(stream: EventStream, path: PathLike):
    """Write a stream as an EVT1 file."""
    Path(path).write_bytes(encode_events(stream))
    logger.debug("wrote %d events to %s", len(stream), path)


def read_events(path: PathLike) -> EventStream:
    """Read an EVT1 file."""
    return decode_events(Path(path).read_bytes())


# -- FLO1 ---------------------------------------------------------------

def write_flow(flow: np.ndarray, path: PathLike):
    """Write a [2, H, W] flow field as FLO1 (row-major float32 (u, v) pairs)."""
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise FlowFormatError(f"flow must be [2, H, W], got {list(flow.shape)}")
    _, height, width = flow.shape
    pairs = np.ascontiguousarray(flow.transpose(1, 2, 0), dtype='<f4')
    Path(path).write_bytes(FLOW_HEADER.pack(FLOW_MAGIC, width, height) + pairs.tobytes())


def read_flow(path: PathLike) -> np.ndarray:
    """Read a FLO1 file into a float32 [2, H, W] array."""
    blob = Path(path).read_bytes()
    if len(blob) < FLOW_HEADER.size:
        raise FlowFormatError(f"{path}: shorter than the FLO1 header")
    magic, width, height = FLOW_HEADER.unpack_from(blob)
    if magic != FLOW_MAGIC:
        raise FlowFormatError(f"{path}: bad magic")
    expected = FLOW_HEADER.size + width * height * 8
    if len(blob) != expected:
        raise FlowFormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
    pairs = np.frombuffer(blob, dtype='<f4', offset=FLOW_HEADER.size).reshape(height, width, 2)
    return np.ascontiguousarray(pairs.transpose(2, 0, 1)).astype(np.float32)


# -- netpbm -------------------------------------------------------------

def write_pgm(image: np.ndarray, path: PathLike):
    """Write a [H, W] image with values in [0, 1] as 8-bit binary PGM."""
    pixels = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    if pixels.ndim != 2:
        raise DataError(f"PGM image must be [H, W], got {list(pixels.shape)}")
    if not cv2.imwrite(str(path), pixels):
        raise DataError(f"{path}: could not write image")


def write_ppm(rgb: np.ndarray, path: PathLike):
    """Write a [H, W, 3] uint8 RGB image as binary PPM."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DataError(f"PPM image must be [H, W, 3], got {list(rgb.shape)}")
    if not cv2.imwrite(str(path), cv2.cvtColor(rgb, cv2.COLOR_RGB2BGR)):
        raise DataError(f"{path}: could not write image")


def _imread(path: PathLike) -> np.ndarray:
    if not Path(path).is_file():
        raise DataError(f"{path}: image not found")
    image = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if image is None or image.dtype != np.uint8:
        raise DataError(f"{path}: expected an 8-bit netpbm image")
    return image


def read_pgm(path: PathLike) -> np.ndarray:
    """Read an 8-bit PGM into float64 values in [0, 1]."""
    image = _imread(path)
    if image.ndim != 2:
        raise DataError(f"{path}: expected a greyscale image, got {image.shape[2]} channels")
    return image.astype(np.float64) / 255.0


def read_ppm(path: PathLike) -> np.ndarray:
    """Read an 8-bit PPM into a [H, W, 3] uint8 RGB array."""
    image = _imread(path)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"{path}: expected a colour image")
    return cv2.cvtColor(image, cv2.COLOR_BGR2RGB)


# -- tensor snapshots ---------------------------------------------------

def encode_snapshot(tensors: Dict[str, np.ndarray]) -> bytes:
    """Serialize named tensors: table of name/dtype/shape, then little-endian data blocks."""
    table = [SNAPSHOT_MAGIC, struct.pack('<I', len(tensors))]
    blocks = []
    for name, value in tensors.items():
        value = np.asarray(value)
        code = SNAPSHOT_CODES.get(value.dtype)
        if code is None:
            raise SnapshotError(f"{name}: unsupported dtype {value.dtype}")
        encoded = name.encode('utf-8')
        table.append(struct.pack('<H', len(encoded)) + encoded)
        table.append(struct.pack('<BB', code, value.ndim))
        table.append(struct.pack(f'<{value.ndim}Q', *value.shape))
        blocks.append(np.ascontiguousarray(value, dtype=SNAPSHOT_DTYPES[code]).tobytes())
    return b''.join(table + blocks)


def decode_snapshot(blob: bytes) -> 'OrderedDict[str, np.ndarray]':
    """Inverse of encode_snapshot."""
    try:
        if blob[:4] != SNAPSHOT_MAGIC:
            raise SnapshotError('bad snapshot magic')
        (count,) = struct.unpack_from('<I', blob, 4)
        pos = 8
        entries = []
        for _ in range(count):
            (length,) = struct.unpack_from('<H', blob, pos)
            pos += 2
            name = blob[pos:pos + length].decode('utf-8')
            pos += length
            code, ndim = struct.unpack_from('<BB', blob, pos)
            pos += 2
            shape = struct.unpack_from(f'<{ndim}Q', blob, pos)
            pos += 8 * ndim
            entries.append((name, SNAPSHOT_DTYPES[code], shape))
        tensors = OrderedDict()
        for name, dtype, shape in entries:
            size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if pos + size > len(blob):
                raise SnapshotError(f'{name}: truncated data block')
            data = np.frombuffer(blob, dtype=dtype, count=size // dtype.itemsize, offset=pos)
            tensors[name] = data.reshape(shape).astype(dtype.newbyteorder('='))
            pos += size
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise SnapshotError(f'malformed snapshot: {exc}') from exc
    return tensors


def save_snapshot(tensors: Dict[str, np.ndarray], path: PathLike):
    """Write named tensors to a snapshot file."""
    Path(path).write_bytes(encode_snapshot(tensors))


def load_snapshot(path: PathLike) -> 'OrderedDict[str, np.ndarray]':
    """Read a snapshot file."""
    return decode_snapshot(Path(path).read_bytes())
