"""
Binary tensor files used by checkpoints and dataset exports.

Layout, every field little-endian:

    bytes 0-3     magic b'NBT\\x01'
    bytes 4-5     uint16 format version (1)
    bytes 6-7     uint16 rank R
    bytes 8-15    uint64 element count N
    next 4*R      R uint32 dims, outermost first; their product equals N
    next 4*N      N float32 values in C order

Nothing follows the data; a file of any other length is truncated or padded.
"""
import hashlib
import struct
from pathlib import Path

import numpy as np

from engine.errors import InvalidArgumentError, CheckpointTruncatedError, ChecksumError

# 16-byte header; see the module docstring
TENSOR_MAGIC = b'NBT\x01'
TENSOR_VERSION = 1
HEADER = struct.Struct('<4sHHQ')


def encode_tensor(array: np.ndarray) -> bytes:
    """Serialize an array as header + dims + little-endian float32 payload"""
    array = np.asarray(array)
    if array.ndim == 0 or any(d <= 0 for d in array.shape):
        raise InvalidArgumentError(f'tensor shape must be non-empty and positive, got {array.shape}')
    header = HEADER.pack(TENSOR_MAGIC, TENSOR_VERSION, array.ndim, array.size)
    dims = struct.pack(f'<{array.ndim}I', *array.shape)
    return header + dims + np.ascontiguousarray(array, dtype='<f4').tobytes()


def decode_tensor(blob: bytes) -> np.ndarray:
    """Inverse of encode_tensor; raises on truncated or malformed input"""
    if len(blob) < HEADER.size:
        raise CheckpointTruncatedError('tensor payload shorter than its header')
    magic, version, rank, count = HEADER.unpack_from(blob)
    if magic != TENSOR_MAGIC or version != TENSOR_VERSION:
        raise InvalidArgumentError(f'not a tensor payload (magic {magic!r}, version {version})')
    dims_end = HEADER.size + 4 * rank
    if len(blob) < dims_end:
        raise CheckpointTruncatedError('tensor payload truncated inside its dims')
    shape = struct.unpack_from(f'<{rank}I', blob, HEADER.size)
    if int(np.prod(shape)) != count:
        raise InvalidArgumentError(f'dims {shape} disagree with element count {count}')
    if len(blob) != dims_end + 4 * count:
        raise CheckpointTruncatedError(f'tensor payload has {len(blob)} bytes, expected {dims_end + 4 * count}')
    data = np.frombuffer(blob, dtype='<f4', count=count, offset=dims_end)
    return data.astype(np.float32).reshape(shape)


def sha256_hex(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def write_tensor(path, array: np.ndarray) -> dict:
    """Write one tensor file and return its manifest entry"""
    blob = encode_tensor(array)
    Path(path).write_bytes(blob)
    return {'file': Path(path).name, 'shape': list(np.shape(array)), 'bytes': len(blob), 'sha256': sha256_hex(blob)}


def read_tensor(path, expected_sha256: str | None = None, expected_bytes: int | None = None) -> np.ndarray:
    blob = Path(path).read_bytes()
    if expected_bytes is not None and len(blob) < expected_bytes:
        raise CheckpointTruncatedError(f'{Path(path).name}: {len(blob)} of {expected_bytes} bytes present')
    if expected_sha256 is not None and sha256_hex(blob) != expected_sha256:
        raise ChecksumError(f'{Path(path).name}: checksum mismatch')
    return decode_tensor(blob)
