"""
On-disk formats: LIA1 checkpoints, binary PGM images and CSV tables.

Checkpoint layout (little-endian):

    b"LIA1" | u32 count | count x entry
    entry = u32 name_len | name (UTF-8) | u8 dtype | u32 ndim | u32 dims[ndim] | raw data

dtype code 0 is float32, the only one written.
"""

import logging
import os
import struct
from collections import OrderedDict
from typing import Dict, Iterable, Mapping, Tuple, Union

import numpy as np
import pandas as pd

from .tensor import Tensor

logger = logging.getLogger(__name__)

MAGIC = b'LIA1'
DTYPES = {0: np.dtype('<f4')}
DTYPE_CODES = {np.dtype('<f4'): 0}

Checkpoint = Dict[str, np.ndarray]


class CheckpointError(IOError):
    """Checkpoint file cannot be parsed"""


class BadMagicError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class BadEntryNameError(CheckpointError):
    pass


class UnknownDtypeError(CheckpointError):
    pass


def encode_checkpoint(ckpt: Mapping[str, Union[np.ndarray, Tensor]]) -> bytes:
    parts = [MAGIC, struct.pack('<I', len(ckpt))]
    for name, value in ckpt.items():
        array = np.asarray(getattr(value, 'data', value))
        if array.dtype.kind != 'f':
            raise UnknownDtypeError(f"{name}: only float tensors can be stored, got {array.dtype}")
        array = np.ascontiguousarray(array, dtype='<f4')
        encoded = name.encode('utf-8')
        parts.append(struct.pack('<I', len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack('<BI', DTYPE_CODES[array.dtype], array.ndim))
        parts.append(struct.pack(f'<{array.ndim}I', *array.shape))
        parts.append(array.tobytes(order='C'))
    return b''.join(parts)


class _Reader:
    def __init__(self, payload: bytes, source: str):
        self.payload = payload
        self.offset = 0
        self.source = source

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.payload):
            raise TruncatedCheckpointError(f"{self.source}: truncated at byte {self.offset} "
                                           f"(needed {size} more, file has {len(self.payload)})")
        chunk = self.payload[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(payload: bytes, source: str = '<bytes>') -> Checkpoint:
    """Parse a full payload; nothing is returned unless every entry decodes"""
    if payload[:4] != MAGIC:
        raise BadMagicError(f"{source}: expected magic {MAGIC!r}, found {payload[:4]!r}")
    reader = _Reader(payload, source)
    reader.take(4)
    (count,) = reader.unpack('<I')
    entries = OrderedDict()
    for _ in range(count):
        (name_len,) = reader.unpack('<I')
        raw_name = reader.take(name_len)
        try:
            name = raw_name.decode('utf-8')
        except UnicodeDecodeError as e:
            raise BadEntryNameError(f"{source}: entry name {raw_name!r} is not UTF-8 ({e.reason})") from e
        code, ndim = reader.unpack('<BI')
        if code not in DTYPES:
            raise UnknownDtypeError(f"{source}: entry '{name}' has unknown dtype code {code}")
        dims = reader.unpack(f'<{ndim}I')
        dtype = DTYPES[code]
        size = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        raw = reader.take(size * dtype.itemsize)
        entries[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).astype(np.float32)
    if reader.offset != len(payload):
        logger.warning(f"{source}: {len(payload) - reader.offset} trailing bytes ignored")
    return entries


def save_checkpoint(path: str, ckpt: Mapping[str, np.ndarray]) -> None:
    payload = encode_checkpoint(ckpt)
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'wb') as handle:
        handle.write(payload)
    logger.info(f"Saved checkpoint with {len(ckpt)} entries to {path} ({len(payload)} bytes)")


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, 'rb') as handle:
        payload = handle.read()
    ckpt = decode_checkpoint(payload, source=path)
    logger.info(f"Loaded checkpoint with {len(ckpt)} entries from {path}")
    return ckpt


def to_bytes(pixels: np.ndarray) -> np.ndarray:
    """[-1, 1] -> 0..255, rounding halves up"""
    scaled = np.floor((np.asarray(pixels, dtype=np.float64) + 1.0) * 127.5 + 0.5)
    return np.clip(scaled, 0, 255).astype(np.uint8)


def write_image(path: str, pixels: np.ndarray) -> None:
    """Binary PGM (P5, maxval 255)"""
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise ValueError(f"write_image: expected a 2-D image, got shape {pixels.shape}")
    height, width = pixels.shape
    header = f"P5\n{width} {height}\n255\n".encode('ascii')
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'wb') as handle:
        handle.write(header + to_bytes(pixels).tobytes())


def _header_tokens(payload: bytes, count: int) -> Tuple[list, int]:
    tokens = []
    offset = 0
    while len(tokens) < count:
        while offset < len(payload) and payload[offset:offset + 1].isspace():
            offset += 1
        if payload[offset:offset + 1] == b'#':
            while offset < len(payload) and payload[offset:offset + 1] != b'\n':
                offset += 1
            continue
        start = offset
        while offset < len(payload) and not payload[offset:offset + 1].isspace():
            offset += 1
        if start == offset:
            raise ValueError("PGM header ended early")
        tokens.append(payload[start:offset].decode('ascii'))
    # exactly one whitespace byte separates the header from the raster
    return tokens, offset + 1


def read_image(path: str) -> np.ndarray:
    """Parse a P5 file back to uint8 pixels of shape (height, width)"""
    with open(path, 'rb') as handle:
        payload = handle.read()
    tokens, offset = _header_tokens(payload, 4)
    magic, width, height, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic != 'P5' or maxval != 255:
        raise ValueError(f"{path}: unsupported PGM variant {magic} with maxval {maxval}")
    raster = np.frombuffer(payload[offset:offset + width * height], dtype=np.uint8)
    if raster.size != width * height:
        raise ValueError(f"{path}: raster has {raster.size} bytes, expected {width * height}")
    return raster.reshape(height, width)


def write_image_grid(path: str, images: Iterable[np.ndarray], columns: int = 8, pad: int = 1) -> None:
    """Tile equally shaped images into one PGM, background -1"""
    images = [np.asarray(image) for image in images]
    if not images:
        raise ValueError("write_image_grid: no images")
    h, w = images[0].shape
    rows = (len(images) + columns - 1) // columns
    grid = -np.ones((rows * (h + pad) + pad, columns * (w + pad) + pad), dtype=np.float32)
    for i, image in enumerate(images):
        r, c = divmod(i, columns)
        top, left = pad + r * (h + pad), pad + c * (w + pad)
        grid[top:top + h, left:left + w] = image
    write_image(path, grid)


def write_csv(path: str, frame: pd.DataFrame) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    frame.to_csv(path, index=False, sep=',', decimal='.')
    logger.info(f"Wrote {len(frame)} rows to {path}")


def read_csv(path: str) -> pd.DataFrame:
    return pd.read_csv(path)
