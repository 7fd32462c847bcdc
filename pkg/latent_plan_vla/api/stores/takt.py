"""
TAKT array container.

Layout (all integers little-endian):
    b"TAKT"  u16 version  u32 array count
    per array:
        u16 name length, name bytes (utf-8)
        u8 dtype code (1 = float64, 2 = int64)
        u8 rank, rank x u32 dims
        payload, row-major '<f8' / '<i8'
"""
from __future__ import annotations

import logging
import os
import struct
from pathlib import Path
from typing import Dict, Mapping

import numpy as np

from latent_plan_vla.schemas.general.errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b'TAKT'
VERSION = 1

_DTYPES = {1: np.dtype('<f8'), 2: np.dtype('<i8')}
_CODES = {'f': 1, 'i': 2, 'u': 2, 'b': 2}


def _code_for(arr: np.ndarray) -> int:
    code = _CODES.get(arr.dtype.kind)
    if code is None:
        raise CheckpointError(f"dtype {arr.dtype} cannot be stored in a TAKT container")
    return code


def encode_arrays(arrays: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack('<HI', VERSION, len(arrays))]
    for name, value in arrays.items():
        arr = np.asarray(value)
        code = _code_for(arr)
        raw_name = name.encode('utf-8')
        parts.append(struct.pack('<H', len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack('<BB', code, arr.ndim))
        parts.append(struct.pack(f'<{arr.ndim}I', *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b''.join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated TAKT container at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_arrays(buf: bytes) -> Dict[str, np.ndarray]:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a TAKT container (bad magic)")
    version, count = r.unpack('<HI')
    if version != VERSION:
        raise CheckpointError(f"unsupported TAKT version {version}")
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack('<H')
        name = r.take(name_len).decode('utf-8')
        code, rank = r.unpack('<BB')
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name!r}")
        shape = r.unpack(f'<{rank}I') if rank else ()
        dtype = _DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = r.take(n * dtype.itemsize)
        arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
        out[name] = arr.astype(dtype.newbyteorder('='), copy=True)
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after TAKT payload")
    return out


def save_arrays(path, arrays: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    os.makedirs(path.parent, exist_ok=True)
    path.write_bytes(encode_arrays(arrays))
    logger.debug("wrote %d arrays to %s", len(arrays), path)
    return path


def load_arrays(path) -> Dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode_arrays(path.read_bytes())
