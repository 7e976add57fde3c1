"""
VOL1 volume files

Layout (little-endian):
- magic "VOL1"
- u32 count of extents
- u32 extents (C, D, H, W)
- float32 row-major payload
- u32 CRC32 of everything before the trailer
"""

import logging
import struct
import zlib
from pathlib import Path
from typing import Union

import numpy as np

from errors import DataError

logger = logging.getLogger(__name__)

VOLUME_MAGIC = b"VOL1"


def encode_volume(volume: np.ndarray) -> bytes:
    values = np.asarray(volume, dtype="<f4")
    if values.ndim == 3:
        values = values[None]
    if values.ndim != 4:
        raise DataError(f"VOL1 volumes are (C, D, H, W), got shape {values.shape}")
    body = VOLUME_MAGIC + struct.pack(f"<I{values.ndim}I", values.ndim, *values.shape)
    body += np.ascontiguousarray(values).tobytes()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_volume(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    """
    Decode a VOL1 blob into a float32 (C, D, H, W) array.

    Raises:
        DataError: Bad magic, truncated file or checksum mismatch
    """
    if len(blob) < 12 or blob[:4] != VOLUME_MAGIC:
        raise DataError(f"{source}: not a VOL1 volume")
    body, trailer = blob[:-4], blob[-4:]
    (expected,) = struct.unpack("<I", trailer)
    if zlib.crc32(body) & 0xFFFFFFFF != expected:
        raise DataError(f"{source}: CRC32 mismatch")
    (rank,) = struct.unpack_from("<I", body, 4)
    header = 8 + 4 * rank
    if len(body) < header:
        raise DataError(f"{source}: truncated VOL1 header")
    extents = struct.unpack_from(f"<{rank}I", body, 8)
    count = int(np.prod(extents, dtype=np.int64))
    if len(body) != header + 4 * count:
        raise DataError(f"{source}: payload size does not match extents {extents}")
    return np.frombuffer(body, dtype="<f4", offset=header).reshape(extents).astype(np.float32)


def write_volume(path: Union[str, Path], volume: np.ndarray) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(encode_volume(volume))
    return target


def read_volume(path: Union[str, Path]) -> np.ndarray:
    source = Path(path)
    if not source.is_file():
        raise DataError(f"Volume file not found: {source}")
    return decode_volume(source.read_bytes(), str(source))
