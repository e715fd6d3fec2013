"""Bit-exact named-tensor checkpoint format.

Layout: magic bytes ``CBODD01``, then one record per array -- name length
(u32 LE), UTF-8 name, rank (u32 LE), extents (u32 LE each), payload of
float64 little-endian values -- and a trailing CRC32 (u32 LE) over all
preceding bytes.  Record order is preserved, so identical inputs always
produce identical files.

String metadata (config text, training provenance) rides along as arrays
of byte values under ``meta/`` names.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from cbodd.errors import DataError

MAGIC = b"CBODD01"
META_PREFIX = "meta/"


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    """Serialize ``arrays`` (name -> float64 array) in insertion order."""
    blob = bytearray(MAGIC)
    for name, values in arrays.items():
        encoded = name.encode("utf-8")
        arr = np.asarray(values, dtype=np.float64)
        blob += struct.pack("<I", len(encoded))
        blob += encoded
        blob += struct.pack("<I", arr.ndim)
        for extent in arr.shape:
            blob += struct.pack("<I", extent)
        blob += arr.astype("<f8", copy=False).tobytes(order="C")
    blob += struct.pack("<I", zlib.crc32(bytes(blob)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    """Read a checkpoint, verifying the magic bytes and trailing CRC32."""
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 4:
        raise DataError(f"checkpoint {path} is truncated")
    if not blob.startswith(MAGIC):
        raise DataError(f"checkpoint {path} has wrong magic bytes")
    body, (crc_stored,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise DataError(f"checkpoint {path} failed CRC verification")

    arrays: dict[str, np.ndarray] = {}
    offset = len(MAGIC)
    end = len(body)
    try:
        while offset < end:
            (name_len,) = struct.unpack_from("<I", body, offset)
            offset += 4
            name = body[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", body, offset)
            offset += 4
            extents = struct.unpack_from(f"<{rank}I", body, offset)
            offset += 4 * rank
            count = int(np.prod(extents)) if rank else 1
            values = np.frombuffer(body, dtype="<f8", count=count, offset=offset)
            offset += 8 * count
            arrays[name] = values.reshape(extents).astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise DataError(f"checkpoint {path} is malformed: {exc}") from exc
    if offset != end:
        raise DataError(f"checkpoint {path} has trailing garbage")
    return arrays


def encode_text(text: str) -> np.ndarray:
    """Pack a UTF-8 string into a float64 byte-value array."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def decode_text(values: np.ndarray) -> str:
    """Inverse of :func:`encode_text`."""
    return values.astype(np.uint8).tobytes().decode("utf-8")
