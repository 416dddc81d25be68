"""
IDX reader and writer
Big-endian magic and u32 dimensions followed by a raw u8 payload, gzip handled transparently
"""

import gzip
import struct
from pathlib import Path
from typing import Optional, Union

import numpy as np
import structlog

from core.errors import FormatError, InvalidArgumentError

logger = structlog.get_logger(__name__)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
_KINDS = {IMAGES_MAGIC: "images", LABELS_MAGIC: "labels"}
_GZIP_SIGNATURE = b"\x1f\x8b"


def _read_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == _GZIP_SIGNATURE:
        return gzip.decompress(raw)
    return raw


def parse_idx(data: bytes, expect: Optional[str] = None, scale: bool = True) -> np.ndarray:
    """
    Decode an IDX byte string

    Args:
        data: raw (decompressed) bytes
        expect: "images" or "labels" to enforce the magic number
        scale: map image bytes to [0, 1]

    Returns:
        float images (count, rows, cols) or integer labels (count,)
    """
    if len(data) < 4:
        raise FormatError("missing magic number", offset=0)
    (magic,) = struct.unpack(">I", data[:4])
    kind = _KINDS.get(magic)
    if kind is None:
        raise FormatError(f"bad magic 0x{magic:08x}", offset=0)
    if expect is not None and kind != expect:
        raise FormatError(f"expected {expect} but magic 0x{magic:08x} marks {kind}", offset=0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise FormatError("truncated dimension header", offset=len(data))
    shape = struct.unpack(f">{ndim}I", data[4:header])
    count = int(np.prod(shape))
    payload = data[header:]
    if len(payload) < count:
        raise FormatError(f"truncated payload, {count} bytes expected", offset=len(data))
    if len(payload) > count:
        raise FormatError("trailing bytes after payload", offset=header + count)
    values = np.frombuffer(payload, dtype=np.uint8).reshape(shape)
    if kind == "labels":
        return values.astype(np.int64)
    return values.astype(float) / 255.0 if scale else values.copy()


def load_idx(path: Union[str, Path], expect: Optional[str] = None, scale: bool = True) -> np.ndarray:
    """Load an IDX images or labels file, plain or gzip-compressed"""
    path = Path(path)
    if not path.exists():
        raise InvalidArgumentError(f"IDX file not found: {path}")
    values = parse_idx(_read_bytes(path), expect=expect, scale=scale)
    logger.info("idx loaded", path=str(path), shape=list(values.shape))
    return values


def encode_idx(values: np.ndarray) -> bytes:
    """Images in [0, 1] (count, rows, cols) or integer labels (count,) to IDX bytes"""
    values = np.asarray(values)
    if values.ndim == 3:
        magic = IMAGES_MAGIC
        if np.issubdtype(values.dtype, np.floating):
            if values.min(initial=0.0) < 0.0 or values.max(initial=0.0) > 1.0:
                raise InvalidArgumentError("image values must lie in [0, 1]")
            values = np.rint(values * 255.0)
    elif values.ndim == 1:
        magic = LABELS_MAGIC
    else:
        raise InvalidArgumentError(f"IDX tensors are 3-d images or 1-d labels, got {values.ndim}-d")
    if values.min(initial=0) < 0 or values.max(initial=0) > 255:
        raise InvalidArgumentError("IDX payload must fit in unsigned bytes")
    header = struct.pack(f">I{values.ndim}I", magic, *values.shape)
    return header + values.astype(np.uint8).tobytes()


def write_idx(path: Union[str, Path], values: np.ndarray, compress: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode_idx(values)
    path.write_bytes(gzip.compress(data) if compress else data)
    return path
