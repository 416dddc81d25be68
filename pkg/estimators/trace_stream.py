"""
Binary chain-trace stream
Little-endian: magic "BNNS", u32 version, then length-prefixed frames of per-sample kernels
"""

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Dict, Iterator, List, Optional, Sequence, Union

import numpy as np
import structlog

from core.errors import FormatError

logger = structlog.get_logger(__name__)

MAGIC = b"BNNS"
VERSION = 1
_HEADER = struct.Struct("<4sI")
_FRAME = struct.Struct("<IIQI")
_U32 = struct.Struct("<I")


@dataclass
class TraceRecord:
    """One recorded sample: the kernels of every hidden layer at a chain step"""

    chain: int
    step: int
    kernels: List[np.ndarray]


def _encode_frame(chain: int, step: int, kernels: Sequence[np.ndarray]) -> bytes:
    body = bytearray()
    for kernel in kernels:
        values = np.ascontiguousarray(kernel, dtype="<f8")
        body += _U32.pack(values.ndim)
        body += struct.pack(f"<{values.ndim}I", *values.shape)
        body += values.tobytes()
    length = _FRAME.size - _U32.size + len(body)
    return _FRAME.pack(length, chain, step, len(kernels)) + bytes(body)


class TraceWriter:
    """Append-only writer for chain traces"""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._handle: Optional[BinaryIO] = None
        self.frames = 0
        self.logger = structlog.get_logger(__name__)

    def __enter__(self) -> "TraceWriter":
        self._handle = open(self.path, "wb")
        self._handle.write(_HEADER.pack(MAGIC, VERSION))
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()

    def write(self, chain: int, step: int, kernels: Sequence[np.ndarray]) -> None:
        if self._handle is None:
            raise RuntimeError("trace writer is not open")
        self._handle.write(_encode_frame(chain, step, kernels))
        self.frames += 1

    def write_all(self, records: Sequence[TraceRecord]) -> None:
        for record in records:
            self.write(record.chain, record.step, record.kernels)

    def close(self) -> None:
        if self._handle is not None:
            self._handle.close()
            self._handle = None
            self.logger.info("trace written", path=str(self.path), frames=self.frames)


def _take(data: bytes, offset: int, size: int, what: str) -> bytes:
    if offset + size > len(data):
        raise FormatError(f"truncated {what}", offset=offset)
    return data[offset : offset + size]


def iter_trace(data: bytes) -> Iterator[TraceRecord]:
    """Decode a complete trace held in memory"""
    magic, version = _HEADER.unpack(_take(data, 0, _HEADER.size, "header"))
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported trace version {version}", offset=4)
    offset = _HEADER.size
    while offset < len(data):
        start = offset
        length, chain, step, layers = _FRAME.unpack(_take(data, offset, _FRAME.size, "frame"))
        end = start + _U32.size + length
        if end > len(data):
            raise FormatError("truncated frame", offset=start)
        offset += _FRAME.size
        kernels = []
        for _ in range(layers):
            (ndim,) = _U32.unpack(_take(data, offset, _U32.size, "layer header"))
            offset += _U32.size
            shape = struct.unpack(f"<{ndim}I", _take(data, offset, 4 * ndim, "layer shape"))
            offset += 4 * ndim
            count = int(np.prod(shape)) if shape else 1
            raw = _take(data, offset, 8 * count, "layer payload")
            kernels.append(np.frombuffer(raw, dtype="<f8").reshape(shape).astype(float))
            offset += 8 * count
        if offset != end:
            raise FormatError("frame length disagrees with its contents", offset=start)
        yield TraceRecord(chain, step, kernels)


def read_trace(path: Union[str, Path]) -> List[TraceRecord]:
    return list(iter_trace(Path(path).read_bytes()))


@dataclass
class TraceSummary:
    frames: int
    chains: List[int]
    mean_kernels: List[np.ndarray]


def summarize_trace(path: Union[str, Path]) -> TraceSummary:
    """Per-layer mean kernels and sample counts of a trace file"""
    sums: Dict[int, np.ndarray] = {}
    frames = 0
    chains = set()
    for record in iter_trace(Path(path).read_bytes()):
        frames += 1
        chains.add(record.chain)
        for layer, kernel in enumerate(record.kernels):
            sums[layer] = kernel if layer not in sums else sums[layer] + kernel
    means = [sums[layer] / frames for layer in sorted(sums)]
    logger.debug("trace summarized", path=str(path), frames=frames)
    return TraceSummary(frames, sorted(chains), means)
