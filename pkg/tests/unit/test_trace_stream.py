"""
Unit tests for the binary chain-trace stream
"""

import numpy as np
import pytest

from core.errors import FormatError
from estimators.trace_stream import (
    MAGIC,
    TraceRecord,
    TraceWriter,
    iter_trace,
    read_trace,
    summarize_trace,
)


@pytest.fixture
def records():
    rng = np.random.default_rng(0)
    return [
        TraceRecord(chain, step, [rng.standard_normal((2, 2)), rng.standard_normal((2, 2))])
        for chain in (0, 1)
        for step in (10, 20)
    ]


class TestTraceStream:
    """Test cases for writing and reading traces"""

    def test_read_back(self, tmp_path, records):
        """Frames come back in write order with identical kernels"""
        path = tmp_path / "traces" / "chain.bnns"
        with TraceWriter(path) as writer:
            writer.write_all(records)
        assert writer.frames == 4
        decoded = read_trace(path)
        assert [(r.chain, r.step) for r in decoded] == [(0, 10), (0, 20), (1, 10), (1, 20)]
        np.testing.assert_array_equal(decoded[3].kernels[1], records[3].kernels[1])

    def test_header(self, tmp_path, records):
        """Files open with the magic and version"""
        path = tmp_path / "chain.bnns"
        with TraceWriter(path) as writer:
            writer.write_all(records[:1])
        data = path.read_bytes()
        assert data[:4] == MAGIC
        assert int.from_bytes(data[4:8], "little") == 1

    def test_empty_trace(self):
        """A header alone is a valid empty trace"""
        assert list(iter_trace(MAGIC + (1).to_bytes(4, "little"))) == []

    def test_bad_magic(self):
        """Unknown magic is rejected at offset 0"""
        with pytest.raises(FormatError) as info:
            list(iter_trace(b"XXXX" + (1).to_bytes(4, "little")))
        assert info.value.offset == 0

    def test_bad_version(self):
        """Unknown versions are rejected"""
        with pytest.raises(FormatError):
            list(iter_trace(MAGIC + (7).to_bytes(4, "little")))

    def test_truncated(self, tmp_path, records):
        """A cut final frame is reported"""
        path = tmp_path / "chain.bnns"
        with TraceWriter(path) as writer:
            writer.write_all(records)
        with pytest.raises(FormatError):
            list(iter_trace(path.read_bytes()[:-3]))

    def test_write_requires_open(self, tmp_path, records):
        """Writing outside the context manager fails"""
        with pytest.raises(RuntimeError):
            TraceWriter(tmp_path / "chain.bnns").write(0, 0, records[0].kernels)

    def test_summary(self, tmp_path, records):
        """Summaries average every layer over all frames"""
        path = tmp_path / "chain.bnns"
        with TraceWriter(path) as writer:
            writer.write_all(records)
        summary = summarize_trace(path)
        assert summary.frames == 4
        assert summary.chains == [0, 1]
        expected = np.mean([r.kernels[0] for r in records], axis=0)
        np.testing.assert_allclose(summary.mean_kernels[0], expected)
