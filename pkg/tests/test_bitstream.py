import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from banc import bitstream
from banc.bitstream import BitstreamError, StreamHeader


def _random_chunks(rng, header):
    return [
        (rng.integers(0, header.codebook_size, (header.speech_frames, header.n_q)),
         rng.integers(0, header.codebook_size, (header.ir_frames, header.n_q)))
        for _ in range(header.num_chunks)
    ]


def _assert_same(a, b):
    assert len(a) == len(b)
    for (s1, i1), (s2, i2) in zip(a, b):
        np.testing.assert_array_equal(s1, s2)
        np.testing.assert_array_equal(i1, i2)


class TestPack:
    def test_reference_payload_size(self):
        h = StreamHeader()
        assert h.bits_per_frame == 80
        blob = bitstream.pack(_random_chunks(np.random.default_rng(0), h), h)
        assert (320 + 16) * 80 == 26880
        assert len(blob) - bitstream.HEADER_BYTES == 3360

    def test_zero_indices(self):
        h = StreamHeader()
        chunks = [(np.zeros((320, 8), int), np.zeros((16, 8), int))]
        blob = bitstream.pack(chunks, h)
        assert not any(blob[bitstream.HEADER_BYTES :])

    def test_msb_first(self):
        h = StreamHeader(n_q=1, codebook_size=4, speech_factor=2, ir_factor=4, chunk_samples=4, num_samples=4)
        # two speech frames (1, 2) and one IR frame (3): bits 01 10 11 -> 0b01101100
        blob = bitstream.pack([(np.array([[1], [2]]), np.array([[3]]))], h)
        assert blob[bitstream.HEADER_BYTES :] == bytes([0b01101100])

    def test_index_overflow(self):
        h = StreamHeader()
        chunks = [(np.full((320, 8), 1024), np.zeros((16, 8), int))]
        with pytest.raises(BitstreamError, match="out of range"):
            bitstream.pack(chunks, h)

    def test_wrong_chunk_count(self):
        h = StreamHeader(num_samples=2 * 96000)
        with pytest.raises(BitstreamError, match="chunks"):
            bitstream.pack(_random_chunks(np.random.default_rng(0), StreamHeader()), h)

    def test_deterministic(self):
        h = StreamHeader()
        c = _random_chunks(np.random.default_rng(3), h)
        assert bitstream.pack(c, h) == bitstream.pack(c, h)


class TestUnpack:
    def test_reference_roundtrip(self):
        h = StreamHeader()
        c = _random_chunks(np.random.default_rng(1), h)
        h2, c2 = bitstream.unpack(bitstream.pack(c, h))
        assert h2 == h
        _assert_same(c, c2)

    def test_roundtrip_many_seeds(self):
        h = StreamHeader(num_samples=96000)
        for seed in range(1000):
            c = _random_chunks(np.random.default_rng(seed), h)
            _, c2 = bitstream.unpack(bitstream.pack(c, h))
            _assert_same(c, c2)

    def test_truncated(self):
        h = StreamHeader()
        blob = bitstream.pack(_random_chunks(np.random.default_rng(0), h), h)
        with pytest.raises(BitstreamError, match=r"payload has 26872 bits, expected 26880"):
            bitstream.unpack(blob[:-1])

    def test_bad_version(self):
        blob = bytearray(bitstream.pack(_random_chunks(np.random.default_rng(0), StreamHeader()), StreamHeader()))
        blob[4:6] = (999).to_bytes(2, "big")
        with pytest.raises(BitstreamError, match="unsupported version 999"):
            bitstream.unpack(bytes(blob))

    def test_bad_magic(self):
        with pytest.raises(BitstreamError, match="magic"):
            bitstream.unpack(b"XXXX" + bytes(100))

    def test_index_bound_on_decode(self):
        # 1000 entries need 10 bits, so 1023 is representable but invalid
        h = StreamHeader(codebook_size=1000)
        blob = bytearray(bitstream.pack([(np.zeros((320, 8), int), np.zeros((16, 8), int))], h))
        blob[bitstream.HEADER_BYTES] = 0xFF
        blob[bitstream.HEADER_BYTES + 1] = 0xFF
        with pytest.raises(BitstreamError, match="exceeds codebook size"):
            bitstream.unpack(bytes(blob))

    @settings(max_examples=60, deadline=None)
    @given(
        n_q=st.integers(1, 8),
        log_size=st.integers(1, 12),
        chunks=st.integers(1, 3),
        partial=st.integers(0, 5999),
        seed=st.integers(0, 2**31),
    )
    def test_bijection(self, n_q, log_size, chunks, partial, seed):
        h = StreamHeader(n_q=n_q, codebook_size=2**log_size, chunk_samples=12000,
                         num_samples=12000 * chunks - partial)
        c = _random_chunks(np.random.default_rng(seed), h)
        blob = bitstream.pack(c, h)
        h2, c2 = bitstream.unpack(blob)
        assert h2 == h
        _assert_same(c, c2)
        assert bitstream.pack(c2, h2) == blob
        assert len(blob) == bitstream.HEADER_BYTES + h.num_chunks * h.chunk_bytes


class TestBandwidth:
    def test_reference(self):
        h = StreamHeader()
        assert bitstream.bandwidth(h) == 13440
        assert bitstream.comparator_bandwidth(h) == 25600
        assert 1 - bitstream.bandwidth(h) / bitstream.comparator_bandwidth(h) == pytest.approx(0.475, abs=1e-15)

    def test_independent_of_chunk(self):
        for chunk in (6000, 48000, 96000, 192000):
            assert bitstream.bandwidth(StreamHeader(chunk_samples=chunk, num_samples=chunk)) == 13440

    def test_compression_report(self):
        r = bitstream.compression_report(StreamHeader())
        assert r["raw_bps"] == 1_536_000
        assert r["bit_ratio"] == pytest.approx(114.2857, rel=1e-5)
        assert r["mean_factor"] == 3150
        assert r["mono_comparator_bit_ratio"] == 60
        assert r["savings_vs_comparator"] == pytest.approx(0.475)

    def test_describe_mentions_rate(self):
        assert "13440 bps" in bitstream.describe(StreamHeader())

    def test_factor_must_divide_chunk(self):
        with pytest.raises(BitstreamError):
            StreamHeader(chunk_samples=9600, num_samples=9600)


def test_file_roundtrip(tmp_path):
    h = StreamHeader(num_samples=100000)
    c = _random_chunks(np.random.default_rng(5), h)
    bitstream.write_stream(tmp_path / "x.banc", c, h)
    h2, c2 = bitstream.read_stream(tmp_path / "x.banc")
    assert h2.num_chunks == 2
    _assert_same(c, c2)
