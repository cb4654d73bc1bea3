"""Fixed-rate serialization of quantizer indices (``.banc`` files).

Header (big-endian, 28 bytes)::

    magic b"BANC" | version u16 | sample_rate u32 | speakers u8 | n_q u8 |
    codebook_size u16 | speech_factor u16 | ir_factor u16 |
    chunk_samples u32 | num_samples u32

Each chunk then carries ``chunk/speech_factor`` speech frames followed by
``chunk/ir_factor`` IR frames; a frame is ``n_q`` indices of
``ceil(log2(codebook_size))`` bits, MSB first.  Every chunk payload is
zero-padded to a byte boundary so chunks can be located without parsing.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"BANC"
VERSION = 1
_HEADER = struct.Struct(">4sHIBBHHHII")
HEADER_BYTES = _HEADER.size


class BitstreamError(ValueError):
    pass


@dataclass(frozen=True)
class StreamHeader:
    sample_rate: int = 48000
    speakers: int = 1
    n_q: int = 8
    codebook_size: int = 1024
    speech_factor: int = 300
    ir_factor: int = 6000
    chunk_samples: int = 96000
    num_samples: int = 96000
    version: int = VERSION

    def __post_init__(self):
        if self.codebook_size < 2:
            raise BitstreamError("codebook_size must be at least 2")
        for name in ("speech_factor", "ir_factor"):
            if self.chunk_samples % getattr(self, name):
                raise BitstreamError(f"{name} {getattr(self, name)} does not divide chunk_samples {self.chunk_samples}")
        if self.num_samples <= 0:
            raise BitstreamError("num_samples must be positive")

    @property
    def bits_per_index(self) -> int:
        return math.ceil(math.log2(self.codebook_size))

    @property
    def bits_per_frame(self) -> int:
        return self.n_q * self.bits_per_index

    @property
    def speech_frames(self) -> int:
        return self.chunk_samples // self.speech_factor

    @property
    def ir_frames(self) -> int:
        return self.chunk_samples // self.ir_factor

    @property
    def chunk_bits(self) -> int:
        return (self.speech_frames + self.ir_frames) * self.bits_per_frame

    @property
    def chunk_bytes(self) -> int:
        return (self.chunk_bits + 7) // 8

    @property
    def num_chunks(self) -> int:
        return -(-self.num_samples // self.chunk_samples)

    def to_bytes(self) -> bytes:
        return _HEADER.pack(MAGIC, self.version, self.sample_rate, self.speakers, self.n_q,
                            self.codebook_size, self.speech_factor, self.ir_factor,
                            self.chunk_samples, self.num_samples)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "StreamHeader":
        if len(blob) < HEADER_BYTES:
            raise BitstreamError(f"truncated header: {len(blob)} of {HEADER_BYTES} bytes")
        magic, version, *fields = _HEADER.unpack(blob[:HEADER_BYTES])
        if magic != MAGIC:
            raise BitstreamError(f"bad magic {magic!r}, expected {MAGIC!r}")
        if version != VERSION:
            raise BitstreamError(f"unsupported version {version} (this reader handles {VERSION})")
        return cls(*fields, version=version)


def _pack_chunk(speech: np.ndarray, ir: np.ndarray, header: StreamHeader) -> bytes:
    nbits = header.bits_per_index
    for name, arr, frames in (("speech", speech, header.speech_frames), ("ir", ir, header.ir_frames)):
        if arr.shape != (frames, header.n_q):
            raise BitstreamError(f"{name} indices shape {arr.shape}, expected {(frames, header.n_q)}")
    idx = np.concatenate([speech.reshape(-1), ir.reshape(-1)]).astype(np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= header.codebook_size):
        raise BitstreamError(f"index out of range [0, {header.codebook_size}): min {idx.min()}, max {idx.max()}")
    shifts = np.arange(nbits - 1, -1, -1)
    bits = ((idx[:, None] >> shifts) & 1).astype(np.uint8).reshape(-1)
    return np.packbits(bits).tobytes()


def _unpack_chunk(blob: bytes, header: StreamHeader) -> tuple[np.ndarray, np.ndarray]:
    nbits = header.bits_per_index
    bits = np.unpackbits(np.frombuffer(blob, dtype=np.uint8))[: header.chunk_bits]
    weights = 1 << np.arange(nbits - 1, -1, -1)
    idx = bits.reshape(-1, nbits).astype(np.int64) @ weights
    if idx.size and idx.max() >= header.codebook_size:
        raise BitstreamError(f"decoded index {idx.max()} exceeds codebook size {header.codebook_size}")
    cut = header.speech_frames * header.n_q
    return idx[:cut].reshape(-1, header.n_q), idx[cut:].reshape(-1, header.n_q)


def pack(chunks, header: StreamHeader) -> bytes:
    """Serialize ``[(speech_idx[T_s, n_q], ir_idx[T_ir, n_q]), ...]`` after the header."""
    chunks = list(chunks)
    if len(chunks) != header.num_chunks:
        raise BitstreamError(f"{len(chunks)} chunks given, header implies {header.num_chunks}")
    body = b"".join(_pack_chunk(np.asarray(s), np.asarray(i), header) for s, i in chunks)
    return header.to_bytes() + body


def unpack(blob: bytes) -> tuple[StreamHeader, list[tuple[np.ndarray, np.ndarray]]]:
    header = StreamHeader.from_bytes(blob)
    payload = blob[HEADER_BYTES:]
    expected = header.num_chunks * header.chunk_bytes
    if len(payload) != expected:
        raise BitstreamError(
            f"payload has {len(payload) * 8} bits, expected {expected * 8} "
            f"({header.num_chunks} chunks x {header.chunk_bytes} bytes)"
        )
    step = header.chunk_bytes
    chunks = [_unpack_chunk(payload[i * step : (i + 1) * step], header) for i in range(header.num_chunks)]
    return header, chunks


def write_stream(path: str | os.PathLike, chunks, header: StreamHeader) -> None:
    Path(path).write_bytes(pack(chunks, header))


def read_stream(path: str | os.PathLike):
    return unpack(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# rate accounting
# ---------------------------------------------------------------------------
def bandwidth(header: StreamHeader) -> float:
    """Coded bit rate in bits per second (independent of the chunk length)."""
    b = header.bits_per_frame
    return b * header.sample_rate / header.speech_factor + b * header.sample_rate / header.ir_factor


def comparator_bandwidth(header: StreamHeader, channels: int = 2) -> float:
    """Rate of coding every channel separately at the speech frame rate."""
    return channels * header.bits_per_frame * header.sample_rate / header.speech_factor


def compression_report(header: StreamHeader, bits_per_sample_raw: int = 16) -> dict:
    coded = bandwidth(header)
    raw = 2 * header.sample_rate * bits_per_sample_raw
    stereo_comp = comparator_bandwidth(header, 2)
    mono_comp = comparator_bandwidth(header, 1)
    return {
        "coded_bps": coded,
        "raw_bps": raw,
        "bit_ratio": raw / coded,
        "comparator_bps": stereo_comp,
        "savings_vs_comparator": 1.0 - coded / stereo_comp,
        "mono_comparator_bps": mono_comp,
        "mono_comparator_bit_ratio": (raw / 2) / mono_comp,
        # mean of the two downsampling factors; kept only as a label
        "mean_factor": (header.speech_factor + header.ir_factor) / 2,
    }


def describe(header: StreamHeader) -> str:
    lines = [
        f"version        {header.version}",
        f"sample_rate    {header.sample_rate} Hz",
        f"speakers       {header.speakers}",
        f"codebooks      {header.n_q} x {header.codebook_size} ({header.bits_per_frame} bits/frame)",
        f"factors        speech {header.speech_factor}, ir {header.ir_factor}",
        f"chunk          {header.chunk_samples} samples, {header.num_chunks} chunk(s), {header.num_samples} samples total",
        f"bandwidth      {bandwidth(header):g} bps",
    ]
    return "\n".join(lines)
