"""Chunked encode/decode of whole recordings through a model and the bitstream."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..bitstream import StreamHeader
from .network import Banc, Codes


@dataclass
class Decoded:
    binaural: np.ndarray  # [2, N]
    cleans: np.ndarray  # [M_S, N]
    birs: np.ndarray  # [num_chunks, M_S, 2, L_bir]


def stream_header(model: Banc, num_samples: int) -> StreamHeader:
    cfg = model.config
    return StreamHeader(sample_rate=cfg.sample_rate, speakers=cfg.speakers, n_q=cfg.codebooks,
                        codebook_size=cfg.codebook_size, speech_factor=cfg.speech_factor,
                        ir_factor=cfg.ir_factor, chunk_samples=cfg.chunk_samples, num_samples=num_samples)


def split_chunks(samples: np.ndarray, chunk: int) -> np.ndarray:
    """``[2, N]`` -> ``[num_chunks, 2, chunk]``, zero-padding the tail."""
    samples = np.asarray(samples)
    if samples.ndim != 2 or samples.shape[0] != 2:
        raise ValueError(f"expected binaural samples [2, N], got {samples.shape}")
    n = samples.shape[1]
    if n == 0:
        raise ValueError("empty recording")
    count = -(-n // chunk)
    padded = np.zeros((2, count * chunk), dtype=samples.dtype)
    padded[:, :n] = samples
    return padded.reshape(2, count, chunk).transpose(1, 0, 2)


def encode_audio(model: Banc, samples: np.ndarray):
    """Returns ``(header, chunks)`` ready for ``bitstream.pack``."""
    header = stream_header(model, np.asarray(samples).shape[-1])
    batch = split_chunks(samples, header.chunk_samples).astype(model.dtype)
    codes = model.encode_codes(batch)
    return header, [(codes.speech[i], codes.ir[i]) for i in range(batch.shape[0])]


def decode_audio(model: Banc, header: StreamHeader, chunks) -> Decoded:
    cfg = model.config
    if (header.speech_factor, header.ir_factor, header.chunk_samples) != (cfg.speech_factor, cfg.ir_factor,
                                                                          cfg.chunk_samples):
        raise ValueError("stream framing does not match the model configuration")
    if header.speakers != cfg.speakers:
        raise ValueError(f"stream has {header.speakers} speakers, model decodes {cfg.speakers}")
    if header.codebook_size != cfg.codebook_size or header.n_q > cfg.codebooks:
        raise ValueError("stream codebooks do not match the model")
    codes = Codes(np.stack([s for s, _ in chunks]), np.stack([i for _, i in chunks]))
    binaural, cleans, birs = model.decode_codes(codes)
    n = header.num_samples

    def flatten(t):
        return t.data.transpose(1, 0, 2).reshape(t.shape[1], -1)[:, :n]

    return Decoded(
        binaural=flatten(binaural),
        cleans=np.concatenate([flatten(c) for c in cleans]),
        birs=np.stack([b.data for b in birs], axis=1),
    )
