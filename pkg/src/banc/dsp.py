"""Signal-processing primitives: WAV I/O, convolution, binaural rendering, STFT and mel features."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.io import wavfile

logger = logging.getLogger(__name__)

FFT_THRESHOLD = 64  # kernels longer than this go through the FFT path

MEL_DEFAULTS = dict(fft_size=2048, hop=300, win_length=1200, n_mels=80, fmin=0.0, fmax=None, eps=1e-5)


class WavError(ValueError):
    pass


@dataclass
class AudioBuffer:
    """Sampled waveform, ``samples`` shaped ``[channels, n]``."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim == 1:
            s = s[None, :]
        if s.ndim != 2 or s.shape[0] not in (1, 2):
            raise ValueError(f"AudioBuffer needs 1 or 2 channels, got shape {s.shape}")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(s)):
            raise ValueError("AudioBuffer samples must be finite")
        self.samples = s
        self.sample_rate = int(self.sample_rate)

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.num_samples / self.sample_rate

    def channel(self, i: int) -> np.ndarray:
        return self.samples[i]


@dataclass
class Bir:
    """Two-channel impulse response."""

    left: np.ndarray
    right: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.left = np.asarray(self.left, dtype=np.float64)
        self.right = np.asarray(self.right, dtype=np.float64)
        if self.left.shape != self.right.shape or self.left.ndim != 1:
            raise ValueError(f"BIR channels must be equal-length vectors, got {self.left.shape} / {self.right.shape}")
        if not (np.all(np.isfinite(self.left)) and np.all(np.isfinite(self.right))):
            raise ValueError("BIR values must be finite")
        if not (np.any(self.left) or np.any(self.right)):
            raise ValueError("BIR has zero energy")
        self.sample_rate = int(self.sample_rate)

    @classmethod
    def from_array(cls, data: np.ndarray, sample_rate: int) -> "Bir":
        data = np.asarray(data)
        return cls(data[0], data[1], sample_rate)

    @property
    def data(self) -> np.ndarray:
        return np.stack([self.left, self.right])

    def __len__(self) -> int:
        return len(self.left)

    def to_buffer(self) -> AudioBuffer:
        return AudioBuffer(self.data, self.sample_rate)


@dataclass
class Spectrogram:
    values: np.ndarray  # [..., frames, bins] complex
    fft_size: int
    hop: int
    win_length: int

    @property
    def frames(self) -> int:
        return self.values.shape[-2]

    @property
    def bins(self) -> int:
        return self.values.shape[-1]


@dataclass
class MelMatrix:
    values: np.ndarray  # [..., frames, n_mels], log-compressed
    n_mels: int
    fmin: float
    fmax: float
    params: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# WAV
# ---------------------------------------------------------------------------
def wav_read(path: str | os.PathLike) -> AudioBuffer:
    """Read 16-bit PCM or 32-bit float WAV; PCM sample ``s`` maps to ``s / 32768``."""
    try:
        rate, data = wavfile.read(os.fspath(path))
    except FileNotFoundError:
        raise
    except (ValueError, EOFError) as exc:
        raise WavError(f"{path}: malformed WAV ({exc})") from exc
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise WavError(f"{path}: unsupported encoding {data.dtype}; need 16-bit PCM or 32-bit float")
    if samples.ndim == 1:
        samples = samples[:, None]
    if samples.shape[1] > 2:
        raise WavError(f"{path}: unsupported channel count {samples.shape[1]}")
    return AudioBuffer(samples.T, rate)


def wav_write(path: str | os.PathLike, buf: AudioBuffer, encoding: str = "float32") -> None:
    """Write ``buf`` as IEEE float32 (default) or ``pcm16``; out-of-range values are clipped."""
    data = buf.samples
    if np.any(np.abs(data) > 1.0):
        logger.warning("%s: %d samples outside [-1, 1] clipped", path, int(np.sum(np.abs(data) > 1.0)))
        data = np.clip(data, -1.0, 1.0)
    if encoding == "float32":
        out = data.T.astype(np.float32)
    elif encoding == "pcm16":
        out = np.clip(np.round(data.T * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    if out.shape[1] == 1:
        out = out[:, 0]
    wavfile.write(os.fspath(path), buf.sample_rate, np.ascontiguousarray(out))


# ---------------------------------------------------------------------------
# convolution and binaural rendering
# ---------------------------------------------------------------------------
def _direct_full(signal: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    return np.convolve(signal, kernel)


def _fft_full(signal: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    from scipy.fft import next_fast_len

    n = len(signal) + len(kernel) - 1
    nfft = next_fast_len(n, real=True)
    return np.fft.irfft(np.fft.rfft(signal, nfft) * np.fft.rfft(kernel, nfft), nfft)[:n]


def convolve(signal, kernel, method: str = "auto") -> np.ndarray:
    """Linear convolution truncated to ``len(signal)`` (causal alignment).

    ``method`` is ``"direct"``, ``"fft"`` or ``"auto"`` (FFT above 64 taps).
    """
    signal = np.asarray(signal, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if signal.size == 0 or kernel.size == 0:
        raise ValueError("convolve needs nonempty signal and kernel")
    if method == "auto":
        method = "fft" if len(kernel) > FFT_THRESHOLD else "direct"
    if method == "direct":
        full = _direct_full(signal, kernel)
    elif method == "fft":
        full = _fft_full(signal, kernel)
    else:
        raise ValueError(f"unknown method {method!r}")
    return full[: len(signal)]


def render_binaural(clean: AudioBuffer, bir: Bir) -> AudioBuffer:
    """Spatialize mono ``clean`` through both BIR channels."""
    if clean.sample_rate != bir.sample_rate:
        raise ValueError(f"sample-rate mismatch: clean {clean.sample_rate} Hz, BIR {bir.sample_rate} Hz")
    if clean.channels != 1:
        raise ValueError("render_binaural expects a mono clean signal")
    x = clean.samples[0]
    return AudioBuffer(np.stack([convolve(x, bir.left), convolve(x, bir.right)]), clean.sample_rate)


def mix_overlapped(sources: list[tuple[AudioBuffer, Bir]]) -> AudioBuffer:
    """Sum of ``render_binaural`` over sources.

    Rendered terms are added in a canonical order (sorted by content) so the
    result is bit-identical for any ordering of ``sources``.
    """
    if not sources:
        raise ValueError("mix_overlapped needs at least one source")
    rate = sources[0][0].sample_rate
    length = sources[0][0].num_samples
    for clean, _ in sources:
        if clean.sample_rate != rate:
            raise ValueError("all sources must share one sample rate")
        if clean.num_samples != length:
            raise ValueError("all sources must have equal length")
    rendered = [render_binaural(c, b).samples for c, b in sources]
    rendered.sort(key=lambda r: r.tobytes())
    total = np.zeros_like(rendered[0])
    for r in rendered:
        total = total + r
    return AudioBuffer(total, rate)


# ---------------------------------------------------------------------------
# spectral features
# ---------------------------------------------------------------------------
def hann_window(win_length: int, fft_size: int, dtype=np.float64) -> np.ndarray:
    """Periodic Hann window of ``win_length`` centred in an ``fft_size`` frame."""
    if win_length > fft_size:
        raise ValueError(f"window {win_length} longer than fft size {fft_size}")
    n = np.arange(win_length)
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / win_length)
    left = (fft_size - win_length) // 2
    out = np.zeros(fft_size)
    out[left : left + win_length] = w
    return out.astype(dtype)


def _check_stft_args(length: int, fft_size: int, hop: int):
    if hop <= 0:
        raise ValueError(f"hop must be positive, got {hop}")
    if fft_size <= 0 or fft_size & (fft_size - 1):
        raise ValueError(f"fft_size must be a power of two, got {fft_size}")
    if length < fft_size:
        raise ValueError(f"signal length {length} shorter than fft size {fft_size}")


def stft(signal, fft_size: int = 2048, hop: int = 300, win_length: int | None = None) -> Spectrogram:
    """One-sided STFT of the last axis; frames start at sample 0, no centre padding."""
    x = np.asarray(signal, dtype=np.float64)
    win_length = fft_size if win_length is None else win_length
    _check_stft_args(x.shape[-1], fft_size, hop)
    window = hann_window(win_length, fft_size)
    n_frames = (x.shape[-1] - fft_size) // hop + 1
    frames = sliding_window_view(x, fft_size, axis=-1)[..., ::hop, :][..., :n_frames, :]
    return Spectrogram(np.fft.rfft(frames * window, axis=-1), fft_size, hop, win_length)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, fft_size: int, n_mels: int = 80, fmin: float = 0.0,
                   fmax: float | None = None) -> np.ndarray:
    """Triangular filters with unit peak on the HTK mel scale, shape ``[n_mels, bins]``."""
    fmax = sample_rate / 2.0 if fmax is None else fmax
    bins = fft_size // 2 + 1
    freqs = np.arange(bins) * sample_rate / fft_size
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (centre - lower)
    falling = (upper - freqs[None, :]) / (upper - centre)
    return np.maximum(0.0, np.minimum(rising, falling))


def mel_spectrogram(signal, sample_rate: int, fft_size: int = 2048, hop: int = 300,
                    win_length: int = 1200, n_mels: int = 80, fmin: float = 0.0,
                    fmax: float | None = None, eps: float = 1e-5) -> MelMatrix:
    """``log(|STFT| @ filterbank.T + eps)``, shape ``[..., frames, n_mels]``."""
    spec = stft(signal, fft_size, hop, win_length)
    fb = mel_filterbank(sample_rate, fft_size, n_mels, fmin, fmax)
    mel = np.abs(spec.values) @ fb.T
    fmax = sample_rate / 2.0 if fmax is None else fmax
    return MelMatrix(np.log(mel + eps), n_mels, fmin, fmax,
                     dict(fft_size=fft_size, hop=hop, win_length=win_length, eps=eps))
