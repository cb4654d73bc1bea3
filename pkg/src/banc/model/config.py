"""Model hyperparameters and the named profiles."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path


class ConfigError(ValueError):
    pass


def _prod(xs) -> int:
    return math.prod(int(x) for x in xs)


@dataclass(frozen=True)
class ModelConfig:
    sample_rate: int = 48000
    chunk_seconds: float = 2.0
    bir_seconds: float = 1.0
    speakers: int = 1
    speech_strides: tuple[int, ...] = (2, 2, 3, 5, 5)
    ir_strides: tuple[int, ...] = (1500, 2, 2)
    speech_decoder_strides: tuple[int, ...] = (5, 5, 3, 2, 2)
    ir_decoder_strides: tuple[int, ...] = (5, 5, 5, 4, 3, 2)
    base_channels: int = 16
    ir_channels: tuple[int, ...] = (128, 256, 512)
    ir_kernels: tuple[int, ...] = (96001, 41, 41)
    decoder_channels: int = 512
    code_dim: int = 64
    codebooks: int = 8
    codebook_size: int = 1024
    scale: float = 1.0
    dilations: tuple[int, ...] = (1, 3, 9)
    common_kernel: int = 3
    head_kernel: int = 7
    ru_kernel: int = 7
    use_mag_loss: bool = True
    lambda_adv: float = 1.0
    lambda_vq: float = 1.0
    ema_decay: float = 0.99
    ema_eps: float = 1e-5
    fft_size: int = 2048
    hop: int = 300
    win_length: int = 1200
    n_mels: int = 80
    log_eps: float = 1e-5
    disc_periods: tuple[int, ...] = (2, 3, 5, 7, 11)
    disc_scales: int = 3
    disc_channels: tuple[int, ...] = (4, 16, 64, 128)
    seed: int = 0

    # -- profiles -------------------------------------------------------------
    @classmethod
    def reference(cls, **overrides) -> "ModelConfig":
        return replace(cls(), **overrides)

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """Reference strides and factors at 6 kHz with channels divided by 4."""
        sr = 6000
        cfg = cls(
            sample_rate=sr,
            base_channels=4,
            ir_channels=(32, 64, 128),
            ir_kernels=(2 * sr + 1, 41, 41),
            decoder_channels=128,
            code_dim=16,
            codebooks=4,
            codebook_size=256,
            scale=0.25,
            fft_size=256,
            hop=75,
            win_length=150,
            n_mels=40,
        )
        return replace(cfg, **overrides)

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        """Tiny network for finite-difference checks: 48-sample chunks at 24 Hz."""
        cfg = cls(
            sample_rate=24,
            speech_strides=(2, 3),
            ir_strides=(6, 2, 2),
            speech_decoder_strides=(3, 2),
            ir_decoder_strides=(3, 2, 2),
            base_channels=2,
            ir_channels=(3, 4, 4),
            ir_kernels=(49, 3, 3),
            decoder_channels=8,
            code_dim=3,
            codebooks=2,
            codebook_size=4,
            scale=0.0,
            dilations=(1, 3),
            ru_kernel=3,
            head_kernel=3,
            fft_size=16,
            hop=4,
            win_length=12,
            n_mels=4,
            disc_periods=(2, 3),
            disc_scales=2,
            disc_channels=(2, 3),
        )
        return replace(cfg, **overrides)

    @classmethod
    def profile(cls, name: str, **overrides) -> "ModelConfig":
        makers = {"reference": cls.reference, "desk": cls.desk, "toy": cls.toy}
        if name not in makers:
            raise ConfigError(f"unknown profile {name!r}; choose from {sorted(makers)}")
        return makers[name](**overrides)

    # -- derived quantities ---------------------------------------------------
    @property
    def chunk_samples(self) -> int:
        return int(round(self.chunk_seconds * self.sample_rate))

    @property
    def bir_samples(self) -> int:
        return int(round(self.bir_seconds * self.sample_rate))

    @property
    def speech_factor(self) -> int:
        return _prod(self.speech_strides)

    @property
    def ir_factor(self) -> int:
        return _prod(self.ir_strides)

    @property
    def speech_frames(self) -> int:
        return self.chunk_samples // self.speech_factor

    @property
    def ir_frames(self) -> int:
        return self.chunk_samples // self.ir_factor

    @property
    def latent_channels(self) -> int:
        return self.base_channels * 2 ** len(self.speech_strides)

    @property
    def bits_per_frame(self) -> int:
        return self.codebooks * int(math.log2(self.codebook_size))

    def speech_channel_ladder(self) -> list[int]:
        return [self.base_channels * 2**i for i in range(len(self.speech_strides) + 1)]

    def mel_params(self) -> dict:
        return dict(fft_size=self.fft_size, hop=self.hop, win_length=self.win_length, n_mels=self.n_mels,
                    eps=self.log_eps)

    # -- validation -------------------------------------------------------------
    def validate(self) -> "ModelConfig":
        if self.speakers not in (1, 2):
            raise ConfigError(f"speakers must be 1 or 2, got {self.speakers}")
        n = self.chunk_samples
        if abs(self.chunk_seconds * self.sample_rate - n) > 1e-9:
            raise ConfigError("chunk_seconds * sample_rate must be an integer")
        if self.speech_decoder_strides and _prod(self.speech_decoder_strides) != self.speech_factor:
            raise ConfigError(
                f"speech decoder strides {self.speech_decoder_strides} multiply to "
                f"{_prod(self.speech_decoder_strides)}, encoder factor is {self.speech_factor}")
        for name, factor in (("speech", self.speech_factor), ("ir", self.ir_factor)):
            if n % factor:
                raise ConfigError(f"chunk of {n} samples not divisible by {name} factor {factor}")
        if self.ir_frames * _prod(self.ir_decoder_strides) != self.bir_samples:
            raise ConfigError(
                f"IR decoder yields {self.ir_frames * _prod(self.ir_decoder_strides)} samples, "
                f"BIR length is {self.bir_samples}")
        if len(self.ir_kernels) != len(self.ir_strides) or len(self.ir_channels) != len(self.ir_strides):
            raise ConfigError("ir_kernels, ir_channels and ir_strides must have equal length")
        if self.codebook_size < 2 or self.codebook_size & (self.codebook_size - 1):
            raise ConfigError(f"codebook_size must be a power of two, got {self.codebook_size}")
        if self.decoder_channels % 2 ** max(len(self.speech_decoder_strides), len(self.ir_decoder_strides)):
            raise ConfigError("decoder_channels must stay integral after halving in every decoder block")
        if self.fft_size & (self.fft_size - 1) or self.win_length > self.fft_size:
            raise ConfigError("fft_size must be a power of two no smaller than win_length")
        if self.fft_size > n or self.fft_size > self.bir_samples:
            raise ConfigError("fft_size exceeds the signal length")
        return self

    # -- serialization --------------------------------------------------------
    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_json(Path(path).read_text())

    def with_overrides(self, pairs: dict[str, str]) -> "ModelConfig":
        """Apply ``key=value`` strings, parsed as JSON where possible."""
        known = {f.name for f in fields(self)}
        kw = {}
        for key, raw in pairs.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                val = json.loads(raw)
            except json.JSONDecodeError:
                val = raw
            kw[key] = tuple(val) if isinstance(val, list) else val
        return replace(self, **kw)
