"""Training objectives: spectral and time-domain metric losses, hinge GAN losses, generator total."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from . import dsp
from .autodiff import Tensor, as_tensor, ops

LOG_EPS = 1e-5


@lru_cache(maxsize=16)
def _filterbank(sample_rate: int, fft_size: int, n_mels: int) -> np.ndarray:
    fb = dsp.mel_filterbank(sample_rate, fft_size, n_mels).T.copy()
    fb.setflags(write=False)
    return fb


def _check_pair(x: Tensor, y: Tensor, name: str):
    if x.shape != y.shape:
        raise ValueError(f"{name}: shape mismatch {x.shape} vs {y.shape}")


def log_mel(x, sample_rate: int, fft_size: int, hop: int, win_length: int, n_mels: int,
            eps: float = LOG_EPS) -> Tensor:
    """``log(|STFT(x)| @ filterbank.T + eps)`` as a differentiable ``[..., frames, n_mels]`` tensor."""
    x = as_tensor(x)
    mag = ops.stft_magnitude(x, fft_size, hop, win_length)
    fb = Tensor(_filterbank(sample_rate, fft_size, n_mels).astype(x.dtype))
    return ops.log(ops.matmul(mag, fb) + eps)


def mel_loss(x, x_hat, sample_rate: int, fft_size: int = 2048, hop: int = 300, win_length: int = 1200,
             n_mels: int = 80, eps: float = LOG_EPS) -> Tensor:
    """Mean absolute difference of log-mel matrices over every channel, frame and band."""
    x, x_hat = as_tensor(x), as_tensor(x_hat)
    _check_pair(x, x_hat, "mel_loss")
    args = (sample_rate, fft_size, hop, win_length, n_mels, eps)
    return ops.l1_loss(log_mel(x_hat, *args), log_mel(x, *args))


def mag_loss(x, x_hat, fft_size: int = 2048, hop: int = 300, win_length: int = 1200,
             eps: float = LOG_EPS) -> Tensor:
    """Mean squared difference of ``log(|STFT| + eps)``."""
    x, x_hat = as_tensor(x), as_tensor(x_hat)
    _check_pair(x, x_hat, "mag_loss")

    def logmag(s):
        return ops.log(ops.stft_magnitude(s, fft_size, hop, win_length) + eps)

    return ops.mse_loss(logmag(x_hat), logmag(x))


def ir_loss(b, b_hat) -> Tensor:
    """Time-domain mean squared error over both BIR channels."""
    b, b_hat = as_tensor(b), as_tensor(b_hat)
    _check_pair(b, b_hat, "ir_loss")
    return ops.mse_loss(b_hat, b)


@dataclass
class MetricTerms:
    mel: Tensor
    mag: Tensor
    ir: Tensor

    @property
    def total(self) -> Tensor:
        return self.mel + self.mag + self.ir


def _spectral(cfg, x, x_hat) -> tuple[Tensor, Tensor]:
    mp = cfg.mel_params()
    mel = mel_loss(x, x_hat, cfg.sample_rate, mp["fft_size"], mp["hop"], mp["win_length"], mp["n_mels"], mp["eps"])
    if cfg.use_mag_loss:
        mag = mag_loss(x, x_hat, mp["fft_size"], mp["hop"], mp["win_length"], mp["eps"])
    else:
        mag = Tensor(np.zeros((), dtype=mel.dtype))
    return mel, mag


def metric_terms(cfg, binaural, cleans, birs, binaural_hat, cleans_hat, birs_hat) -> MetricTerms:
    """Spectral terms on the binaural mix and every clean signal, MSE on every BIR."""
    if not (len(cleans) == len(birs) == len(cleans_hat) == len(birs_hat) == cfg.speakers):
        raise ValueError(f"expected {cfg.speakers} speakers, got {len(cleans)} clean / {len(birs)} BIR targets "
                         f"and {len(cleans_hat)} / {len(birs_hat)} estimates")
    mel, mag = _spectral(cfg, binaural, binaural_hat)
    ir = None
    for s, s_hat, b, b_hat in zip(cleans, cleans_hat, birs, birs_hat):
        m, g = _spectral(cfg, s, s_hat)
        mel, mag = mel + m, mag + g
        term = ir_loss(b, b_hat)
        ir = term if ir is None else ir + term
    return MetricTerms(mel, mag, ir)


def metric_loss(cfg, binaural, cleans, birs, binaural_hat, cleans_hat, birs_hat) -> Tensor:
    return metric_terms(cfg, binaural, cleans, birs, binaural_hat, cleans_hat, birs_hat).total


def _hinge_mean(scores: list[Tensor], sign: float) -> Tensor:
    """Mean over sub-discriminators of ``mean(max(0, 1 + sign * score))``."""
    total = None
    for s in scores:
        term = ops.mean(ops.relu(1.0 + sign * s))
        total = term if total is None else total + term
    return total / float(len(scores))


def disc_loss(disc_b, disc_s, binaural, cleans, binaural_hat, cleans_hat) -> Tensor:
    """Hinge discriminator loss; generator outputs enter through stop-gradient."""
    if len(cleans) != len(cleans_hat):
        raise ValueError(f"{len(cleans)} clean targets vs {len(cleans_hat)} estimates")
    loss = _hinge_mean(disc_b(binaural), -1.0) + _hinge_mean(disc_b(ops.detach(as_tensor(binaural_hat))), 1.0)
    for s, s_hat in zip(cleans, cleans_hat):
        loss = loss + _hinge_mean(disc_s(s), -1.0) + _hinge_mean(disc_s(ops.detach(as_tensor(s_hat))), 1.0)
    return loss


def adv_loss(disc_b, disc_s, binaural_hat, cleans_hat) -> Tensor:
    """Generator hinge loss; discriminator parameters receive no gradient."""
    with disc_b.detached(), disc_s.detached():
        loss = _hinge_mean(disc_b(binaural_hat), -1.0)
        for s_hat in cleans_hat:
            loss = loss + _hinge_mean(disc_s(s_hat), -1.0)
    return loss


def gen_loss(metric, vq, adv=None, lambda_adv: float = 1.0, lambda_vq: float = 1.0) -> Tensor:
    """``metric + lambda_adv * adv + lambda_vq * vq``; ``adv=None`` drops the adversarial term."""
    metric, vq = as_tensor(metric), as_tensor(vq)
    total = metric + lambda_vq * vq if lambda_vq else metric
    if adv is not None and lambda_adv:
        total = total + lambda_adv * as_tensor(adv)
    return total


def _value(x) -> float:
    if x is None:
        return 0.0
    return float(x.item() if isinstance(x, Tensor) else x)


@dataclass
class LossReport:
    step: int
    mel: float
    mag: float
    ir: float
    metric_total: float
    adv: float
    disc: float
    vq: float
    generator_total: float

    @classmethod
    def from_terms(cls, step: int, terms: MetricTerms, vq, gen, adv=None, disc=None) -> "LossReport":
        mel, mag, ir = _value(terms.mel), _value(terms.mag), _value(terms.ir)
        return cls(step, mel, mag, ir, mel + mag + ir, _value(adv), _value(disc), _value(vq), _value(gen))

    def check(self) -> "LossReport":
        values = asdict(self)
        bad = [k for k, v in values.items() if not math.isfinite(v)]
        if bad:
            raise FloatingPointError(f"step {self.step}: non-finite losses {bad}")
        return self

    def to_record(self) -> dict:
        return {"step": self.step, "mel": self.mel, "mag": self.mag, "ir": self.ir, "metric": self.metric_total,
                "adv": self.adv, "disc": self.disc, "vq": self.vq, "gen": self.generator_total}

    def to_json(self) -> str:
        return json.dumps(self.to_record())

    @classmethod
    def from_json(cls, line: str) -> "LossReport":
        r = json.loads(line)
        return cls(r["step"], r["mel"], r["mag"], r["ir"], r["metric"], r["adv"], r["disc"], r["vq"], r["gen"])
