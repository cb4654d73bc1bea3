"""Multi-period and multi-scale hinge discriminators (HiFi-GAN layout, slimmed)."""

from __future__ import annotations

import numpy as np

from ..autodiff import Tensor, as_tensor, ops
from .layers import Conv1d
from .module import Module, ModuleList, ShapeError


class _ConvStack(Module):
    """Strided non-causal convs with leaky ReLU; the final 1-channel conv emits the score map."""

    def __init__(self, cin: int, channels, kernel: int, stride: int, rng, zero_final: bool, name: str):
        super().__init__()
        self.cin, self.name = cin, name
        convs, c = [], cin
        for i, cout in enumerate(channels):
            s = stride if i < len(channels) - 1 else 1
            convs.append(Conv1d(c, cout, kernel, rng, stride=s, causal=False, name=f"{name}.conv{i}"))
            c = cout
        self.convs = ModuleList(convs)
        self.final = Conv1d(c, 1, 3, rng, causal=False, name=f"{name}.final")
        if zero_final:
            self.final.zero_()

    def __call__(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = ops.leaky_relu(conv(x))
        return self.final(x)


class PeriodDiscriminator(Module):
    def __init__(self, cin: int, period: int, channels, rng, zero_final: bool = True):
        super().__init__()
        self.cin, self.period = cin, period
        self.stack = _ConvStack(cin, channels, 5, 3, rng, zero_final, f"mpd{period}")

    def __call__(self, x: Tensor) -> Tensor:
        b, c, length = x.shape
        p = self.period
        if length % p:
            x = ops.pad(x, (0, p - length % p))
        t = x.shape[-1] // p
        # fold the period into the batch so each phase is a separate 1-D sequence
        folded = ops.reshape(ops.transpose(ops.reshape(x, (b, c, t, p)), (0, 3, 1, 2)), (b * p, c, t))
        return ops.reshape(self.stack(folded), (b, -1))


class ScaleDiscriminator(Module):
    def __init__(self, cin: int, scale: int, channels, rng, zero_final: bool = True):
        super().__init__()
        self.cin, self.scale = cin, scale
        self.stack = _ConvStack(cin, channels, 15, 4, rng, zero_final, f"msd{scale}")

    def __call__(self, x: Tensor) -> Tensor:
        for _ in range(self.scale):
            x = ops.avg_pool1d(x, 4, 2, padding=2)
        return ops.reshape(self.stack(x), (x.shape[0], -1))


class Discriminator(Module):
    """All sub-discriminators over one signal type; returns one ``[B, N]`` score map each."""

    def __init__(self, channels_in: int, periods=(2, 3, 5, 7, 11), scales: int = 3, channels=(4, 16, 64, 128),
                 seed: int = 0, zero_final: bool = True):
        super().__init__()
        self.channels_in = channels_in
        rng = np.random.default_rng(seed)
        self.periods = ModuleList([PeriodDiscriminator(channels_in, p, channels, rng, zero_final) for p in periods])
        self.scales = ModuleList([ScaleDiscriminator(channels_in, s, channels, rng, zero_final)
                                  for s in range(scales)])

    def __len__(self) -> int:
        return len(self.periods) + len(self.scales)

    def __call__(self, x) -> list[Tensor]:
        x = as_tensor(x)
        if x.ndim != 3 or x.shape[1] != self.channels_in:
            raise ShapeError(f"discriminator expects [B, {self.channels_in}, L], got {x.shape}")
        return [d(x) for d in self.periods] + [d(x) for d in self.scales]


class Discriminators(Module):
    """``binaural`` judges 2-channel mixes, ``speech`` judges mono clean signals."""

    def __init__(self, config, zero_final: bool = True):
        super().__init__()
        kw = dict(periods=config.disc_periods, scales=config.disc_scales, channels=config.disc_channels,
                  zero_final=zero_final)
        self.binaural = Discriminator(2, seed=config.seed + 101, **kw)
        self.speech = Discriminator(1, seed=config.seed + 202, **kw)


def build_discriminators(config, dtype=np.float64, zero_final: bool = True) -> Discriminators:
    return Discriminators(config, zero_final).to(dtype)
