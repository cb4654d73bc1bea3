"""The BANC generator: shared encoder front, two analysis paths, two synthesis paths."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import dsp
from ..autodiff import Tensor, as_tensor, ops
from .config import ModelConfig
from .layers import Activation, BatchNorm1d, Conv1d, DecoderBlock, EncoderBlock
from .module import Module, ModuleList, Sequential, ShapeError
from .quantizer import ResidualVQ

ANALYSIS_GROUPS = ("common_encoder", "speech_encoder", "ir_encoder", "speech_projector", "ir_projector",
                   "speech_quantizer", "ir_quantizer")
SYNTHESIS_GROUPS = ("speech_head", "mask_heads", "speech_decoders", "ir_decoders")


@dataclass
class Codes:
    speech: np.ndarray  # [B, T_s, n_q]
    ir: np.ndarray  # [B, T_ir, n_q]


@dataclass
class ModelOutput:
    binaural: Tensor  # [B, 2, L]
    cleans: list[Tensor]  # M_S x [B, 1, L]
    birs: list[Tensor]  # M_S x [B, 2, L_bir]
    vq_loss: Tensor
    codes: Codes
    masks: list[Tensor]


def _speech_encoder(cfg: ModelConfig, rng) -> Sequential:
    ch = cfg.base_channels
    layers = Sequential([Conv1d(2, ch, cfg.head_kernel, rng, name="speech_encoder.head")])
    for i, s in enumerate(cfg.speech_strides):
        layers.append(EncoderBlock(ch, s, cfg.dilations, cfg.ru_kernel, rng, name=f"speech_encoder.block{i}"))
        ch *= 2
    return layers


def _ir_encoder(cfg: ModelConfig, rng) -> Sequential:
    layers = Sequential()
    cin = 2
    for i, (k, s, c) in enumerate(zip(cfg.ir_kernels, cfg.ir_strides, cfg.ir_channels)):
        layers.append(Conv1d(cin, c, k, rng, stride=s, name=f"ir_encoder.conv{i}"))
        if i > 0:
            layers.append(BatchNorm1d(c, name=f"ir_encoder.bn{i}"))
        layers.append(Activation("leaky_relu"))
        cin = c
    return layers


def _decoder_stack(cfg: ModelConfig, strides, out_channels: int, rng, name: str) -> Sequential:
    ch = cfg.decoder_channels
    layers = Sequential()
    for i, s in enumerate(strides):
        layers.append(DecoderBlock(ch, s, cfg.dilations, cfg.ru_kernel, rng, name=f"{name}.block{i}"))
        ch //= 2
    layers.append(Activation("elu"))
    layers.append(Conv1d(ch, out_channels, cfg.head_kernel, rng, name=f"{name}.tail"))
    return layers


class IrDecoder(Module):
    """Head conv on the IR code followed by the upsampling stack."""

    def __init__(self, cfg: ModelConfig, rng, name: str):
        super().__init__()
        self.head = Conv1d(cfg.code_dim, cfg.decoder_channels, cfg.head_kernel, rng, name=f"{name}.head")
        self.stack = _decoder_stack(cfg, cfg.ir_decoder_strides, 2, rng, name)

    def __call__(self, code: Tensor) -> Tensor:
        return self.stack(self.head(code))

    def infer_shape(self, shape):
        return self.stack.infer_shape(self.head.infer_shape(shape))


class Banc(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        latent = cfg.latent_channels
        self.common_encoder = Conv1d(2, 2, cfg.common_kernel, rng, name="common_encoder")
        self.speech_encoder = _speech_encoder(cfg, rng)
        self.ir_encoder = _ir_encoder(cfg, rng)
        self.speech_projector = Conv1d(latent, cfg.code_dim, 1, rng, name="speech_projector")
        self.ir_projector = Conv1d(cfg.ir_channels[-1], cfg.code_dim, 1, rng, name="ir_projector")
        self.speech_quantizer = ResidualVQ(cfg.code_dim, cfg.codebooks, cfg.codebook_size, rng=rng,
                                           decay=cfg.ema_decay, eps=cfg.ema_eps, seed=cfg.seed,
                                           name="speech_quantizer")
        self.ir_quantizer = ResidualVQ(cfg.code_dim, cfg.codebooks, cfg.codebook_size, rng=rng,
                                       decay=cfg.ema_decay, eps=cfg.ema_eps, seed=cfg.seed + 1,
                                       name="ir_quantizer")
        self.speech_head = Conv1d(cfg.code_dim, cfg.decoder_channels, cfg.head_kernel, rng, name="speech_head")
        self.mask_heads = ModuleList(
            [Conv1d(cfg.decoder_channels, cfg.decoder_channels, 1, rng, name=f"mask_head{i}")
             for i in range(cfg.speakers)] if cfg.speakers > 1 else [])
        self.speech_decoders = ModuleList(
            [_decoder_stack(cfg, cfg.speech_decoder_strides, 1, rng, f"speech_decoder{i}")
             for i in range(cfg.speakers)])
        self.ir_decoders = ModuleList([IrDecoder(cfg, rng, f"ir_decoder{i}") for i in range(cfg.speakers)])
        self.receptive_margin = self.dry_run()

    @property
    def speakers(self) -> int:
        return self.config.speakers

    # -- shape algebra ----------------------------------------------------------
    def dry_run(self, batch: int = 1) -> int:
        """Propagate shapes through every layer; returns the causal margin in samples."""
        cfg = self.config
        shape = (batch, 2, cfg.chunk_samples)
        try:
            front = self.common_encoder.infer_shape(shape)
            zs = self.speech_encoder.infer_shape(front)
            zi = self.ir_encoder.infer_shape(front)
            cs = self.speech_projector.infer_shape(zs)
            ci = self.ir_projector.infer_shape(zi)
            c = self.speech_head.infer_shape(cs)
            for m in self.mask_heads:
                if m.infer_shape(c) != c:
                    raise ShapeError("mask head must preserve the latent shape")
            speech = [d.infer_shape(c) for d in self.speech_decoders]
            birs = [d.infer_shape(ci) for d in self.ir_decoders]
        except ShapeError as exc:
            raise ShapeError(f"dry run failed: {exc}") from None
        expect = {
            "speech latent": (zs, (batch, cfg.latent_channels, cfg.speech_frames)),
            "IR latent": (zi, (batch, cfg.ir_channels[-1], cfg.ir_frames)),
        }
        for i, (s, b) in enumerate(zip(speech, birs)):
            expect[f"speech decoder {i}"] = (s, (batch, 1, cfg.chunk_samples))
            expect[f"IR decoder {i}"] = (b, (batch, 2, cfg.bir_samples))
        for what, (got, want) in expect.items():
            if tuple(got) != want:
                raise ShapeError(f"dry run failed: {what} has shape {got}, expected {want}")
        return cfg.speech_factor - 1

    # -- analysis ---------------------------------------------------------------
    def _check_input(self, x: Tensor):
        if x.ndim != 3 or x.shape[1] != 2:
            raise ShapeError(f"expected binaural input [B, 2, L], got {x.shape}")
        if x.shape[-1] % self.config.ir_factor or x.shape[-1] % self.config.speech_factor:
            raise ShapeError(f"length {x.shape[-1]} not divisible by the downsampling factors")

    def encode(self, x: Tensor) -> tuple[Tensor, Tensor]:
        x = as_tensor(x)
        self._check_input(x)
        front = self.common_encoder(x)
        return self.speech_encoder(front), self.ir_encoder(front)

    def project(self, z_speech: Tensor, z_ir: Tensor) -> tuple[Tensor, Tensor]:
        return self.speech_projector(z_speech), self.ir_projector(z_ir)

    def quantize(self, p_speech: Tensor, p_ir: Tensor, n_q: int | None = None):
        return self.speech_quantizer(p_speech, n_q), self.ir_quantizer(p_ir, n_q)

    def set_bypass(self, flag: bool) -> None:
        """Skip quantization (identity) so the whole graph is smooth for finite differences."""
        self.speech_quantizer.bypass = flag
        self.ir_quantizer.bypass = flag

    # -- synthesis ----------------------------------------------------------------
    def masks(self, c: Tensor) -> list[Tensor]:
        return [ops.sigmoid(h(c)) for h in self.mask_heads]

    def decode_speech(self, code: Tensor, masks: list | None = None, return_masks: bool = False):
        c = self.speech_head(code)
        if self.speakers == 1:
            if masks is not None:
                raise ValueError("single-speaker model takes no masks")
            outs, ms = [self.speech_decoders[0](c)], []
        else:
            ms = self.masks(c) if masks is None else [m if isinstance(m, Tensor) else Tensor(m) for m in masks]
            if len(ms) != self.speakers:
                raise ValueError(f"need {self.speakers} masks, got {len(ms)}")
            outs = [dec(c * m) for dec, m in zip(self.speech_decoders, ms)]
        return (outs, ms) if return_masks else outs

    def decode_ir(self, code: Tensor) -> list[Tensor]:
        return [dec(code) for dec in self.ir_decoders]

    @staticmethod
    def reconstruct(cleans: list[Tensor], birs: list[Tensor]) -> Tensor:
        if len(cleans) != len(birs) or not cleans:
            raise ValueError(f"{len(cleans)} clean signals vs {len(birs)} BIRs")
        out = None
        for c, b in zip(cleans, birs):
            term = ops.fft_convolve(c, b)
            out = term if out is None else out + term
        return out

    @staticmethod
    def reconstruct_buffers(cleans: list[dsp.AudioBuffer], birs: list[dsp.Bir]) -> dsp.AudioBuffer:
        if len(cleans) != len(birs) or not cleans:
            raise ValueError(f"{len(cleans)} clean signals vs {len(birs)} BIRs")
        if len(cleans) == 1:
            return dsp.render_binaural(cleans[0], birs[0])
        return dsp.mix_overlapped(list(zip(cleans, birs)))

    # -- end to end ---------------------------------------------------------------
    def __call__(self, x, n_q: int | None = None) -> ModelOutput:
        x = x if isinstance(x, Tensor) else Tensor(x)
        zs, zi = self.encode(x)
        ps, pi = self.project(zs, zi)
        qs, qi = self.quantize(ps, pi, n_q)
        cleans, masks = self.decode_speech(qs.quantized, return_masks=True)
        birs = self.decode_ir(qi.quantized)
        binaural = self.reconstruct(cleans, birs)
        return ModelOutput(binaural, cleans, birs, qs.commit_loss + qi.commit_loss, Codes(qs.indices, qi.indices),
                           masks)

    def encode_codes(self, x) -> Codes:
        from ..autodiff import no_grad

        with no_grad():
            x = x if isinstance(x, Tensor) else Tensor(x, dtype=self.dtype)
            zs, zi = self.encode(x)
            ps, pi = self.project(zs, zi)
            qs, qi = self.quantize(ps, pi)
        return Codes(qs.indices, qi.indices)

    def decode_codes(self, codes: Codes):
        from ..autodiff import no_grad

        with no_grad():
            cs = self.speech_quantizer.dequantize(codes.speech)
            ci = self.ir_quantizer.dequantize(codes.ir)
            cleans = self.decode_speech(cs)
            birs = self.decode_ir(ci)
            binaural = self.reconstruct(cleans, birs)
        return binaural, cleans, birs

    # -- parameter groups -----------------------------------------------------------
    def group(self, name: str) -> Module:
        if name not in ANALYSIS_GROUPS + SYNTHESIS_GROUPS:
            raise KeyError(f"unknown parameter group {name!r}")
        return getattr(self, name)

    def groups(self) -> dict[str, Module]:
        return {name: getattr(self, name) for name in ANALYSIS_GROUPS + SYNTHESIS_GROUPS}


def build_model(config: ModelConfig, dtype=np.float64) -> Banc:
    return Banc(config).to(dtype)
