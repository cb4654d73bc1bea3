"""BANC network, quantizer, discriminators and configuration."""

from .codec import Decoded, decode_audio, encode_audio, split_chunks, stream_header
from .config import ConfigError, ModelConfig
from .discriminator import Discriminator, Discriminators, build_discriminators
from .module import Module, ModuleList, Sequential, ShapeError
from .network import ANALYSIS_GROUPS, SYNTHESIS_GROUPS, Banc, Codes, ModelOutput, build_model
from .quantizer import QuantizeResult, ResidualVQ, straight_through

__all__ = [
    "ANALYSIS_GROUPS",
    "Banc",
    "Codes",
    "ConfigError",
    "Discriminator",
    "Discriminators",
    "Decoded",
    "ModelConfig",
    "ModelOutput",
    "Module",
    "ModuleList",
    "QuantizeResult",
    "ResidualVQ",
    "SYNTHESIS_GROUPS",
    "Sequential",
    "ShapeError",
    "build_discriminators",
    "build_model",
    "decode_audio",
    "encode_audio",
    "split_chunks",
    "stream_header",
    "straight_through",
]
