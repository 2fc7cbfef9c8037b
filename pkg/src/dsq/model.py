"""The full transcription model: three parameter groups under one module.

speech encoder (acoustics -> memory), hierarchical context encoder
(previous texts -> context memory), and the dual-attention token decoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .context_encoder import HierarchicalContextEncoder
from .decoder import TranscriptionDecoder
from .lm import ContextLm
from .module import Module
from .speech_encoder import SpeechEncoder


@dataclass
class ModelConfig:
    """Width/depth knobs; defaults are desk-scale, not production-scale."""

    feature_dim: int = 8
    d: int = 32
    heads: int = 2
    d_ffn: int = 64
    token_layers: int = 1
    utt_layers: int = 1
    speech_layers: int = 2
    dec_layers: int = 2
    lm_dec_layers: int = 2
    dropout: float = 0.1
    conv_channels: int = 8

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError("d must be divisible by heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


class AsrModel(Module):
    def __init__(self, f: int, d: int, heads: int, d_ffn: int,
                 token_layers: int, utt_layers: int, speech_layers: int,
                 dec_layers: int, vocab_size: int, rng: np.random.Generator,
                 drop: float = 0.0, conv_channels: int = 32):
        super().__init__()
        self.f = f
        self.d = d
        self.vocab_size = vocab_size
        self.ctx_enc = HierarchicalContextEncoder(
            d, heads, d_ffn, token_layers, utt_layers, vocab_size, rng, drop)
        self.speech_enc = SpeechEncoder(
            f, d, heads, d_ffn, speech_layers, rng, drop, conv_channels)
        self.decoder = TranscriptionDecoder(
            d, heads, d_ffn, dec_layers, vocab_size, rng, drop)


def build_asr_model(cfg: ModelConfig, vocab_size: int, seed: int) -> AsrModel:
    rng = np.random.default_rng([seed, 101])
    return AsrModel(cfg.feature_dim, cfg.d, cfg.heads, cfg.d_ffn,
                    cfg.token_layers, cfg.utt_layers, cfg.speech_layers,
                    cfg.dec_layers, vocab_size, rng, cfg.dropout,
                    cfg.conv_channels)


def build_lm(cfg: ModelConfig, vocab_size: int, seed: int,
             context_free: bool = False) -> ContextLm:
    rng = np.random.default_rng([seed, 103])
    return ContextLm(cfg.d, cfg.heads, cfg.d_ffn, cfg.token_layers,
                     cfg.utt_layers, cfg.lm_dec_layers, vocab_size, rng,
                     cfg.dropout, context_free)
