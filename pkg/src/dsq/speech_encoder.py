"""Acoustic encoder: conv subsampling front-end + transformer blocks.

An utterance's feature matrix (f, M) becomes a memory (d, M') with
M' = ceil(ceil(M / 2) / 2) (two 2x-pooling stages). Encoding is strictly
per-utterance; the padded batch path reproduces single-utterance results at
valid positions by masking between stages (zeros where convolution padding
would be, NEG_INF where the ceil-mode pool padding would be) and key-masking
the attention.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from . import tensor as T
from .blocks import ConvSubsampler, EncoderBlock, add_positions, padding_mask
from .module import Module


def subsampled_length(m: int) -> int:
    m2 = -(-m // 2)
    return -(-m2 // 2)


@dataclass
class FeatureStats:
    mean: np.ndarray   # (f,)
    std: np.ndarray    # (f,), floored away from zero


def compute_feature_stats(mats: Sequence[np.ndarray], eps: float = 1e-8) -> FeatureStats:
    """Per-dimension mean/std over all frames of the given (f, M) matrices."""
    cat = np.concatenate(list(mats), axis=1)
    return FeatureStats(mean=cat.mean(axis=1),
                        std=np.maximum(cat.std(axis=1), eps))


def normalize_features(x: np.ndarray, stats: FeatureStats) -> np.ndarray:
    return (x - stats.mean[:, None]) / stats.std[:, None]


def denormalize_features(x: np.ndarray, stats: FeatureStats) -> np.ndarray:
    return x * stats.std[:, None] + stats.mean[:, None]


def add_deltas(x: np.ndarray, window: int = 2) -> np.ndarray:
    """Stack (f, M) features with their delta and acceleration rows (3f, M).

    Regression over +/- window frames with edge frames repeated.
    """

    def delta(m):
        denom = 2.0 * sum(n * n for n in range(1, window + 1))
        padded = np.pad(m, [(0, 0), (window, window)], mode="edge")
        out = np.zeros_like(m)
        for n in range(1, window + 1):
            out += n * (padded[:, window + n:padded.shape[1] - window + n]
                        - padded[:, window - n:-window - n])
        return out / denom

    d1 = delta(x)
    d2 = delta(d1)
    return np.concatenate([x, d1, d2], axis=0)


def _mask_time(h: T.Tensor, valid: np.ndarray, fill: float) -> T.Tensor:
    # h: (B, C, F, Mk); valid: (B, Mk) bool. Invalid columns become `fill`.
    m = valid[:, None, None, :].astype(h.data.dtype)
    out = h * T.Tensor(m)
    if fill != 0.0:
        out = out + T.Tensor((1.0 - m) * fill)
    return out


class SpeechEncoder(Module):
    def __init__(self, f: int, d: int, heads: int, d_ffn: int, layers: int,
                 rng: np.random.Generator, drop: float = 0.0, channels: int = 32):
        super().__init__()
        self.f = f
        self.d = d
        self.sub = ConvSubsampler(f, d, rng, channels)
        self.blocks = [EncoderBlock(d, heads, d_ffn, rng, drop)
                       for _ in range(layers)]

    def __call__(self, feats) -> T.Tensor:
        """(f, M) features -> (d, M') memory."""
        data = feats.data if isinstance(feats, T.Tensor) else np.asarray(feats)
        if data.ndim != 2 or data.shape[0] != self.f:
            raise T.ShapeError(f"expected ({self.f}, M) features, got {data.shape}")
        if data.shape[1] < 4:
            raise ValueError("utterance too short: need at least 4 frames")
        x = feats if isinstance(feats, T.Tensor) else T.Tensor(data)
        h = self.sub(T.reshape(x, (1,) + data.shape))
        h = add_positions(h)
        for blk in self.blocks:
            h = blk(h)
        return h

    def encode_batch(self, feats_list: Sequence[np.ndarray]) -> List[T.Tensor]:
        """Pad, encode together, return per-item (d, M'_i) slices.

        Matches per-utterance encoding at every valid position: padded time
        columns are zeroed before each convolution (its own padding value)
        and pushed to NEG_INF before each ceil-mode pool, and padded keys are
        masked out of the attention.
        """
        B = len(feats_list)
        ms = [m.shape[1] for m in feats_list]
        for m in ms:
            if m < 4:
                raise ValueError("utterance too short: need at least 4 frames")
        mmax = max(ms)
        x = np.zeros((B, 1, self.f, mmax))
        valid0 = np.zeros((B, mmax), dtype=bool)
        for i, feats in enumerate(feats_list):
            x[i, 0, :, :ms[i]] = feats
            valid0[i, :ms[i]] = True

        def ceil_valid(valid):
            n = valid.shape[1]
            half = -(-n // 2)
            lens = valid.sum(axis=1)
            out = np.arange(half)[None, :] < (-(-lens // 2))[:, None]
            return out

        h = self.sub.stage1(T.Tensor(x))
        h = _mask_time(h, valid0, T.NEG_INF)
        h = T.maxpool2x2(h)
        valid1 = ceil_valid(valid0)
        h = _mask_time(h, valid1, 0.0)
        h = self.sub.stage2(h)
        h = _mask_time(h, valid1, T.NEG_INF)
        h = T.maxpool2x2(h)
        valid2 = ceil_valid(valid1)
        h = _mask_time(h, valid2, 0.0)
        z = self.sub.flatten_project(h)                 # (B, d, M4max)
        z = add_positions(z)
        mask = padding_mask(valid2, z.data.shape[-1])
        for blk in self.blocks:
            z = blk(z, mask)
        return [z[i, :, :subsampled_length(ms[i])] for i in range(B)]
