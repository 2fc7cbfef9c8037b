"""Transformer building blocks on feature-first (d, N) sequences.

Residual blocks are post-norm: sublayer output is dropped out, added to the
input, then layer-normalized. Attention masks are additive float arrays whose
blocked entries hold NEG_INF (-1e30), which underflows to exactly zero weight
after softmax while keeping every intermediate finite.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from . import tensor as T
from .module import Dropout, LayerNorm, Linear, Module, Parameter


def sinusoidal_positions(d: int, n: int, offset: int = 0) -> np.ndarray:
    """(d, n) table; column p encodes absolute position offset + p.

    Even rows sin(pos / 10000^(2i/d)), odd rows cos of the same argument.
    """
    pos = np.arange(offset, offset + n, dtype=np.float64)[None, :]
    i = np.arange(0, d, 2, dtype=np.float64)[:, None]
    angles = pos / np.power(10000.0, i / d)
    pe = np.zeros((d, n), dtype=np.float64)
    pe[0::2, :] = np.sin(angles)
    pe[1::2, :] = np.cos(angles[: d // 2, :])
    return pe


def add_positions(x: T.Tensor, offset: int = 0) -> T.Tensor:
    d, n = x.data.shape[-2], x.data.shape[-1]
    pe = sinusoidal_positions(d, n, offset).astype(x.data.dtype)
    return x + T.Tensor(pe)


def causal_mask(n: int) -> np.ndarray:
    """(n, n) additive mask letting position q attend to keys k <= q."""
    m = np.zeros((n, n))
    m[np.triu_indices(n, k=1)] = T.NEG_INF
    return m


def padding_mask(valid: np.ndarray, q_len: int) -> np.ndarray:
    """(B, 1, q_len, S) additive mask from a (B, S) validity flag array."""
    B, S = valid.shape
    m = np.where(valid[:, None, None, :], 0.0, T.NEG_INF)
    return np.broadcast_to(m, (B, 1, q_len, S)).copy()


class MultiHeadAttention(Module):
    """Scaled dot-product attention with h heads over (..., d, N) inputs.

    ``attend`` takes already-projected q/k/v so callers can cache projections
    (incremental decoding); ``__call__`` projects and attends in one go.
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator,
                 drop: float = 0.0):
        super().__init__()
        if d % heads:
            raise ValueError(f"model width {d} not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        self.dh = d // heads
        self.wq = Linear(d, d, rng)
        self.wk = Linear(d, d, rng)
        self.wv = Linear(d, d, rng)
        self.wo = Linear(d, d, rng)
        self.attn_drop = Dropout(drop)

    def attend(self, q: T.Tensor, k: T.Tensor, v: T.Tensor,
               mask: Optional[np.ndarray] = None) -> T.Tensor:
        lead = q.data.shape[:-2]
        nq, nk = q.data.shape[-1], k.data.shape[-1]
        qh = T.reshape(q, lead + (self.heads, self.dh, nq))
        kh = T.reshape(k, lead + (self.heads, self.dh, nk))
        vh = T.reshape(v, lead + (self.heads, self.dh, nk))
        scores = T.matmul(T.swap_last2(qh), kh) * (1.0 / math.sqrt(self.dh))
        if mask is not None:
            if mask.max(axis=-1).min() <= T.NEG_INF:
                raise ValueError("attention mask blocks every key for some query")
            scores = scores + T.Tensor(mask)
        w = T.softmax(scores, axis=-1)
        w = self.attn_drop(w)
        ctx = T.matmul(vh, T.swap_last2(w))            # (..., h, dh, nq)
        out = T.reshape(ctx, lead + (self.d, nq))
        return self.wo(out)

    def __call__(self, q_in, k_in, v_in, mask: Optional[np.ndarray] = None):
        return self.attend(self.wq(q_in), self.wk(k_in), self.wv(v_in), mask)


class FeedForward(Module):
    def __init__(self, d: int, d_ffn: int, rng: np.random.Generator):
        super().__init__()
        self.lin1 = Linear(d, d_ffn, rng)
        self.lin2 = Linear(d_ffn, d, rng)

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return self.lin2(T.gelu(self.lin1(x)))


class EncoderBlock(Module):
    """Self-attention + FFN, post-norm residuals; mask optional (causal use)."""

    def __init__(self, d: int, heads: int, d_ffn: int, rng: np.random.Generator,
                 drop: float = 0.0):
        super().__init__()
        self.attn = MultiHeadAttention(d, heads, rng, drop)
        self.ffn = FeedForward(d, d_ffn, rng)
        self.ln1 = LayerNorm(d)
        self.ln2 = LayerNorm(d)
        self.drop1 = Dropout(drop)
        self.drop2 = Dropout(drop)

    def __call__(self, x: T.Tensor, mask: Optional[np.ndarray] = None) -> T.Tensor:
        x = self.ln1(x + self.drop1(self.attn(x, x, x, mask)))
        x = self.ln2(x + self.drop2(self.ffn(x)))
        return x


class DecoderBlock(Module):
    """Masked self-attention, then attention over the speech states, then
    over the context states, then FFN; four post-norm residual sublayers.
    """

    def __init__(self, d: int, heads: int, d_ffn: int, rng: np.random.Generator,
                 drop: float = 0.0):
        super().__init__()
        self.self_attn = MultiHeadAttention(d, heads, rng, drop)
        self.src_attn = MultiHeadAttention(d, heads, rng, drop)
        self.ctx_attn = MultiHeadAttention(d, heads, rng, drop)
        self.ffn = FeedForward(d, d_ffn, rng)
        self.ln1 = LayerNorm(d)
        self.ln2 = LayerNorm(d)
        self.ln3 = LayerNorm(d)
        self.ln4 = LayerNorm(d)
        self.drop1 = Dropout(drop)
        self.drop2 = Dropout(drop)
        self.drop3 = Dropout(drop)
        self.drop4 = Dropout(drop)

    def __call__(self, x: T.Tensor, speech: T.Tensor, ctx: T.Tensor,
                 self_mask: Optional[np.ndarray] = None) -> T.Tensor:
        x = self.ln1(x + self.drop1(self.self_attn(x, x, x, self_mask)))
        x = self.ln2(x + self.drop2(self.src_attn(x, speech, speech)))
        x = self.ln3(x + self.drop3(self.ctx_attn(x, ctx, ctx)))
        x = self.ln4(x + self.drop4(self.ffn(x)))
        return x


class AttentionPooling(Module):
    """Collapse (d, N) token states to one (d, 1) summary.

    alpha = softmax(v^T tanh(W C)); summary = C alpha.
    """

    def __init__(self, d: int, rng: np.random.Generator):
        super().__init__()
        self.proj = Linear(d, d, rng)
        self.score = Linear(d, 1, rng, bias=False)

    def __call__(self, c: T.Tensor) -> T.Tensor:
        scores = self.score(T.tanh(self.proj(c)))       # (1, N)
        alpha = T.softmax(scores, axis=-1)
        return T.matmul(c, T.swap_last2(alpha))         # (d, 1)


class ConvSubsampler(Module):
    """Two conv(3x3, same) + GELU + 2x2 max-pool stages, then a width projection.

    Input (..., 1, f, M) of filterbank frames; output (..., d, M') with
    M' = ceil(ceil(M / 2) / 2). Frequency shrinks the same way before the
    channel x frequency axes are flattened into the projection.
    """

    def __init__(self, f: int, d: int, rng: np.random.Generator,
                 channels: int = 32):
        super().__init__()
        self.channels = channels
        self.f = f
        k = 3
        self.w1 = Parameter(glorot_conv(rng, channels, 1, k))
        self.b1 = Parameter(np.zeros(channels))
        self.w2 = Parameter(glorot_conv(rng, channels, channels, k))
        self.b2 = Parameter(np.zeros(channels))
        f2 = -(-f // 2)
        self.f4 = -(-f2 // 2)
        self.proj = Linear(channels * self.f4, d, rng)

    def stage1(self, x: T.Tensor) -> T.Tensor:
        return T.gelu(T.conv2d(x, self.w1, self.b1))

    def stage2(self, x: T.Tensor) -> T.Tensor:
        return T.gelu(T.conv2d(x, self.w2, self.b2))

    def flatten_project(self, x: T.Tensor) -> T.Tensor:
        lead = x.data.shape[:-3]
        m4 = x.data.shape[-1]
        flat = T.reshape(x, lead + (self.channels * self.f4, m4))
        return self.proj(flat)

    def __call__(self, x: T.Tensor) -> T.Tensor:
        h = T.maxpool2x2(self.stage1(x))
        h = T.maxpool2x2(self.stage2(h))
        return self.flatten_project(h)


def glorot_conv(rng: np.random.Generator, c_out: int, c_in: int, k: int) -> np.ndarray:
    fan_in = c_in * k * k
    fan_out = c_out * k * k
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(c_out, c_in, k, k))
