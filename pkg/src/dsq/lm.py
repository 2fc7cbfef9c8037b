"""Large-context language model: the distillation teacher.

Same hierarchical text encoder as the transcription model and a text-only
decoder whose blocks have masked self-attention, one attention over the
context memory, and the feed-forward layer (the speech attention is removed,
not zero-fed). A context_free variant always sees the begin-of-discourse
sentinel, giving an utterance-level teacher for the baseline comparison.

Teacher output distributions are computed once per corpus with reference
contexts and cached to disk so student epochs replay them cheaply.
"""

from __future__ import annotations

import struct
from typing import List, Optional, Sequence

import numpy as np

from . import tensor as T
from .blocks import FeedForward, MultiHeadAttention, add_positions, causal_mask
from .context_encoder import ContextCache, HierarchicalContextEncoder
from .module import Dropout, Embedding, LayerNorm, Linear, Module

TEACHER_CACHE_MAGIC = b"DSTC"
TEACHER_CACHE_VERSION = 1


class LmDecoderBlock(Module):
    """Masked self-attention, attention over context states, FFN; post-norm."""

    def __init__(self, d: int, heads: int, d_ffn: int, rng: np.random.Generator,
                 drop: float = 0.0):
        super().__init__()
        self.self_attn = MultiHeadAttention(d, heads, rng, drop)
        self.ctx_attn = MultiHeadAttention(d, heads, rng, drop)
        self.ffn = FeedForward(d, d_ffn, rng)
        self.ln1 = LayerNorm(d)
        self.ln2 = LayerNorm(d)
        self.ln3 = LayerNorm(d)
        self.drop1 = Dropout(drop)
        self.drop2 = Dropout(drop)
        self.drop3 = Dropout(drop)

    def __call__(self, x: T.Tensor, ctx: T.Tensor,
                 self_mask: Optional[np.ndarray] = None) -> T.Tensor:
        x = self.ln1(x + self.drop1(self.self_attn(x, x, x, self_mask)))
        x = self.ln2(x + self.drop2(self.ctx_attn(x, ctx, ctx)))
        x = self.ln3(x + self.drop3(self.ffn(x)))
        return x


class ContextLm(Module):
    def __init__(self, d: int, heads: int, d_ffn: int, token_layers: int,
                 utt_layers: int, dec_layers: int, vocab_size: int,
                 rng: np.random.Generator, drop: float = 0.0,
                 context_free: bool = False):
        super().__init__()
        self.d = d
        self.vocab_size = vocab_size
        self.context_free = context_free
        self.henc = HierarchicalContextEncoder(
            d, heads, d_ffn, token_layers, utt_layers, vocab_size, rng, drop)
        self.embed = Embedding(d, vocab_size, rng)
        self.blocks = [LmDecoderBlock(d, heads, d_ffn, rng, drop)
                       for _ in range(dec_layers)]
        self.out = Linear(d, vocab_size, rng)
        # small output init keeps the starting distributions near uniform
        self.out.w.data *= 0.1

    def teacher_forced_distributions(self, tokens: Sequence[int], bos_id: int,
                                     ctx: T.Tensor) -> T.Tensor:
        """(V, N) stepwise distributions for target ``tokens`` given context."""
        if len(tokens) == 0:
            raise ValueError("empty target sequence")
        input_ids = [bos_id] + list(tokens[:-1])
        x = add_positions(self.embed(input_ids))
        m = causal_mask(len(input_ids))
        for blk in self.blocks:
            x = blk(x, ctx, m)
        return T.softmax(self.out(x), axis=-2)

    def step(self, prefix_with_bos: Sequence[int], ctx: T.Tensor) -> np.ndarray:
        """Next-token distribution (V,) after the given BOS-led prefix."""
        if len(prefix_with_bos) == 0:
            raise ValueError("prefix must start with the begin token")
        x = add_positions(self.embed(list(prefix_with_bos)))
        m = causal_mask(len(prefix_with_bos))
        for blk in self.blocks:
            x = blk(x, ctx, m)
        probs = T.softmax(self.out(x), axis=-2)
        return probs.data[:, -1].copy()

    def discourse_contexts(self, texts: Sequence[Sequence[int]]) -> List[T.Tensor]:
        """Context memory for each utterance t given reference texts < t.

        The context_free variant returns the sentinel for every t.
        """
        out: List[T.Tensor] = []
        if self.context_free:
            return [self.henc.sentinel for _ in texts]
        cache = ContextCache(self.henc)
        for tokens in texts:
            out.append(cache.memory())
            cache.append_text(tokens)
        return out


def teacher_distributions(lm: ContextLm, texts: Sequence[Sequence[int]],
                          bos_id: int) -> List[np.ndarray]:
    """Per-utterance (V, N_t) teacher probabilities with reference contexts.

    ``texts`` are the discourse's target id sequences, each ending with the
    end-of-utterance token. Runs in eval mode without graph recording.
    """
    was_training = lm.training
    lm.eval()
    try:
        with T.no_grad():
            contexts = lm.discourse_contexts(texts)
            return [lm.teacher_forced_distributions(toks, bos_id, ctx).data.copy()
                    for toks, ctx in zip(texts, contexts)]
    finally:
        lm.train(was_training)


# -- on-disk teacher cache -------------------------------------------------------
#
# One file per lecture: magic, version u32, 32-byte vocabulary hash, |V| u32,
# record count u32, then records of (utterance index u32, token index u32,
# |V| float32), all little-endian.


def write_teacher_cache(path, dists: Sequence[np.ndarray], vocab_hash: bytes) -> None:
    if len(vocab_hash) != 32:
        raise ValueError("vocabulary hash must be 32 bytes")
    vsize = dists[0].shape[0] if dists else 0
    nrec = sum(d.shape[1] for d in dists)
    with open(path, "wb") as fh:
        fh.write(TEACHER_CACHE_MAGIC)
        fh.write(struct.pack("<I", TEACHER_CACHE_VERSION))
        fh.write(vocab_hash)
        fh.write(struct.pack("<II", vsize, nrec))
        for u, d in enumerate(dists):
            for n in range(d.shape[1]):
                fh.write(struct.pack("<II", u, n))
                fh.write(d[:, n].astype("<f4").tobytes())


def read_teacher_cache(path, expect_vocab_hash: Optional[bytes] = None
                       ) -> List[np.ndarray]:
    """Reload per-utterance (V, N_t) matrices; verifies the vocabulary hash."""
    with open(path, "rb") as fh:
        if fh.read(4) != TEACHER_CACHE_MAGIC:
            raise ValueError(f"{path}: not a teacher cache file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != TEACHER_CACHE_VERSION:
            raise ValueError(f"{path}: unsupported cache version {version}")
        vhash = fh.read(32)
        if expect_vocab_hash is not None and vhash != expect_vocab_hash:
            raise ValueError("teacher cache was built with a different vocabulary")
        vsize, nrec = struct.unpack("<II", fh.read(8))
        cols = {}
        for _ in range(nrec):
            u, n = struct.unpack("<II", fh.read(8))
            vec = np.frombuffer(fh.read(4 * vsize), dtype="<f4").astype(np.float64)
            cols.setdefault(u, {})[n] = vec
    out = []
    for u in range(len(cols)):
        per = cols[u]
        mat = np.stack([per[n] for n in range(len(per))], axis=1)
        out.append(mat)
    return out
