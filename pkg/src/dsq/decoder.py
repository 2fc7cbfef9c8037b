"""Token decoder attending over both the speech memory and discourse context.

Each block runs masked self-attention, then attention over the acoustic
states, then attention over the context memory, then the feed-forward layer.
``teacher_forced_distributions`` evaluates all positions of a known token
sequence in one causal pass; ``DecoderState`` steps one token at a time with
cached self-attention keys/values and reproduces the one-pass results.
"""

from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np

from . import tensor as T
from .blocks import DecoderBlock, add_positions, causal_mask, sinusoidal_positions
from .module import Embedding, Linear, Module


class TranscriptionDecoder(Module):
    def __init__(self, d: int, heads: int, d_ffn: int, layers: int,
                 vocab_size: int, rng: np.random.Generator, drop: float = 0.0):
        super().__init__()
        self.d = d
        self.vocab_size = vocab_size
        self.embed = Embedding(d, vocab_size, rng)
        self.blocks = [DecoderBlock(d, heads, d_ffn, rng, drop)
                       for _ in range(layers)]
        self.out = Linear(d, vocab_size, rng)
        # small output init keeps the starting distributions near uniform
        self.out.w.data *= 0.1

    def _hidden(self, input_ids: Sequence[int], speech: T.Tensor,
                ctx: T.Tensor) -> T.Tensor:
        x = add_positions(self.embed(input_ids))
        m = causal_mask(len(input_ids))
        for blk in self.blocks:
            x = blk(x, speech, ctx, m)
        return x

    def teacher_forced_distributions(self, tokens: Sequence[int], bos_id: int,
                                     speech: T.Tensor, ctx: T.Tensor) -> T.Tensor:
        """Stepwise output distributions for a known target sequence.

        ``tokens`` are the N target ids (ending with the end-of-utterance
        token); the decoder consumes [BOS, tokens[:-1]] and returns a (V, N)
        matrix whose column n is P(w_n | w_<n, context, speech).
        """
        if len(tokens) == 0:
            raise ValueError("empty target sequence")
        input_ids = [bos_id] + list(tokens[:-1])
        logits = self.out(self._hidden(input_ids, speech, ctx))
        return T.softmax(logits, axis=-2)


class DecoderState:
    """Incremental decoding state for one hypothesis.

    Holds the consumed token ids and, per layer, the accumulated
    self-attention key/value columns. The key/value projections of the two
    memories are computed once and shared by every state cloned from the
    same utterance (they do not depend on the prefix).
    """

    def __init__(self, decoder: TranscriptionDecoder, speech: T.Tensor,
                 ctx: T.Tensor, eos_id: int):
        self.decoder = decoder
        self.eos_id = eos_id
        self.consumed: List[int] = []
        nblocks = len(decoder.blocks)
        self.self_k: List[Optional[T.Tensor]] = [None] * nblocks
        self.self_v: List[Optional[T.Tensor]] = [None] * nblocks
        self.mem_k = []
        self.mem_v = []
        for blk in decoder.blocks:
            self.mem_k.append((blk.src_attn.wk(speech), blk.ctx_attn.wk(ctx)))
            self.mem_v.append((blk.src_attn.wv(speech), blk.ctx_attn.wv(ctx)))

    def clone(self) -> "DecoderState":
        c = object.__new__(DecoderState)
        c.decoder = self.decoder
        c.eos_id = self.eos_id
        c.consumed = list(self.consumed)
        c.self_k = list(self.self_k)
        c.self_v = list(self.self_v)
        c.mem_k = self.mem_k
        c.mem_v = self.mem_v
        return c

    def advance(self, token_id: int) -> np.ndarray:
        """Consume one input token; return the next-token distribution (V,).

        The first call consumes BOS and yields P(w_1); consuming EOS is an
        error because a finished hypothesis must not be extended.
        """
        if self.consumed and self.consumed[-1] == self.eos_id:
            raise ValueError("prefix already ended with the end-of-utterance token")
        pos = len(self.consumed)
        dec = self.decoder
        pe = sinusoidal_positions(dec.d, 1, offset=pos)
        x = dec.embed([token_id]) + T.Tensor(pe.astype(T.default_dtype()))
        for j, blk in enumerate(dec.blocks):
            q = blk.self_attn.wq(x)
            k_new = blk.self_attn.wk(x)
            v_new = blk.self_attn.wv(x)
            if self.self_k[j] is None:
                k_all, v_all = k_new, v_new
            else:
                k_all = T.concat([self.self_k[j], k_new], axis=1)
                v_all = T.concat([self.self_v[j], v_new], axis=1)
            self.self_k[j] = k_all
            self.self_v[j] = v_all
            x = blk.ln1(x + blk.drop1(blk.self_attn.attend(q, k_all, v_all)))
            sk, ck = self.mem_k[j]
            sv, cv = self.mem_v[j]
            x = blk.ln2(x + blk.drop2(
                blk.src_attn.attend(blk.src_attn.wq(x), sk, sv)))
            x = blk.ln3(x + blk.drop3(
                blk.ctx_attn.attend(blk.ctx_attn.wq(x), ck, cv)))
            x = blk.ln4(x + blk.drop4(blk.ffn(x)))
        self.consumed.append(token_id)
        probs = T.softmax(dec.out(x), axis=-2)
        return probs.data[:, 0].copy()
