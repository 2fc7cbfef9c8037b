"""Hierarchical text encoder producing the discourse context memory.

Each already-spoken utterance is summarized to one d-vector by token-level
transformer blocks plus attention pooling; the summary sequence then runs
through causally masked utterance-level blocks, so the state for utterance j
depends only on utterances 1..j. A discourse with no history yet is
represented by a learned begin-of-discourse sentinel vector.

ContextCache grows the utterance-level states one utterance at a time.
Because the utterance-level attention is causal, already-stored columns never
change when a new one is appended, and the incremental build agrees with a
single full masked pass over the same texts.
"""

from __future__ import annotations

import math
from typing import List, Sequence

import numpy as np

from . import tensor as T
from .blocks import AttentionPooling, EncoderBlock, add_positions, causal_mask, \
    sinusoidal_positions
from .module import Embedding, Module, Parameter


class HierarchicalContextEncoder(Module):
    def __init__(self, d: int, heads: int, d_ffn: int, token_layers: int,
                 utt_layers: int, vocab_size: int, rng: np.random.Generator,
                 drop: float = 0.0):
        super().__init__()
        if token_layers < 1 or utt_layers < 1:
            raise ValueError("need at least one block at each level")
        self.d = d
        self.embed = Embedding(d, vocab_size, rng)
        self.token_blocks = [EncoderBlock(d, heads, d_ffn, rng, drop)
                             for _ in range(token_layers)]
        self.pool = AttentionPooling(d, rng)
        self.utt_blocks = [EncoderBlock(d, heads, d_ffn, rng, drop)
                           for _ in range(utt_layers)]
        self.sentinel = Parameter(rng.standard_normal((d, 1)) / math.sqrt(d))

    def encode_utterance_text(self, tokens: Sequence[int]) -> T.Tensor:
        """Token ids of one utterance -> (d, 1) summary vector.

        Empty input is an error; callers represent an empty decoded utterance
        by the end-of-utterance token alone.
        """
        if len(tokens) == 0:
            raise ValueError("cannot encode an empty utterance; "
                             "pass the end-of-utterance token instead")
        c = add_positions(self.embed(tokens))
        for blk in self.token_blocks:
            c = blk(c)
        return self.pool(c)

    def contexts_full(self, summaries: Sequence[T.Tensor]) -> T.Tensor:
        """One masked pass over t summaries -> (d, t) utterance-level states.

        Column j equals what the incremental cache stores after utterance j;
        the reference path for verifying ContextCache.
        """
        s = T.concat(list(summaries), axis=1)
        x = add_positions(s)
        m = causal_mask(s.data.shape[1])
        for blk in self.utt_blocks:
            x = blk(x, m)
        return x


class ContextCache:
    """Per-discourse incremental store of utterance-level encoder states.

    ``levels[0]`` holds position-encoded summaries, ``levels[l]`` the outputs
    of masked block l; all lists share one length (the utterance count).
    Appending computes only the new column: the new position attends over
    every stored column at each level, exactly the last causal-mask row.
    Stored columns are graph tensors, so during training gradients flow from
    later utterances' losses back through the whole history.
    """

    def __init__(self, encoder: HierarchicalContextEncoder):
        self.encoder = encoder
        self.levels: List[List[T.Tensor]] = [
            [] for _ in range(len(encoder.utt_blocks) + 1)]
        self._memory = None

    def __len__(self) -> int:
        return len(self.levels[0])

    def append(self, s_new: T.Tensor) -> None:
        """Add one (d, 1) utterance summary and extend every level by a column."""
        if s_new.data.shape != (self.encoder.d, 1):
            raise T.ShapeError(f"summary must be ({self.encoder.d}, 1)")
        pos = len(self)
        pe = sinusoidal_positions(self.encoder.d, 1, offset=pos)
        x = s_new + T.Tensor(pe.astype(s_new.data.dtype))
        self.levels[0].append(x)
        for lvl, blk in enumerate(self.encoder.utt_blocks):
            keys = T.concat(self.levels[lvl], axis=1) if pos else x
            h = blk.ln1(x + blk.drop1(blk.attn(x, keys, keys)))
            h = blk.ln2(h + blk.drop2(blk.ffn(h)))
            self.levels[lvl + 1].append(h)
            x = h
        self._memory = None

    def append_text(self, tokens: Sequence[int]) -> None:
        self.append(self.encoder.encode_utterance_text(tokens))

    def memory(self) -> T.Tensor:
        """(d, t) stacked top-level states; the sentinel (d, 1) when empty."""
        if len(self) == 0:
            return self.encoder.sentinel
        if self._memory is None:
            self._memory = T.concat(self.levels[-1], axis=1)
        return self._memory
