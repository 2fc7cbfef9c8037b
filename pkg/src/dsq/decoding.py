"""Recursive discourse decoding.

Utterances decode in order; in hypothesis mode each 1-best output text is
encoded and appended to the context cache for the next utterance, in oracle
mode the reference text is appended instead (outputs still collected for
scoring), and in "none" mode every utterance sees only the begin-of-discourse
sentinel. Per-utterance search is standard beam search over the incremental
decoder state: live hypotheses expand over the whole vocabulary, the top
beam_size survive, EOS retires a hypothesis into a finished pool, and the
pool competes with any still-live hypotheses in the final ranking.

Ties anywhere break toward the lexicographically smaller token sequence,
which for a single expansion step means the lower token id.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .context_encoder import ContextCache
from .data import BOS_ID, EOS_ID, DiscourseSample, Vocabulary
from .decoder import DecoderState, TranscriptionDecoder
from .model import AsrModel
from .speech_encoder import FeatureStats, normalize_features
from .training import context_tokens


@dataclass
class DecodeConfig:
    beam_size: int = 4
    max_len: int = 32
    length_norm: bool = False
    context_mode: str = "hypothesis"   # hypothesis | oracle | none

    def __post_init__(self):
        if self.beam_size < 1 or self.max_len < 1:
            raise ValueError("beam_size and max_len must be at least 1")
        if self.context_mode not in ("hypothesis", "oracle", "none"):
            raise ValueError(f"unknown context mode {self.context_mode!r}")


@dataclass
class Hypothesis:
    tokens: List[int]            # BOS-prefixed
    log_prob: float
    finished: bool
    state: DecoderState = field(repr=False)

    def emitted(self) -> List[int]:
        """Output ids without BOS and without the trailing EOS."""
        out = self.tokens[1:]
        if out and out[-1] == EOS_ID:
            out = out[:-1]
        return out


def _rank_key(h: Hypothesis, length_norm: bool):
    score = h.log_prob
    if length_norm:
        score /= max(1, len(h.tokens) - 1)
    return (-score, tuple(h.tokens))


def beam_search_utterance(decoder: TranscriptionDecoder, speech: T.Tensor,
                          ctx: T.Tensor, cfg: DecodeConfig) -> List[Hypothesis]:
    """Ranked hypotheses for one utterance given both memories.

    If nothing emits EOS within max_len steps, the ranked still-live
    hypotheses are returned with finished=False.
    """
    # beam_size may exceed |V|; the candidate pool then just never fills
    vocab_size = decoder.vocab_size
    root = Hypothesis([BOS_ID], 0.0, False,
                      DecoderState(decoder, speech, ctx, EOS_ID))
    live = [root]
    finished: List[Hypothesis] = []
    with T.no_grad():
        for _ in range(cfg.max_len):
            if not live:
                break
            cands: List[Tuple[float, Tuple[int, ...], Hypothesis, int]] = []
            for hyp in live:
                dist = hyp.state.advance(hyp.tokens[-1])
                logp = np.log(np.maximum(dist, 1e-300))
                for v in range(vocab_size):
                    cands.append((hyp.log_prob + float(logp[v]),
                                  tuple(hyp.tokens) + (v,), hyp, v))
            cands.sort(key=lambda c: (-c[0], c[1]))
            live = []
            for score, toks, hyp, v in cands[:cfg.beam_size]:
                child = Hypothesis(list(toks), score, v == EOS_ID,
                                   hyp.state.clone())
                if child.finished:
                    finished.append(child)
                else:
                    live.append(child)
    pool = finished + live
    pool.sort(key=lambda h: _rank_key(h, cfg.length_norm))
    return pool


def rescore_hypothesis(decoder: TranscriptionDecoder, hyp: Hypothesis,
                       speech: T.Tensor, ctx: T.Tensor) -> float:
    """Teacher-forced sum of chosen log-probabilities; checks beam bookkeeping."""
    toks = hyp.tokens[1:]
    if not toks:
        return 0.0
    with T.no_grad():
        dists = decoder.teacher_forced_distributions(toks, BOS_ID, speech, ctx)
    chosen = dists.data[np.asarray(toks), np.arange(len(toks))]
    return float(np.log(np.maximum(chosen, 1e-300)).sum())


def decode_discourse(model: AsrModel, sample: DiscourseSample,
                     vocab: Vocabulary, cfg: DecodeConfig,
                     stats: Optional[FeatureStats] = None) -> List[List[int]]:
    """Decode every utterance of one discourse in order; returns emitted ids.

    Oracle mode feeds reference texts (never model output) into the context;
    "none" keeps the context at the sentinel for every utterance.
    """
    model.eval()
    outs: List[List[int]] = []
    with T.no_grad():
        cache = ContextCache(model.ctx_enc)
        for t, feats in enumerate(sample.features):
            x = normalize_features(feats, stats) if stats is not None else feats
            mem = model.speech_enc(x)
            if cfg.context_mode == "none":
                ctx = model.ctx_enc.sentinel
            else:
                ctx = cache.memory()
            hyps = beam_search_utterance(model.decoder, mem, ctx, cfg)
            emitted = hyps[0].emitted()
            outs.append(emitted)
            if cfg.context_mode == "hypothesis":
                cache.append_text(emitted if emitted else [EOS_ID])
            elif cfg.context_mode == "oracle":
                cache.append_text(context_tokens(vocab, sample.texts[t]))
    return outs


def decode_corpus(model: AsrModel, samples: Sequence[DiscourseSample],
                  vocab: Vocabulary, cfg: DecodeConfig,
                  stats: Optional[FeatureStats] = None
                  ) -> Dict[Tuple[str, int], str]:
    out: Dict[Tuple[str, int], str] = {}
    for s in samples:
        ids = decode_discourse(model, s, vocab, cfg, stats)
        for i, seq in enumerate(ids):
            out[(s.lecture_id, i)] = vocab.decode(seq)
    return out


def write_decode_output(path, decodes: Dict[Tuple[str, int], str]) -> None:
    """One line per utterance: lecture id, utterance index, decoded text."""
    lines = [f"{lec}\t{idx}\t{text}"
             for (lec, idx), text in sorted(decodes.items())]
    Path(path).write_text("".join(l + "\n" for l in lines), encoding="utf-8")


def read_decode_output(path) -> Dict[Tuple[str, int], str]:
    out: Dict[Tuple[str, int], str] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        parts = line.split("\t", 2)
        if len(parts) == 2:
            parts.append("")
        if len(parts) != 3:
            raise ValueError(f"{path}: malformed decode line {line!r}")
        out[(parts[0], int(parts[1]))] = parts[2]
    return out
