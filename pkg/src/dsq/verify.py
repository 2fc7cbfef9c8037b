"""Finite-difference verification suite.

Covers every differentiable primitive, each composite block, and the
end-to-end losses of both models (gradients of the discourse loss with
respect to a sampled subset of every parameter tensor). Runs in 'verify'
mode (float64) with dropout and augmentation disabled.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, List, Tuple

import numpy as np

from . import tensor as T
from .blocks import (AttentionPooling, DecoderBlock, EncoderBlock,
                     MultiHeadAttention, causal_mask)
from .data import SynthTaskConfig, Vocabulary, generate_synthetic_corpus
from .gradcheck import GradCheckReport, grad_check
from .lm import LmDecoderBlock
from .model import ModelConfig, build_asr_model, build_lm
from .training import TrainingConfig, asr_discourse_loss, lm_discourse_loss


@dataclass
class SuiteResult:
    reports: List[Tuple[str, GradCheckReport]]
    seconds: float

    @property
    def passed(self) -> bool:
        return all(r.passed for _, r in self.reports)

    @property
    def max_rel_err(self) -> float:
        return max(r.max_rel_err for _, r in self.reports)

    def lines(self) -> List[str]:
        out = [f"{name}: {rep.summary()}" for name, rep in self.reports]
        out.append(f"suite {'PASS' if self.passed else 'FAIL'} "
                   f"in {self.seconds:.1f}s, max_rel_err={self.max_rel_err:.3e}")
        return out


def _t(rng, *shape, scale=1.0):
    return T.Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def op_checks(tol: float = 1e-4) -> List[Tuple[str, GradCheckReport]]:
    rng = np.random.default_rng(7)

    def probe(*shape) -> T.Tensor:
        # fixed projection so the scalar loss sees every output element
        return T.Tensor(rng.standard_normal(shape))

    checks: List[Tuple[str, Callable, list]] = []

    x = _t(rng, 4, 6)
    w = _t(rng, 5, 4)
    checks.append(("matmul+add+mul", lambda a, b: T.tsum(
        T.matmul(b, a) * T.matmul(b, a) + T.matmul(b, a)), [x, w]))

    bm = _t(rng, 3, 2, 4)
    bw = _t(rng, 4, 5)
    checks.append(("matmul_batched", lambda a, b: T.tsum(
        T.matmul(a, b) * 0.5), [bm, bw]))

    s = _t(rng, 3, 5)
    mask = np.zeros((3, 5))
    mask[:, 4] = T.NEG_INF
    p_sm = probe(3, 5)
    checks.append(("softmax_masked", lambda a: T.tsum(
        T.softmax(a + T.Tensor(mask), axis=-1) * p_sm), [s]))

    ln_x = _t(rng, 6, 4)
    ln_g = T.Tensor(1.0 + 0.1 * rng.standard_normal((6, 1)), requires_grad=True)
    ln_b = _t(rng, 6, 1)
    p_ln = probe(6, 4)
    checks.append(("layer_norm", lambda a, g, b: T.tsum(
        T.layer_norm(a, g, b) * p_ln), [ln_x, ln_g, ln_b]))

    g1 = _t(rng, 5, 3)
    checks.append(("gelu_tanh_exp_log", lambda a: T.tsum(
        T.gelu(a) + T.tanh(a) + T.log(T.clamp_min(T.exp(a * 0.3), 1e-6))), [g1]))

    tk = _t(rng, 7, 5)
    checks.append(("take_concat_sum", lambda a: T.tsum(
        T.concat([a[1:4, :], a[0:3, :]], axis=0) * 0.7)
        + T.tsum(a[:, 2:4], axis=None), [tk]))

    tab = _t(rng, 4, 6)
    p_emb = probe(4, 4)
    checks.append(("embedding", lambda e: T.tsum(
        T.embedding_cols(e, [0, 3, 3, 1]) * p_emb), [tab]))

    cx = _t(rng, 2, 5, 6)
    cw = _t(rng, 3, 2, 3, 3, scale=0.4)
    cb = _t(rng, 3)
    checks.append(("conv2d_maxpool", lambda a, w_, b_: T.tsum(
        T.maxpool2x2(T.conv2d(a, w_, b_))), [cx, cw, cb]))

    bx = _t(rng, 2, 1, 4, 7)
    checks.append(("conv2d_batched", lambda a, w_, b_: T.tsum(
        T.maxpool2x2(T.gelu(T.conv2d(a, w_, b_)))),
        [bx, _t(rng, 2, 1, 3, 3, scale=0.4), _t(rng, 2)]))

    def dropped(a):
        return T.tsum(T.dropout(a, 0.4, np.random.default_rng(11), True) * a)

    checks.append(("dropout_fixed_mask", dropped, [_t(rng, 6, 6)]))

    init = np.random.default_rng(19)
    mha = MultiHeadAttention(8, 2, init)
    qin = _t(rng, 8, 3, scale=0.7)
    kin = _t(rng, 8, 5, scale=0.7)
    m = np.zeros((3, 5))
    m[0, 3:] = T.NEG_INF
    p_mha = probe(8, 3)
    checks.append(("multi_head_attention", lambda q, k: T.tsum(
        mha(q, k, k, m) * p_mha), [qin, kin]))

    pool = AttentionPooling(6, init)
    p_pool = probe(6, 1)
    checks.append(("attention_pooling", lambda c: T.tsum(
        pool(c) * p_pool), [_t(rng, 6, 5)]))

    enc = EncoderBlock(8, 2, 16, init)
    p_enc = probe(8, 4)
    checks.append(("encoder_block_causal", lambda a: T.tsum(
        enc(a, causal_mask(4)) * p_enc), [_t(rng, 8, 4, scale=0.7)]))

    dec = DecoderBlock(8, 2, 16, init)
    sp = _t(rng, 8, 6, scale=0.7)
    cm = _t(rng, 8, 2, scale=0.7)
    p_dec = probe(8, 3)
    checks.append(("decoder_block", lambda a, s_, c_: T.tsum(
        dec(a, s_, c_, causal_mask(3)) * p_dec),
        [_t(rng, 8, 3, scale=0.7), sp, cm]))

    lmb = LmDecoderBlock(8, 2, 16, init)
    p_lm = probe(8, 3)
    checks.append(("lm_block", lambda a, c_: T.tsum(
        lmb(a, c_, causal_mask(3)) * p_lm),
        [_t(rng, 8, 3, scale=0.7), _t(rng, 8, 2, scale=0.7)]))

    out = []
    for name, f, inputs in checks:
        for p in inputs:
            if isinstance(p, T.Tensor):
                p.requires_grad = True
        out.append((name, grad_check(f, inputs, tol=tol)))
    return out


def model_checks(tol: float = 1e-4, max_elements: int = 2
                 ) -> List[Tuple[str, GradCheckReport]]:
    """End-to-end loss gradients for both models on a tiny discourse."""
    synth = SynthTaskConfig(vocab_size=12, n_topics=2, utterances_per_discourse=3,
                            tokens_per_utterance=3, feature_dim=4, n_train=1,
                            n_valid=1, n_test=1, seed=5)
    train, _, _ = generate_synthetic_corpus(synth)
    sample = train[0]
    vocab = Vocabulary(sorted({c for t in sample.texts for c in t}))
    mcfg = ModelConfig(feature_dim=4, d=8, heads=2, d_ffn=16, token_layers=1,
                       utt_layers=1, speech_layers=1, dec_layers=1,
                       lm_dec_layers=1, dropout=0.0, conv_channels=2)
    tcfg = TrainingConfig(label_eps=0.1, seed=5)
    model = build_asr_model(mcfg, vocab.size, seed=5).eval()
    lm = build_lm(mcfg, vocab.size, seed=5).eval()
    rng = np.random.default_rng(3)

    def asr_loss(*_params):
        loss, n = asr_discourse_loss(model, sample, vocab, tcfg, "label")
        return loss * (1.0 / n)

    def lm_loss(*_params):
        loss, n = lm_discourse_loss(lm, sample.texts, vocab, tcfg)
        return loss * (1.0 / n)

    return [
        ("asr_end_to_end", grad_check(asr_loss, model.parameters(), tol=tol,
                                      max_elements=max_elements, rng=rng)),
        ("lm_end_to_end", grad_check(lm_loss, lm.parameters(), tol=tol,
                                     max_elements=max_elements, rng=rng)),
    ]


def gradient_suite(tol: float = 1e-4, max_elements: int = 2) -> SuiteResult:
    t0 = time.perf_counter()
    with T.using_mode("verify"):
        reports = op_checks(tol) + model_checks(tol, max_elements)
    return SuiteResult(reports, time.perf_counter() - t0)
