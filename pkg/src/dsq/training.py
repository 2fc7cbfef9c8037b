"""Loss construction, target smoothing, SpecAugment, and the train loops.

Targets are explicit probability vectors: plain one-hot (maximum
likelihood), label-smoothed, or interpolated with a teacher LM's distribution
(knowledge distillation, P~ = (1-alpha) P_onehot + alpha P_teacher). The loss
is -sum(P~ * log P) with the log clamped at 1e-12, normalized by the number
of target tokens in the optimization step.

Discourses are processed with teacher forcing: the context cache for
utterance t is built from reference texts 1..t-1, never from model output.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .context_encoder import ContextCache
from .data import BOS_ID, EOS_ID, PAD_ID, DiscourseSample, Vocabulary
from .lm import ContextLm
from .model import AsrModel
from .module import dropout_rng
from .optim import RAdam, global_norm_clip, warmup_inv_sqrt_lr
from .speech_encoder import FeatureStats, normalize_features


@dataclass
class SpecAugmentConfig:
    n_freq_masks: int = 2
    max_freq_width: int = 20
    n_time_masks: int = 2
    max_time_width: int = 100


@dataclass
class TrainingConfig:
    alpha: float = 0.5
    label_eps: float = 0.1
    batch_size: int = 4
    max_utterances: int = 50
    peak_lr: float = 2e-3
    warmup_steps: int = 200
    epochs: int = 20
    patience: int = 5
    clip_norm: float = 5.0
    seed: int = 0
    augment: SpecAugmentConfig = field(default_factory=SpecAugmentConfig)

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not 0.0 <= self.label_eps < 1.0:
            raise ValueError("label_eps must lie in [0, 1)")


# -- targets and loss ------------------------------------------------------------


def onehot_targets(token_ids: Sequence[int], vocab_size: int) -> np.ndarray:
    n = len(token_ids)
    out = np.zeros((vocab_size, n))
    out[np.asarray(token_ids, dtype=np.intp), np.arange(n)] = 1.0
    return out


def uniform_non_pad(vocab_size: int) -> np.ndarray:
    u = np.full(vocab_size, 1.0 / (vocab_size - 1))
    u[PAD_ID] = 0.0
    return u


def smooth_targets_kd(onehot: np.ndarray, teacher: np.ndarray,
                      alpha: float) -> np.ndarray:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if onehot.shape != teacher.shape:
        raise ValueError(f"target shapes differ: {onehot.shape} vs {teacher.shape}")
    return (1.0 - alpha) * onehot + alpha * teacher


def smooth_targets_label(onehot: np.ndarray, eps: float) -> np.ndarray:
    if not 0.0 <= eps < 1.0:
        raise ValueError("eps must lie in [0, 1)")
    u = uniform_non_pad(onehot.shape[0])
    return (1.0 - eps) * onehot + eps * u[:, None]


def nll_loss(dists: T.Tensor, targets: np.ndarray) -> T.Tensor:
    """-sum(targets * log dists), log clamped at 1e-12; scalar Tensor."""
    if dists.data.shape != targets.shape:
        raise T.ShapeError(
            f"distribution/target shapes differ: {dists.data.shape} vs {targets.shape}")
    logp = T.log(T.clamp_min(dists, 1e-12))
    return -T.tsum(logp * T.Tensor(targets))


def spec_augment(x: np.ndarray, cfg: SpecAugmentConfig,
                 rng: np.random.Generator) -> np.ndarray:
    """Zero out random frequency bands and time spans of one feature matrix.

    Widths draw uniformly from 0..max (clipped to the matrix); applied to
    already-normalized features, so zero is the per-dimension mean.
    """
    y = x.copy()
    f, m = y.shape
    for _ in range(cfg.n_freq_masks):
        w = min(int(rng.integers(0, cfg.max_freq_width + 1)), f)
        if w:
            start = int(rng.integers(0, f - w + 1))
            y[start:start + w, :] = 0.0
    for _ in range(cfg.n_time_masks):
        w = min(int(rng.integers(0, cfg.max_time_width + 1)), m)
        if w:
            start = int(rng.integers(0, m - w + 1))
            y[:, start:start + w] = 0.0
    return y


# -- shared loop plumbing --------------------------------------------------------


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    valid_loss: float
    wall_seconds: float


@dataclass
class TrainResult:
    rows: List[EpochRow]
    best_valid: float
    best_epoch: int
    stopped_early: bool


def write_metrics_log(path, rows: Sequence[EpochRow]) -> None:
    lines = [f"{r.epoch}\t{r.train_loss:.6f}\t{r.valid_loss:.6f}\t{r.wall_seconds:.3f}"
             for r in rows]
    Path(path).write_text("".join(l + "\n" for l in lines), encoding="utf-8")


def context_tokens(vocab: Vocabulary, text: str) -> List[int]:
    """Token ids a text contributes to the context encoder; empty -> [EOS]."""
    ids = vocab.encode(text)
    return ids if ids else [EOS_ID]


def _asr_targets(toks: List[int], vocab_size: int, smoothing: str,
                 cfg: TrainingConfig, teacher_mat: Optional[np.ndarray]) -> np.ndarray:
    onehot = onehot_targets(toks, vocab_size)
    if smoothing == "none":
        return onehot
    if smoothing == "label":
        return smooth_targets_label(onehot, cfg.label_eps)
    if smoothing == "kd":
        if teacher_mat is None:
            raise ValueError("kd smoothing needs teacher distributions")
        return smooth_targets_kd(onehot, teacher_mat, cfg.alpha)
    raise ValueError(f"unknown smoothing mode {smoothing!r}")


def asr_discourse_loss(model: AsrModel, sample: DiscourseSample,
                       vocab: Vocabulary, cfg: TrainingConfig, smoothing: str,
                       teacher: Optional[List[np.ndarray]] = None,
                       stats: Optional[FeatureStats] = None,
                       augment_rng: Optional[np.random.Generator] = None):
    """Summed loss over one discourse segment; returns (loss Tensor, n_tokens).

    Contexts are teacher-forced reference texts built incrementally; speech
    for all utterances of the segment is encoded as one padded batch.
    """
    n = min(len(sample), cfg.max_utterances)
    texts = sample.texts[:n]
    feats = sample.features[:n]
    if stats is not None:
        feats = [normalize_features(f, stats) for f in feats]
    if augment_rng is not None:
        feats = [spec_augment(f, cfg.augment, augment_rng) for f in feats]
    mems = model.speech_enc.encode_batch(feats)
    cache = ContextCache(model.ctx_enc)
    total: Optional[T.Tensor] = None
    n_tokens = 0
    for t in range(n):
        toks = vocab.encode(texts[t], append_eos=True)
        ctx = cache.memory()
        dists = model.decoder.teacher_forced_distributions(toks, BOS_ID, mems[t], ctx)
        tg = _asr_targets(toks, model.vocab_size, smoothing, cfg,
                          teacher[t] if teacher is not None else None)
        loss = nll_loss(dists, tg)
        total = loss if total is None else total + loss
        n_tokens += len(toks)
        cache.append_text(context_tokens(vocab, texts[t]))
    return total, n_tokens


def lm_discourse_loss(lm: ContextLm, sample_texts: Sequence[str],
                      vocab: Vocabulary, cfg: TrainingConfig):
    """Maximum-likelihood loss of one discourse's texts under the LM."""
    contexts = lm.discourse_contexts(
        [context_tokens(vocab, t) for t in sample_texts])
    total: Optional[T.Tensor] = None
    n_tokens = 0
    for text, ctx in zip(sample_texts, contexts):
        toks = vocab.encode(text, append_eos=True)
        dists = lm.teacher_forced_distributions(toks, BOS_ID, ctx)
        loss = nll_loss(dists, onehot_targets(toks, lm.vocab_size))
        total = loss if total is None else total + loss
        n_tokens += len(toks)
    return total, n_tokens


def _run_training(model, samples_train, cfg: TrainingConfig,
                  discourse_loss, valid_loss_fn) -> TrainResult:
    """Shared epoch loop: batch accumulation, clip, warmup RAdam, early stop.

    ``discourse_loss(idx, sample, epoch)`` returns (loss Tensor, n_tokens);
    ``valid_loss_fn()`` returns the mean per-token validation loss.
    """
    if not samples_train:
        raise ValueError("empty training corpus")
    params = model.parameters()
    opt = RAdam(params, lr=cfg.peak_lr)
    rows: List[EpochRow] = []
    best_valid = float("inf")
    best_epoch = -1
    best_state = None
    bad_epochs = 0
    stopped = False
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        model.train()
        order = np.random.default_rng([cfg.seed, 17, epoch]).permutation(
            len(samples_train))
        loss_sum = 0.0
        token_sum = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            step_rng = np.random.default_rng([cfg.seed, 23, epoch, int(batch[0])])
            with dropout_rng(step_rng):
                total = None
                ntok = 0
                for idx in batch:
                    l, k = discourse_loss(int(idx), samples_train[int(idx)], epoch)
                    total = l if total is None else total + l
                    ntok += k
                mean = total * (1.0 / ntok)
                mean.backward()
            loss_sum += float(total.data)
            token_sum += ntok
            global_norm_clip(params, cfg.clip_norm)
            opt.lr = warmup_inv_sqrt_lr(opt.t + 1, cfg.peak_lr, cfg.warmup_steps)
            opt.step()
            model.zero_grad()
        train_loss = loss_sum / token_sum
        model.eval()
        with T.no_grad():
            valid_loss = valid_loss_fn()
        rows.append(EpochRow(epoch, train_loss, valid_loss,
                             time.perf_counter() - t0))
        if valid_loss < best_valid - 1e-12:
            best_valid = valid_loss
            best_epoch = epoch
            best_state = [p.data.copy() for p in params]
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > cfg.patience:
                stopped = True
                break
    if best_state is not None:
        for p, saved in zip(params, best_state):
            p.data[...] = saved
    model.eval()
    return TrainResult(rows, best_valid, best_epoch, stopped)


def mean_corpus_loss(loss_fn, samples) -> float:
    total = 0.0
    ntok = 0
    for s in samples:
        l, k = loss_fn(s)
        total += float(l.data)
        ntok += k
    return total / max(ntok, 1)


def train_asr(model: AsrModel, train_samples: Sequence[DiscourseSample],
              valid_samples: Sequence[DiscourseSample], vocab: Vocabulary,
              cfg: TrainingConfig, stats: FeatureStats, smoothing: str = "none",
              teacher: Optional[Dict[str, List[np.ndarray]]] = None,
              use_augment: bool = True) -> TrainResult:
    """Train the transcription model; returns per-epoch metrics.

    ``teacher`` maps lecture id to per-utterance (V, N) teacher matrices
    (required for kd smoothing). Validation loss is the plain ML loss so
    runs with different smoothing stay comparable.
    """
    if smoothing == "kd" and teacher is None:
        raise ValueError("kd smoothing needs a teacher distribution table")

    def discourse_loss(idx, sample, epoch):
        aug = None
        if use_augment:
            aug = np.random.default_rng([cfg.seed, 31, epoch, idx])
        tdists = teacher.get(sample.lecture_id) if teacher is not None else None
        if smoothing == "kd" and tdists is None:
            raise ValueError(f"no teacher distributions for {sample.lecture_id}")
        return asr_discourse_loss(model, sample, vocab, cfg, smoothing,
                                  tdists, stats, aug)

    def valid_loss():
        return mean_corpus_loss(
            lambda s: asr_discourse_loss(model, s, vocab, cfg, "none",
                                         None, stats, None),
            valid_samples)

    return _run_training(model, train_samples, cfg, discourse_loss, valid_loss)


def train_lm(lm: ContextLm, train_samples: Sequence[DiscourseSample],
             valid_samples: Sequence[DiscourseSample], vocab: Vocabulary,
             cfg: TrainingConfig) -> TrainResult:
    """Train the language model by maximum likelihood; early stop on valid loss.

    Validation perplexity is exp(valid_loss) of the logged rows.
    """

    def discourse_loss(idx, sample, epoch):
        n = min(len(sample), cfg.max_utterances)
        return lm_discourse_loss(lm, sample.texts[:n], vocab, cfg)

    def valid_loss():
        return mean_corpus_loss(
            lambda s: lm_discourse_loss(
                lm, s.texts[:min(len(s), cfg.max_utterances)], vocab, cfg),
            valid_samples)

    return _run_training(lm, train_samples, cfg, discourse_loss, valid_loss)


def teacher_forced_accuracy(model: AsrModel, samples: Sequence[DiscourseSample],
                            vocab: Vocabulary, cfg: TrainingConfig,
                            stats: Optional[FeatureStats]) -> float:
    """Fraction of target tokens whose teacher-forced argmax is correct."""
    model.eval()
    hits = 0
    total = 0
    with T.no_grad():
        for s in samples:
            n = min(len(s), cfg.max_utterances)
            feats = s.features[:n]
            if stats is not None:
                feats = [normalize_features(f, stats) for f in feats]
            mems = model.speech_enc.encode_batch(feats)
            cache = ContextCache(model.ctx_enc)
            for t in range(n):
                toks = vocab.encode(s.texts[t], append_eos=True)
                dists = model.decoder.teacher_forced_distributions(
                    toks, BOS_ID, mems[t], cache.memory())
                pred = dists.data.argmax(axis=0)
                hits += int((pred == np.asarray(toks)).sum())
                total += len(toks)
                cache.append_text(context_tokens(vocab, s.texts[t]))
    return hits / max(total, 1)
