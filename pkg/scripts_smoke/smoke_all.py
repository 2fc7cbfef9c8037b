import sys, time
import numpy as np

sys.path.insert(0, "/root/pkg/src")

from dsq import tensor as T
from dsq.data import (BOS_ID, EOS_ID, SynthTaskConfig, build_vocab,
                      generate_synthetic_corpus, bayes_context_free_error)
from dsq.model import ModelConfig, build_asr_model, build_lm
from dsq.training import (TrainingConfig, asr_discourse_loss, lm_discourse_loss,
                          context_tokens)
from dsq.context_encoder import ContextCache
from dsq.decoder import DecoderState
from dsq.decoding import DecodeConfig, decode_discourse
from dsq.optim import RAdam
from dsq.speech_encoder import compute_feature_stats, normalize_features

t0 = time.time()
T.set_mode("verify")

synth = SynthTaskConfig(vocab_size=14, n_topics=2, utterances_per_discourse=3,
                        tokens_per_utterance=3, feature_dim=4, n_train=3,
                        n_valid=2, n_test=2, seed=1)
train, valid, test = generate_synthetic_corpus(synth)
vocab = build_vocab([t for s in train for t in s.texts])
print("vocab size", vocab.size, "hash", vocab.hash().hex()[:12])
print("bayes floor", bayes_context_free_error(test, synth))

mcfg = ModelConfig(feature_dim=4, d=8, heads=2, d_ffn=16, token_layers=1,
                   utt_layers=1, speech_layers=1, dec_layers=1,
                   lm_dec_layers=1, dropout=0.0, conv_channels=2)
model = build_asr_model(mcfg, vocab.size, seed=0).eval()
tcfg = TrainingConfig(seed=0)
stats = compute_feature_stats([f for s in train for f in s.features])

loss, n = asr_discourse_loss(model, train[0], vocab, tcfg, "label", stats=stats)
l = loss * (1.0 / n)
l.backward()
print("asr loss/token", float(l.data))
opt = RAdam(model.parameters(), lr=1e-3)
opt.step()
model.zero_grad()

lm = build_lm(mcfg, vocab.size, seed=0).eval()
ll, nn = lm_discourse_loss(lm, train[0].texts, vocab, tcfg)
l2 = ll * (1.0 / nn)
l2.backward()
print("lm loss/token", float(l2.data), "ln V =", float(np.log(vocab.size)))

# incremental context cache vs one-pass batch encoding
with T.no_grad():
    henc = model.ctx_enc
    cache = ContextCache(henc)
    token_lists = [context_tokens(vocab, t) for t in train[1].texts]
    mems = []
    for toks in token_lists:
        mems.append(cache.memory().data.copy())
        cache.append_text(toks)
    summaries = [henc.encode_utterance_text(t) for t in token_lists]
    zfull = henc.contexts_full(summaries)
    diff = np.abs(zfull.data - cache.memory().data).max()
    print("ctx incremental vs batch max|diff|", diff)
    assert diff < 1e-10

# incremental decoder vs one-pass teacher forcing
with T.no_grad():
    sp = model.speech_enc(T.Tensor(normalize_features(train[1].features[0], stats)))
    ctx = T.Tensor(mems[1])
    toks = vocab.encode(train[1].texts[0], append_eos=True)
    dists = model.decoder.teacher_forced_distributions(toks, BOS_ID, sp, ctx)
    st = DecoderState(model.decoder, sp, ctx, eos_id=EOS_ID)
    cols = []
    for tok in [BOS_ID] + toks[:-1]:
        cols.append(st.advance(tok))
    diff = np.abs(np.stack(cols, axis=1) - dists.data).max()
    print("decoder incremental vs one-pass max|diff|", diff)
    assert diff < 1e-10
    print("dist column sums", dists.data.sum(axis=0))

dec_cfg = DecodeConfig(beam_size=3, max_len=8, context_mode="hypothesis")
hyps = decode_discourse(model, train[1], vocab, dec_cfg, stats)
print("decoded:", hyps)
print("refs   :", train[1].texts)
print("smoke ok in %.1fs" % (time.time() - t0))
