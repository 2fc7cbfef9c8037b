import numpy as np
import pytest

from dsq import tensor as T
from dsq.data import SynthTaskConfig, build_vocab, generate_synthetic_corpus
from dsq.model import ModelConfig, build_asr_model, build_lm
from dsq.speech_encoder import compute_feature_stats
from dsq.training import TrainingConfig


@pytest.fixture(autouse=True)
def _verify_mode():
    # float64 + full checking everywhere; individual tests opt out explicitly
    T.set_mode("verify")
    yield
    T.set_mode("verify")


@pytest.fixture(scope="session")
def tiny_synth():
    return SynthTaskConfig(vocab_size=14, n_topics=2, utterances_per_discourse=3,
                           tokens_per_utterance=3, feature_dim=4, n_train=6,
                           n_valid=3, n_test=3, seed=11)


@pytest.fixture(scope="session")
def tiny_corpus(tiny_synth):
    return generate_synthetic_corpus(tiny_synth)


@pytest.fixture(scope="session")
def tiny_vocab(tiny_corpus):
    train, _, _ = tiny_corpus
    return build_vocab([t for s in train for t in s.texts])


@pytest.fixture(scope="session")
def tiny_model_cfg():
    return ModelConfig(feature_dim=4, d=8, heads=2, d_ffn=16, token_layers=1,
                       utt_layers=1, speech_layers=1, dec_layers=1,
                       lm_dec_layers=1, dropout=0.0, conv_channels=2)


@pytest.fixture()
def tiny_model(tiny_model_cfg, tiny_vocab):
    return build_asr_model(tiny_model_cfg, tiny_vocab.size, seed=3).eval()


@pytest.fixture()
def tiny_lm(tiny_model_cfg, tiny_vocab):
    return build_lm(tiny_model_cfg, tiny_vocab.size, seed=3).eval()


@pytest.fixture(scope="session")
def tiny_stats(tiny_corpus):
    train, _, _ = tiny_corpus
    return compute_feature_stats([f for s in train for f in s.features])


@pytest.fixture()
def tiny_train_cfg():
    return TrainingConfig(seed=3, epochs=2, patience=2, batch_size=2,
                          warmup_steps=4, peak_lr=1e-3)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
