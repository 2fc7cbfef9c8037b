"""Hierarchical context encoder: incremental-vs-batch equality, causality,
sentinel behavior, and gradient flow through stored history."""

import numpy as np
import pytest

from dsq import tensor as T
from dsq.context_encoder import ContextCache, HierarchicalContextEncoder


@pytest.fixture()
def henc(rng):
    return HierarchicalContextEncoder(d=8, heads=2, d_ffn=16, token_layers=1,
                                      utt_layers=2, vocab_size=11, rng=rng)


def toks(rng, n):
    return list(rng.integers(4, 11, size=n))


class TestIncrementalEqualsBatch:
    def test_memory_matches_full_pass(self, henc, rng):
        with T.no_grad():
            cache = ContextCache(henc)
            texts = [toks(rng, rng.integers(1, 6)) for _ in range(6)]
            for tk in texts:
                cache.append_text(tk)
            summaries = [henc.encode_utterance_text(tk) for tk in texts]
            full = henc.contexts_full(summaries).data
            inc = cache.memory().data
        assert full.shape == inc.shape == (8, 6)
        assert np.max(np.abs(full - inc)) < 1e-10

    def test_every_prefix_matches(self, henc, rng):
        with T.no_grad():
            texts = [toks(rng, 3) for _ in range(4)]
            summaries = [henc.encode_utterance_text(tk) for tk in texts]
            cache = ContextCache(henc)
            for t, tk in enumerate(texts):
                cache.append_text(tk)
                full = henc.contexts_full(summaries[: t + 1]).data
                assert np.max(np.abs(full - cache.memory().data)) < 1e-10

    def test_stored_columns_never_change(self, henc, rng):
        with T.no_grad():
            cache = ContextCache(henc)
            cache.append_text(toks(rng, 4))
            cache.append_text(toks(rng, 2))
            before = [col.data.copy() for col in cache.levels[-1]]
            cache.append_text(toks(rng, 5))
            for prev, col in zip(before, cache.levels[-1]):
                assert np.array_equal(prev, col.data)


class TestCausality:
    def test_future_utterance_cannot_reach_past_columns(self, henc, rng):
        with T.no_grad():
            texts = [toks(rng, 3) for _ in range(5)]
            summaries = [henc.encode_utterance_text(tk) for tk in texts]
            base = henc.contexts_full(summaries).data
            for u in range(1, 5):
                changed = list(texts)
                changed[u] = toks(rng, 4)
                s2 = [henc.encode_utterance_text(tk) for tk in changed]
                pert = henc.contexts_full(s2).data
                assert np.array_equal(base[:, :u], pert[:, :u]), \
                    f"perturbing utterance {u} leaked backwards"


class TestSentinelAndErrors:
    def test_empty_history_returns_raw_sentinel(self, henc):
        cache = ContextCache(henc)
        assert cache.memory() is henc.sentinel
        assert cache.memory().data.shape == (8, 1)

    def test_empty_text_rejected(self, henc):
        with pytest.raises(ValueError):
            henc.encode_utterance_text([])

    def test_bad_summary_shape_rejected(self, henc):
        cache = ContextCache(henc)
        with pytest.raises(T.ShapeError):
            cache.append(T.Tensor(np.zeros((8, 2))))

    def test_memory_is_cached_between_appends(self, henc, rng):
        with T.no_grad():
            cache = ContextCache(henc)
            cache.append_text(toks(rng, 2))
            assert cache.memory() is cache.memory()
            m1 = cache.memory().data.copy()
            cache.append_text(toks(rng, 2))
            assert cache.memory().data.shape == (8, 2)
            assert np.array_equal(cache.memory().data[:, :1], m1)


class TestGradientFlow:
    def test_history_receives_gradient(self, henc):
        cache = ContextCache(henc)
        cache.append_text([4, 5, 6])
        cache.append_text([7, 8])
        loss = T.tsum(cache.memory() * cache.memory())
        loss.backward()
        table_grad = henc.embed.table.grad
        assert table_grad is not None
        # utterance-0 tokens contribute through the stored columns
        assert np.any(table_grad[:, 4] != 0.0)
        assert np.any(table_grad[:, 7] != 0.0)
