"""Targets, loss, SpecAugment, and the shared training loop."""

from dataclasses import replace

import numpy as np
import pytest

from dsq import tensor as T
from dsq.data import EOS_ID, PAD_ID
from dsq.model import build_asr_model
from dsq.module import Module, Parameter
from dsq.training import (SpecAugmentConfig, TrainingConfig, _run_training,
                          asr_discourse_loss, context_tokens,
                          mean_corpus_loss, nll_loss, onehot_targets,
                          smooth_targets_kd, smooth_targets_label,
                          spec_augment, teacher_forced_accuracy, train_asr,
                          train_lm, uniform_non_pad, write_metrics_log)


def random_dists(rng, v, n):
    m = rng.random((v, n)) + 1e-3
    return m / m.sum(axis=0, keepdims=True)


class TestNllLoss:
    def test_matches_brute_force(self, rng):
        v, n = 7, 5
        p = random_dists(rng, v, n)
        tg = random_dists(rng, v, n)
        expect = 0.0
        for i in range(v):
            for j in range(n):
                expect -= tg[i, j] * np.log(max(p[i, j], 1e-12))
        got = nll_loss(T.Tensor(p), tg)
        assert abs(float(got.data) - expect) < 1e-12

    def test_zero_probability_is_clamped(self):
        p = np.array([[0.0], [1.0]])
        tg = np.array([[1.0], [0.0]])
        loss = float(nll_loss(T.Tensor(p), tg).data)
        assert np.isfinite(loss)
        assert loss == pytest.approx(-np.log(1e-12))

    def test_shape_mismatch_raises(self, rng):
        with pytest.raises(T.ShapeError):
            nll_loss(T.Tensor(random_dists(rng, 4, 3)), np.zeros((4, 2)))


class TestTargets:
    def test_onehot_layout(self):
        tg = onehot_targets([2, 0, 1], 4)
        assert tg.shape == (4, 3)
        assert np.array_equal(tg.argmax(axis=0), [2, 0, 1])
        assert np.array_equal(tg.sum(axis=0), [1.0, 1.0, 1.0])

    def test_uniform_excludes_padding(self):
        u = uniform_non_pad(6)
        assert u[PAD_ID] == 0.0
        assert np.allclose(np.delete(u, PAD_ID), 1.0 / 5.0)
        assert abs(u.sum() - 1.0) < 1e-12

    def test_kd_alpha_zero_is_exact_ml(self, rng):
        onehot = onehot_targets([1, 3, 2], 5)
        teacher = random_dists(rng, 5, 3)
        assert np.array_equal(smooth_targets_kd(onehot, teacher, 0.0), onehot)

    def test_kd_uniform_teacher_equals_label_smoothing(self, rng):
        onehot = onehot_targets([4, 1], 6)
        u = uniform_non_pad(6)
        kd = smooth_targets_kd(onehot, np.tile(u[:, None], (1, 2)), 0.23)
        label = smooth_targets_label(onehot, 0.23)
        assert np.max(np.abs(kd - label)) < 1e-12

    def test_smoothed_targets_sum_to_one(self, rng):
        onehot = onehot_targets([2, 5, 1, 0], 8)
        teacher = random_dists(rng, 8, 4)
        for tg in (smooth_targets_label(onehot, 0.1),
                   smooth_targets_kd(onehot, teacher, 0.4)):
            assert np.max(np.abs(tg.sum(axis=0) - 1.0)) < 1e-9

    def test_parameter_validation(self, rng):
        onehot = onehot_targets([1], 4)
        teacher = random_dists(rng, 4, 1)
        with pytest.raises(ValueError):
            smooth_targets_kd(onehot, teacher, 1.5)
        with pytest.raises(ValueError):
            smooth_targets_label(onehot, 1.0)
        with pytest.raises(ValueError):
            smooth_targets_kd(onehot, random_dists(rng, 4, 2), 0.5)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainingConfig(alpha=-0.1)
        with pytest.raises(ValueError):
            TrainingConfig(label_eps=1.0)


class TestSpecAugment:
    CFG = SpecAugmentConfig(n_freq_masks=2, max_freq_width=3,
                            n_time_masks=2, max_time_width=4)

    def test_only_zeros_are_introduced(self, rng):
        x = rng.standard_normal((8, 20)) + 5.0
        for seed in range(20):
            y = spec_augment(x, self.CFG, np.random.default_rng(seed))
            assert y.shape == x.shape
            changed = y != x
            assert np.all(y[changed] == 0.0)

    def test_masks_are_bands(self):
        x = np.ones((8, 20))
        y = spec_augment(x, self.CFG, np.random.default_rng(3))
        zero_rows = np.where((y == 0).all(axis=1))[0]
        zero_cols = np.where((y == 0).all(axis=0))[0]
        # each fully zeroed run can only come from a contiguous mask
        for idx in (zero_rows, zero_cols):
            if len(idx) > 1:
                runs = np.split(idx, np.where(np.diff(idx) > 1)[0] + 1)
                assert len(runs) <= 2

    def test_widths_clip_to_the_matrix(self):
        wide = SpecAugmentConfig(n_freq_masks=2, max_freq_width=100,
                                 n_time_masks=2, max_time_width=100)
        x = np.ones((3, 5))
        for seed in range(30):
            y = spec_augment(x, wide, np.random.default_rng(seed))
            assert y.shape == x.shape

    def test_input_left_untouched(self, rng):
        x = rng.standard_normal((6, 10))
        before = x.copy()
        spec_augment(x, self.CFG, np.random.default_rng(0))
        assert np.array_equal(x, before)

    def test_deterministic_given_rng(self, rng):
        x = rng.standard_normal((6, 10))
        a = spec_augment(x, self.CFG, np.random.default_rng(7))
        b = spec_augment(x, self.CFG, np.random.default_rng(7))
        assert np.array_equal(a, b)


class TestContextTokens:
    def test_empty_text_stands_in_as_eos(self, tiny_vocab):
        assert context_tokens(tiny_vocab, "") == [EOS_ID]

    def test_plain_text_has_no_eos(self, tiny_vocab):
        text = tiny_vocab.id_to_token[5] * 3
        ids = context_tokens(tiny_vocab, text)
        assert ids == tiny_vocab.encode(text)
        assert ids[-1] != EOS_ID


class _Quadratic(Module):
    def __init__(self):
        super().__init__()
        self.w = Parameter(np.array([2.0]))


class TestLoopControl:
    def run(self, valid_values, patience, epochs=10):
        model = _Quadratic()
        seq = iter(valid_values)
        snaps = []

        def discourse_loss(idx, sample, epoch):
            return T.tsum(model.w * model.w), 1

        def valid_loss():
            snaps.append(model.w.data.copy())
            return next(seq)

        cfg = TrainingConfig(seed=0, epochs=epochs, patience=patience,
                             batch_size=1, warmup_steps=1, peak_lr=1e-2)
        res = _run_training(model, [object()], cfg, discourse_loss, valid_loss)
        return model, res, snaps

    def test_early_stop_after_patience_bad_epochs(self):
        model, res, snaps = self.run([3.0, 2.0, 2.5, 2.6, 2.7, 2.8], patience=2)
        assert res.stopped_early
        assert res.best_epoch == 1
        assert res.best_valid == 2.0
        assert len(res.rows) == 5

    def test_best_parameters_are_restored(self):
        model, res, snaps = self.run([3.0, 2.0, 2.5, 2.6, 2.7, 2.8], patience=2)
        assert np.array_equal(model.w.data, snaps[res.best_epoch])

    def test_runs_all_epochs_when_improving(self):
        model, res, _ = self.run([5.0, 4.0, 3.0, 2.0], patience=1, epochs=4)
        assert not res.stopped_early
        assert res.best_epoch == 3
        assert len(res.rows) == 4

    def test_empty_corpus_raises(self):
        model = _Quadratic()
        cfg = TrainingConfig(seed=0)
        with pytest.raises(ValueError):
            _run_training(model, [], cfg, lambda *a: None, lambda: 0.0)


class TestAsrTraining:
    def test_untrained_loss_is_near_log_vocab(self, tiny_model_cfg, tiny_vocab,
                                              tiny_corpus, tiny_stats,
                                              tiny_train_cfg):
        train, _, _ = tiny_corpus
        fresh = build_asr_model(tiny_model_cfg, tiny_vocab.size, seed=0)
        fresh.eval()
        with T.no_grad():
            loss = mean_corpus_loss(
                lambda s: asr_discourse_loss(fresh, s, tiny_vocab,
                                             tiny_train_cfg, "none",
                                             stats=tiny_stats),
                train)
        target = np.log(tiny_vocab.size)
        assert abs(loss - target) / target < 0.05

    def test_loss_decreases(self, tiny_corpus, tiny_vocab, tiny_model_cfg,
                            tiny_stats, tiny_train_cfg):
        train, valid, _ = tiny_corpus
        model = build_asr_model(tiny_model_cfg, tiny_vocab.size, seed=1)
        cfg = replace(tiny_train_cfg, epochs=4, patience=4, peak_lr=3e-3)
        res = train_asr(model, train, valid, tiny_vocab, cfg, tiny_stats,
                        use_augment=False)
        assert res.rows[-1].train_loss < res.rows[0].train_loss

    def test_training_is_deterministic(self, tiny_corpus, tiny_vocab,
                                       tiny_model_cfg, tiny_stats,
                                       tiny_train_cfg):
        train, valid, _ = tiny_corpus

        def one():
            m = build_asr_model(tiny_model_cfg, tiny_vocab.size, seed=1)
            res = train_asr(m, train, valid, tiny_vocab, tiny_train_cfg,
                            tiny_stats, smoothing="label", use_augment=True)
            return res, np.concatenate([p.data.ravel() for p in m.parameters()])

        # full pipeline twice, including augmentation draws and dropout paths
        ra, wa = one()
        rb, wb = one()
        assert [(r.train_loss, r.valid_loss) for r in ra.rows] == \
               [(r.train_loss, r.valid_loss) for r in rb.rows]
        assert np.array_equal(wa, wb)

    def test_best_valid_matches_restored_parameters(self, tiny_corpus,
                                                    tiny_vocab, tiny_model_cfg,
                                                    tiny_stats, tiny_train_cfg):
        train, valid, _ = tiny_corpus
        model = build_asr_model(tiny_model_cfg, tiny_vocab.size, seed=1)
        res = train_asr(model, train, valid, tiny_vocab, tiny_train_cfg,
                        tiny_stats, smoothing="label", use_augment=False)
        with T.no_grad():
            again = mean_corpus_loss(
                lambda s: asr_discourse_loss(model, s, tiny_vocab,
                                             tiny_train_cfg, "none",
                                             stats=tiny_stats),
                valid)
        assert again == pytest.approx(res.best_valid, abs=1e-12)

    def test_kd_requires_teacher_table(self, tiny_corpus, tiny_vocab,
                                       tiny_model_cfg, tiny_stats,
                                       tiny_train_cfg):
        train, valid, _ = tiny_corpus
        model = build_asr_model(tiny_model_cfg, tiny_vocab.size, seed=1)
        with pytest.raises(ValueError):
            train_asr(model, train, valid, tiny_vocab, tiny_train_cfg,
                      tiny_stats, smoothing="kd", teacher=None)

    def test_kd_requires_every_lecture(self, tiny_corpus, tiny_vocab,
                                       tiny_model_cfg, tiny_stats,
                                       tiny_train_cfg):
        train, valid, _ = tiny_corpus
        model = build_asr_model(tiny_model_cfg, tiny_vocab.size, seed=1)
        with pytest.raises(ValueError):
            train_asr(model, train, valid, tiny_vocab, tiny_train_cfg,
                      tiny_stats, smoothing="kd", teacher={})

    def test_teacher_forced_accuracy_in_range(self, tiny_model, tiny_corpus,
                                              tiny_vocab, tiny_train_cfg,
                                              tiny_stats):
        _, valid, _ = tiny_corpus
        acc = teacher_forced_accuracy(tiny_model, valid, tiny_vocab,
                                      tiny_train_cfg, tiny_stats)
        assert 0.0 <= acc <= 1.0
        again = teacher_forced_accuracy(tiny_model, valid, tiny_vocab,
                                        tiny_train_cfg, tiny_stats)
        assert acc == again


class TestLmTraining:
    def test_two_epochs_smoke(self, tiny_corpus, tiny_vocab, tiny_model_cfg,
                              tiny_train_cfg):
        from dsq.model import build_lm
        train, valid, _ = tiny_corpus
        lm = build_lm(tiny_model_cfg, tiny_vocab.size, seed=1)
        res = train_lm(lm, train, valid, tiny_vocab, tiny_train_cfg)
        assert len(res.rows) <= tiny_train_cfg.epochs
        assert np.isfinite(res.best_valid)
        assert np.exp(res.best_valid) > 1.0


class TestMetricsLog:
    def test_written_rows_parse_back(self, tmp_path, tiny_corpus, tiny_vocab,
                                     tiny_model_cfg, tiny_stats,
                                     tiny_train_cfg):
        train, valid, _ = tiny_corpus
        model = build_asr_model(tiny_model_cfg, tiny_vocab.size, seed=1)
        res = train_asr(model, train, valid, tiny_vocab, tiny_train_cfg,
                        tiny_stats, use_augment=False)
        path = tmp_path / "metrics.tsv"
        write_metrics_log(path, res.rows)
        lines = path.read_text().splitlines()
        assert len(lines) == len(res.rows)
        for line, row in zip(lines, res.rows):
            epoch, tr, vl, secs = line.split("\t")
            assert int(epoch) == row.epoch
            assert float(tr) == pytest.approx(row.train_loss, abs=1e-6)
            assert float(vl) == pytest.approx(row.valid_loss, abs=1e-6)
