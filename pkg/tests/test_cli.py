"""Command-line workflow: every subcommand in-process, exit-code contract."""

import os

import numpy as np
import pytest

from dsq.cli import load_asr_checkpoint, main
from dsq.data import load_corpus
from dsq.decoding import read_decode_output

SMALL = [
    "synth.vocab_size=14", "synth.n_topics=2",
    "synth.utterances_per_discourse=3", "synth.tokens_per_utterance=4",
    "synth.feature_dim=5", "synth.frames_per_token=3",
    "synth.n_train=4", "synth.n_valid=2", "synth.n_test=2",
    "model.feature_dim=5", "model.d=8", "model.heads=2", "model.d_ffn=16",
    "model.token_layers=1", "model.utt_layers=1", "model.speech_layers=1",
    "model.dec_layers=1", "model.lm_dec_layers=1", "model.dropout=0.0",
    "model.conv_channels=2",
    "training.epochs=1", "training.patience=1", "training.batch_size=2",
    "training.warmup_steps=2",
    "decode.beam_size=2", "decode.max_len=6",
    "seed=5",
]


def sets(*extra):
    out = []
    for kv in list(SMALL) + list(extra):
        out += ["--set", kv]
    return out


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cliruns")


@pytest.fixture(scope="module")
def corpus(workdir):
    out = workdir / "corpus"
    assert main(["gen-data", "--out", str(out)] + sets()) == 0
    return out


@pytest.fixture(scope="module")
def lm_run(workdir, corpus):
    out = workdir / "lm"
    code = main(["train-lm", "--corpus", str(corpus / "train.manifest"),
                 "--out", str(out)] + sets())
    assert code == 0
    return out


@pytest.fixture(scope="module")
def asr_run(workdir, corpus):
    out = workdir / "asr"
    code = main(["train-asr", "--corpus", str(corpus / "train.manifest"),
                 "--out", str(out)] + sets())
    assert code == 0
    return out


class TestGenData:
    def test_writes_all_splits_and_config_echo(self, corpus):
        for split in ("train", "valid", "test"):
            assert (corpus / f"{split}.manifest").exists()
        assert "synth.vocab_size = 14" in (corpus / "config.txt").read_text()
        assert len(load_corpus(corpus / "train.manifest")) == 4

    def test_refuses_overwrite_without_force(self, corpus, capsys):
        assert main(["gen-data", "--out", str(corpus)] + sets()) == 2
        assert "--force" in capsys.readouterr().err

    def test_force_overwrites(self, tmp_path):
        out = tmp_path / "c2"
        assert main(["gen-data", "--out", str(out)] + sets()) == 0
        assert main(["gen-data", "--out", str(out), "--force"] + sets()) == 0

    def test_unknown_setting_is_usage_error(self, tmp_path):
        code = main(["gen-data", "--out", str(tmp_path / "x"),
                     "--set", "synth.wrong=1"])
        assert code == 1

    def test_env_seed_controls_generation(self, tmp_path, monkeypatch):
        a = tmp_path / "a"
        b = tmp_path / "b"
        monkeypatch.setenv("DSQ_SEED", "7")
        assert main(["gen-data", "--out", str(a)] + sets()) == 0
        monkeypatch.delenv("DSQ_SEED")
        assert main(["gen-data", "--out", str(b)] + sets("seed=7")) == 0
        ta = sorted((a / "text").iterdir())
        tb = sorted((b / "text").iterdir())
        assert [p.read_text() for p in ta] == [p.read_text() for p in tb]


class TestUsageErrors:
    def test_no_subcommand(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 1

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit) as exc:
            main(["transcode"])
        assert exc.value.code == 1

    def test_missing_required_flag(self):
        with pytest.raises(SystemExit) as exc:
            main(["gen-data"])
        assert exc.value.code == 1


class TestTrainLm:
    def test_run_directory_contents(self, lm_run):
        for name in ("lm.ckpt", "metrics.tsv", "vocab.json", "config.txt"):
            assert (lm_run / name).exists()
        assert len((lm_run / "metrics.tsv").read_text().splitlines()) == 1

    def test_missing_corpus_is_data_error(self, workdir):
        code = main(["train-lm", "--corpus", str(workdir / "nope.manifest"),
                     "--out", str(workdir / "lmx")] + sets())
        assert code == 2


class TestTrainAsr:
    def test_checkpoint_reloads(self, asr_run):
        model, vocab, stats = load_asr_checkpoint(asr_run / "asr.ckpt")
        assert model.vocab_size == vocab.size
        assert stats.mean.shape == (5, 1)

    def test_kd_without_teacher_is_usage_error(self, corpus, workdir):
        code = main(["train-asr", "--corpus", str(corpus / "train.manifest"),
                     "--out", str(workdir / "kdx"), "--smoothing", "kd"]
                    + sets())
        assert code == 1

    def test_kd_trains_and_caches_teacher_outputs(self, corpus, lm_run,
                                                  workdir):
        out = workdir / "kd"
        code = main(["train-asr", "--corpus", str(corpus / "train.manifest"),
                     "--out", str(out), "--smoothing", "kd",
                     "--teacher", str(lm_run / "lm.ckpt")] + sets())
        assert code == 0
        cache = lm_run / "teacher_cache"
        files = sorted(cache.glob("*.dstc"))
        assert len(files) == 4
        stamps = [f.stat().st_mtime_ns for f in files]
        # second run must reuse the cache rather than rewrite it
        code = main(["train-asr", "--corpus", str(corpus / "train.manifest"),
                     "--out", str(workdir / "kd2"), "--smoothing", "kd",
                     "--teacher", str(lm_run / "lm.ckpt")] + sets())
        assert code == 0
        assert [f.stat().st_mtime_ns for f in files] == stamps

    def test_context_free_teacher_must_match_mode(self, corpus, lm_run,
                                                  workdir):
        code = main(["train-asr", "--corpus", str(corpus / "train.manifest"),
                     "--out", str(workdir / "kdcfx"),
                     "--smoothing", "kd-context-free",
                     "--teacher", str(lm_run / "lm.ckpt")] + sets())
        assert code == 2

    def test_context_free_pipeline(self, corpus, workdir):
        lmcf = workdir / "lmcf"
        code = main(["train-lm", "--corpus", str(corpus / "train.manifest"),
                     "--out", str(lmcf), "--context-free"] + sets())
        assert code == 0
        code = main(["train-asr", "--corpus", str(corpus / "train.manifest"),
                     "--out", str(workdir / "kdcf"),
                     "--smoothing", "kd-context-free",
                     "--teacher", str(lmcf / "lm.ckpt")] + sets())
        assert code == 0


class TestDecodeAndEval:
    @pytest.fixture(scope="class")
    def decoded(self, corpus, asr_run, workdir):
        out = workdir / "decode.tsv"
        code = main(["decode", "--ckpt", str(asr_run / "asr.ckpt"),
                     "--corpus", str(corpus / "valid.manifest"),
                     "--out", str(out)] + sets())
        assert code == 0
        return out

    def test_output_covers_the_corpus(self, decoded, corpus):
        decs = read_decode_output(decoded)
        valid = load_corpus(corpus / "valid.manifest")
        assert len(decs) == sum(len(s) for s in valid)

    def test_context_and_beam_flags(self, corpus, asr_run, workdir):
        for mode in ("oracle", "none"):
            out = workdir / f"decode_{mode}.tsv"
            code = main(["decode", "--ckpt", str(asr_run / "asr.ckpt"),
                         "--corpus", str(corpus / "valid.manifest"),
                         "--context", mode, "--beam", "1",
                         "--out", str(out)] + sets())
            assert code == 0

    def test_wrong_checkpoint_kind_is_data_error(self, corpus, lm_run,
                                                 workdir):
        code = main(["decode", "--ckpt", str(lm_run / "lm.ckpt"),
                     "--corpus", str(corpus / "valid.manifest"),
                     "--out", str(workdir / "x.tsv")] + sets())
        assert code == 2

    def test_missing_checkpoint_is_data_error(self, corpus, workdir):
        code = main(["decode", "--ckpt", str(workdir / "ghost.ckpt"),
                     "--corpus", str(corpus / "valid.manifest"),
                     "--out", str(workdir / "x.tsv")] + sets())
        assert code == 2

    def test_eval_against_manifest(self, decoded, corpus, capsys):
        code = main(["eval", "--hyp", str(decoded),
                     "--ref", str(corpus / "valid.manifest")])
        assert code == 0
        assert "CER" in capsys.readouterr().out

    def test_eval_against_decode_format(self, decoded, capsys):
        code = main(["eval", "--hyp", str(decoded), "--ref", str(decoded)])
        assert code == 0
        assert "CER 0.000000" in capsys.readouterr().out

    def test_eval_mismatched_corpora_is_data_error(self, decoded, corpus):
        code = main(["eval", "--hyp", str(decoded),
                     "--ref", str(corpus / "test.manifest")])
        assert code == 2

    def test_eval_malformed_hypothesis_file(self, workdir, corpus):
        bad = workdir / "bad.tsv"
        bad.write_text("no-tabs-here\n", encoding="utf-8")
        code = main(["eval", "--hyp", str(bad),
                     "--ref", str(corpus / "valid.manifest")])
        assert code == 2


class TestGradcheckCommand:
    def test_suite_passes(self, capsys):
        assert main(["gradcheck"]) == 0
        assert "suite PASS" in capsys.readouterr().out
