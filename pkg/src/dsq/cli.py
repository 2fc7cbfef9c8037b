"""Command-line entry point.

Subcommands cover the batch workflow end to end: synthesize a corpus,
train the language model and the transcription model, decode, score, and
run the finite-difference verification suite. Every run directory gets an
echo of the effective configuration so it can be reproduced exactly.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import tensor as T
from .checkpoint import (load_checkpoint, load_module_arrays, module_arrays,
                         save_checkpoint)
from .config import ConfigError, RunConfig, format_config, load_run_config
from .data import (BOS_ID, RESERVED_TOKENS, DiscourseSample, Vocabulary,
                   build_vocab, generate_synthetic_corpus, load_corpus,
                   save_corpus)
from .decoding import decode_corpus, read_decode_output, write_decode_output
from .lm import (ContextLm, read_teacher_cache, teacher_distributions,
                 write_teacher_cache)
from .metrics import references_of, score_corpus
from .model import ModelConfig, build_asr_model, build_lm
from .speech_encoder import FeatureStats, compute_feature_stats
from .training import train_asr, train_lm, write_metrics_log
from .verify import gradient_suite

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; the contract reserves 2 for
    # data problems, so route them to 1 instead
    def error(self, message):
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    p = _Parser(prog="dsq", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None,
                        help="settings file with 'dotted.key = value' lines")
        sp.add_argument("--set", action="append", default=[], metavar="K=V",
                        help="override one settings key (repeatable)")

    g = sub.add_parser("gen-data", help="write a synthetic lecture corpus")
    common(g)
    g.add_argument("--out", required=True, help="output corpus directory")
    g.add_argument("--force", action="store_true",
                   help="overwrite an existing corpus")

    tl = sub.add_parser("train-lm", help="train the discourse language model")
    common(tl)
    tl.add_argument("--corpus", required=True, help="training split manifest")
    tl.add_argument("--valid", default=None,
                    help="validation manifest (default: sibling valid.manifest)")
    tl.add_argument("--out", required=True, help="run directory")
    tl.add_argument("--context-free", action="store_true",
                    help="ablation: ignore discourse history")

    ta = sub.add_parser("train-asr", help="train the transcription model")
    common(ta)
    ta.add_argument("--corpus", required=True, help="training split manifest")
    ta.add_argument("--valid", default=None,
                    help="validation manifest (default: sibling valid.manifest)")
    ta.add_argument("--out", required=True, help="run directory")
    ta.add_argument("--smoothing", default="none",
                    choices=["none", "label", "kd", "kd-context-free"])
    ta.add_argument("--teacher", default=None,
                    help="language-model checkpoint (required for kd modes)")

    d = sub.add_parser("decode", help="transcribe a corpus with a checkpoint")
    common(d)
    d.add_argument("--ckpt", required=True)
    d.add_argument("--corpus", required=True)
    d.add_argument("--beam", type=int, default=None)
    d.add_argument("--context", default=None,
                   choices=["hypothesis", "oracle", "none"])
    d.add_argument("--out", required=True, help="decode output file")

    e = sub.add_parser("eval", help="score decode output against references")
    e.add_argument("--hyp", required=True, help="decode output file")
    e.add_argument("--ref", required=True,
                   help="reference manifest or decode-format file")

    gc = sub.add_parser("gradcheck", help="run the finite-difference suite")
    common(gc)
    return p


def _load_cfg(args) -> RunConfig:
    return load_run_config(args.config, args.set)


def _valid_manifest(args) -> Path:
    if args.valid is not None:
        return Path(args.valid)
    return Path(args.corpus).with_name("valid.manifest")


def _write_run_files(out: Path, cfg: RunConfig, rows, vocab: Vocabulary) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(cfg), encoding="utf-8")
    write_metrics_log(out / "metrics.tsv", rows)
    vocab.save(out / "vocab.json")


def _cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out)
    manifests = [out / f"{n}.manifest" for n in ("train", "valid", "test")]
    if any(m.exists() for m in manifests) and not args.force:
        raise FileExistsError(
            f"{out}: corpus already present; pass --force to overwrite")
    train, valid, test = generate_synthetic_corpus(cfg.synth)
    out.mkdir(parents=True, exist_ok=True)
    for name, split in (("train", train), ("valid", valid), ("test", test)):
        save_corpus(out, name, split)
    (out / "config.txt").write_text(format_config(cfg), encoding="utf-8")
    print(f"wrote {len(train)}/{len(valid)}/{len(test)} "
          f"train/valid/test discourses to {out}")
    return EXIT_OK


def _load_split(path) -> List[DiscourseSample]:
    samples = load_corpus(path)
    if not samples:
        raise ValueError(f"{path}: empty corpus")
    return samples


def _cmd_train_lm(args) -> int:
    cfg = _load_cfg(args)
    T.set_mode(cfg.numeric_mode)
    train_samples = _load_split(args.corpus)
    valid_samples = _load_split(_valid_manifest(args))
    vocab = build_vocab([t for s in train_samples for t in s.texts])
    lm = build_lm(cfg.model, vocab.size, cfg.training.seed,
                  context_free=args.context_free)
    result = train_lm(lm, train_samples, valid_samples, vocab, cfg.training)
    out = Path(args.out)
    _write_run_files(out, cfg, result.rows, vocab)
    blob = {"kind": "lm", "model": asdict(cfg.model),
            "vocab": vocab.id_to_token, "context_free": args.context_free}
    save_checkpoint(out / "lm.ckpt", blob, module_arrays(lm))
    ppl = float(np.exp(result.best_valid))
    print(f"best valid perplexity {ppl:.4f} at epoch {result.best_epoch}; "
          f"checkpoint {out / 'lm.ckpt'}")
    return EXIT_OK


def _load_lm_checkpoint(path) -> tuple:
    blob, arrays, _ = load_checkpoint(path)
    if blob.get("kind") != "lm":
        raise ValueError(f"{path}: not a language-model checkpoint")
    vocab = Vocabulary(blob["vocab"][len(RESERVED_TOKENS):])
    lm = build_lm(ModelConfig(**blob["model"]), vocab.size, 0,
                  context_free=blob["context_free"])
    load_module_arrays(lm, arrays)
    lm.eval()
    return lm, vocab, bool(blob["context_free"])


def _teacher_table(teacher_path, samples: List[DiscourseSample],
                   vocab: Vocabulary, want_context_free: bool
                   ) -> Dict[str, List[np.ndarray]]:
    lm, lm_vocab, is_context_free = _load_lm_checkpoint(teacher_path)
    if lm_vocab.hash() != vocab.hash():
        raise ValueError("teacher checkpoint vocabulary does not match corpus")
    if is_context_free != want_context_free:
        kind = "context-free" if is_context_free else "context-dependent"
        raise ValueError(f"teacher checkpoint is {kind}; wrong smoothing mode")
    cache_dir = Path(teacher_path).parent / "teacher_cache"
    table: Dict[str, List[np.ndarray]] = {}
    for s in samples:
        cpath = cache_dir / f"{s.lecture_id}.dstc"
        if cpath.exists():
            table[s.lecture_id] = read_teacher_cache(cpath, vocab.hash())
            continue
        texts = [vocab.encode(t, append_eos=True) for t in s.texts]
        dists = teacher_distributions(lm, texts, BOS_ID)
        table[s.lecture_id] = dists
        try:
            cache_dir.mkdir(parents=True, exist_ok=True)
            write_teacher_cache(cpath, dists, vocab.hash())
        except OSError:
            pass                       # cache is an optimization only
    return table


def _cmd_train_asr(args) -> int:
    cfg = _load_cfg(args)
    T.set_mode(cfg.numeric_mode)
    train_samples = _load_split(args.corpus)
    valid_samples = _load_split(_valid_manifest(args))
    vocab = build_vocab([t for s in train_samples for t in s.texts])
    stats = compute_feature_stats(
        [f for s in train_samples for f in s.features])

    smoothing = args.smoothing
    teacher = None
    if smoothing in ("kd", "kd-context-free"):
        if args.teacher is None:
            raise ConfigError(f"--smoothing {smoothing} requires --teacher")
        teacher = _teacher_table(args.teacher, train_samples, vocab,
                                 want_context_free=(smoothing == "kd-context-free"))
        smoothing = "kd"

    model = build_asr_model(cfg.model, vocab.size, cfg.training.seed)
    result = train_asr(model, train_samples, valid_samples, vocab,
                       cfg.training, stats, smoothing, teacher)
    out = Path(args.out)
    _write_run_files(out, cfg, result.rows, vocab)
    arrays = dict(module_arrays(model))
    arrays["featstats.mean"] = stats.mean
    arrays["featstats.std"] = stats.std
    blob = {"kind": "asr", "model": asdict(cfg.model),
            "vocab": vocab.id_to_token, "smoothing": args.smoothing}
    save_checkpoint(out / "asr.ckpt", blob, arrays)
    print(f"best valid loss {result.best_valid:.6f} at epoch "
          f"{result.best_epoch}; checkpoint {out / 'asr.ckpt'}")
    return EXIT_OK


def load_asr_checkpoint(path):
    """Rebuild (model, vocab, stats) from a transcription checkpoint."""
    blob, arrays, _ = load_checkpoint(path)
    if blob.get("kind") != "asr":
        raise ValueError(f"{path}: not a transcription checkpoint")
    vocab = Vocabulary(blob["vocab"][len(RESERVED_TOKENS):])
    model = build_asr_model(ModelConfig(**blob["model"]), vocab.size, 0)
    params = {k: v for k, v in arrays.items() if not k.startswith("featstats.")}
    load_module_arrays(model, params)
    stats = FeatureStats(mean=arrays["featstats.mean"],
                         std=arrays["featstats.std"])
    model.eval()
    return model, vocab, stats


def _cmd_decode(args) -> int:
    cfg = _load_cfg(args)
    T.set_mode(cfg.numeric_mode)
    model, vocab, stats = load_asr_checkpoint(args.ckpt)
    samples = _load_split(args.corpus)
    dcfg = cfg.decode
    if args.beam is not None:
        dcfg = replace(dcfg, beam_size=args.beam)
    if args.context is not None:
        dcfg = replace(dcfg, context_mode=args.context)
    decodes = decode_corpus(model, samples, vocab, dcfg, stats)
    write_decode_output(args.out, decodes)
    print(f"decoded {len(decodes)} utterances to {args.out}")
    return EXIT_OK


def _read_references(path) -> Dict:
    """References from a manifest or another decode-format file."""
    first = ""
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            first = line
            break
    parts = first.split("\t")
    if len(parts) >= 2 and parts[1].isdigit():
        return read_decode_output(path)
    return references_of(load_corpus(path))


def _cmd_eval(args) -> int:
    hyp = read_decode_output(args.hyp)
    ref = _read_references(args.ref)
    cer = score_corpus(hyp, ref)
    print(f"CER {cer:.6f}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    _load_cfg(args)                    # validate settings if given
    res = gradient_suite()
    print("\n".join(res.lines()))
    return EXIT_OK if res.passed else EXIT_NUMERIC


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train-lm": _cmd_train_lm,
    "train-asr": _cmd_train_asr,
    "decode": _cmd_decode,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"dsq: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except T.NumericError as exc:
        print(f"dsq: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as exc:
        print(f"dsq: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
