"""Corpus representation, synthetic discourse generation, vocabulary, file IO.

The synthetic task is built so that discourse context carries real
information: every discourse has a latent topic, the first utterance states
it with a topic-marker character, and later utterances contain "confusable"
slots whose acoustic signature is shared by one character per topic. Without
the discourse history those slots are irreducibly ambiguous (the Bayes error
of any context-free decoder is ambiguity_rate * (1 - 1/n_topics) on
utterances after the first); with the history they are fully determined.

Character tokens are deliberately cheap: each token emits frames_per_token
copies of its unit signature plus Gaussian noise, so time subsampling sees
4x frames while reference lengths stay small.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

FEATURE_MAGIC = b"DSFX"
FEATURE_VERSION = 1

_ALPHABET = ("ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz"
             "0123456789")


class Vocabulary:
    """Character <-> id table with fixed reserved ids 0..3."""

    def __init__(self, chars: Sequence[str]):
        for c in chars:
            if len(c) != 1:
                raise ValueError(f"vocabulary entries must be single characters: {c!r}")
        if sorted(set(chars)) != list(chars):
            raise ValueError("characters must be unique and code-point sorted")
        self.id_to_token: List[str] = list(RESERVED_TOKENS) + list(chars)
        self.token_to_id: Dict[str, int] = {
            t: i for i, t in enumerate(self.id_to_token)}

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def encode(self, text: str, append_eos: bool = False) -> List[int]:
        ids = [self.token_to_id.get(c, UNK_ID) for c in text]
        if append_eos:
            ids.append(EOS_ID)
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        out = []
        for i in ids:
            if i < len(RESERVED_TOKENS):
                continue
            out.append(self.id_to_token[i])
        return "".join(out)

    def hash(self) -> bytes:
        blob = json.dumps(self.id_to_token, ensure_ascii=False).encode("utf-8")
        return hashlib.sha256(blob).digest()

    def save(self, path) -> None:
        Path(path).write_text(
            json.dumps(self.id_to_token, ensure_ascii=False, indent=0),
            encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        toks = json.loads(Path(path).read_text(encoding="utf-8"))
        if toks[:4] != list(RESERVED_TOKENS):
            raise ValueError(f"{path}: malformed vocabulary file")
        return cls(toks[4:])


def build_vocab(texts: Sequence[str]) -> Vocabulary:
    chars = sorted({c for t in texts for c in t})
    if not chars:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    return Vocabulary(chars)


@dataclass
class DiscourseSample:
    """One lecture: ordered utterances as (features (f, M), reference text)."""

    lecture_id: str
    features: List[np.ndarray]
    texts: List[str]

    def __post_init__(self):
        if len(self.features) != len(self.texts) or not self.texts:
            raise ValueError("discourse needs matching, nonempty feature/text lists")
        for m, t in zip(self.features, self.texts):
            if m.ndim != 2 or m.shape[1] < 4:
                raise ValueError("each utterance needs a (f, M>=4) feature matrix")
            if len(t) < 1:
                raise ValueError("each utterance needs a nonempty reference")

    def __len__(self) -> int:
        return len(self.texts)


@dataclass
class SynthTaskConfig:
    vocab_size: int = 20
    n_topics: int = 4
    utterances_per_discourse: int = 5
    tokens_per_utterance: int = 6
    ambiguity_rate: float = 0.3
    feature_dim: int = 8
    noise_sigma: float = 0.1
    frames_per_token: int = 4
    n_train: int = 200
    n_valid: int = 24
    n_test: int = 24
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ambiguity_rate <= 1.0:
            raise ValueError("ambiguity_rate must lie in [0, 1]")
        if self.n_topics < 1 or self.vocab_size < 2 * self.n_topics + 1:
            raise ValueError("vocab_size too small for the requested topic count")
        for name in ("utterances_per_discourse", "tokens_per_utterance",
                     "feature_dim", "frames_per_token", "n_train", "n_valid",
                     "n_test"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass
class SynthWorld:
    """Character tables and acoustic unit signatures; derived from the seed."""

    topic_chars: str
    groups: List[str]          # each entry: one member character per topic
    filler_chars: str
    char_unit: Dict[str, int]  # character -> acoustic unit index
    signatures: np.ndarray     # (n_units, f)


def synth_world(cfg: SynthTaskConfig) -> SynthWorld:
    n_topics = cfg.n_topics
    budget = cfg.vocab_size - n_topics
    n_groups = max(1, budget // (2 * n_topics))
    n_fillers = budget - n_groups * n_topics
    if n_fillers < 1:
        raise ValueError("vocab_size leaves no room for unambiguous characters")
    need = n_topics + n_groups * n_topics + n_fillers
    alphabet = _ALPHABET
    if need > len(alphabet):
        alphabet = alphabet + "".join(chr(0x4E00 + i) for i in range(need))
    it = iter(alphabet)
    topic_chars = "".join(next(it) for _ in range(n_topics))
    groups = ["".join(next(it) for _ in range(n_topics)) for _ in range(n_groups)]
    filler_chars = "".join(next(it) for _ in range(n_fillers))

    char_unit: Dict[str, int] = {}
    unit = 0
    for c in topic_chars:
        char_unit[c] = unit
        unit += 1
    for g in groups:
        for c in g:            # whole group shares one signature
            char_unit[c] = unit
        unit += 1
    for c in filler_chars:
        char_unit[c] = unit
        unit += 1
    rng = np.random.default_rng([cfg.seed, 0])
    signatures = rng.standard_normal((unit, cfg.feature_dim))
    return SynthWorld(topic_chars, groups, filler_chars, char_unit, signatures)


def _emit_features(text: str, world: SynthWorld, cfg: SynthTaskConfig,
                   rng: np.random.Generator) -> np.ndarray:
    cols = []
    for c in text:
        sig = world.signatures[world.char_unit[c]]
        frames = sig[None, :] + rng.normal(0.0, cfg.noise_sigma,
                                           (cfg.frames_per_token, cfg.feature_dim))
        cols.append(frames.T)
    return np.concatenate(cols, axis=1)


def _gen_split(cfg: SynthTaskConfig, world: SynthWorld, n: int, name: str,
               stream: int) -> List[DiscourseSample]:
    rng = np.random.default_rng([cfg.seed, 1, stream])
    n_groups = len(world.groups)
    out = []
    for i in range(n):
        topic = int(rng.integers(cfg.n_topics))
        texts = []
        for t in range(cfg.utterances_per_discourse):
            chars = []
            if t == 0:
                chars.append(world.topic_chars[topic])
                for _ in range(cfg.tokens_per_utterance - 1):
                    chars.append(world.filler_chars[
                        int(rng.integers(len(world.filler_chars)))])
            else:
                for _ in range(cfg.tokens_per_utterance):
                    if rng.random() < cfg.ambiguity_rate:
                        g = int(rng.integers(n_groups))
                        chars.append(world.groups[g][topic])
                    else:
                        chars.append(world.filler_chars[
                            int(rng.integers(len(world.filler_chars)))])
            texts.append("".join(chars))
        feats = [_emit_features(t, world, cfg, rng) for t in texts]
        out.append(DiscourseSample(f"{name}{i:04d}", feats, texts))
    return out


def generate_synthetic_corpus(cfg: SynthTaskConfig
                              ) -> Tuple[List[DiscourseSample],
                                         List[DiscourseSample],
                                         List[DiscourseSample]]:
    world = synth_world(cfg)
    train = _gen_split(cfg, world, cfg.n_train, "train", 0)
    valid = _gen_split(cfg, world, cfg.n_valid, "valid", 1)
    test = _gen_split(cfg, world, cfg.n_test, "test", 2)
    return train, valid, test


def bayes_context_free_error(samples: Sequence[DiscourseSample],
                             cfg: SynthTaskConfig) -> float:
    """Error rate of the optimal per-token decoder that ignores discourse.

    Classifies each token slot of utterances after the first by exact
    posterior over characters given only that slot's frames (uniform topic
    prior, true emission model); ties break toward the lowest character.
    Confusable slots are unresolvable by construction, so this measures the
    context-free floor the generator was designed to enforce.
    """
    world = synth_world(cfg)
    chars = sorted(world.char_unit)
    prior = np.zeros(len(chars))
    n_groups = len(world.groups)
    for i, c in enumerate(chars):
        if c in world.filler_chars:
            prior[i] = (1.0 - cfg.ambiguity_rate) / len(world.filler_chars)
        elif any(c in g for g in world.groups):
            prior[i] = cfg.ambiguity_rate / (n_groups * cfg.n_topics)
        else:
            prior[i] = 0.0     # topic markers never appear after utterance 1
    units = np.array([world.char_unit[c] for c in chars])
    centers = world.signatures[units]              # (n_chars, f)

    errors = 0
    total = 0
    fpt = cfg.frames_per_token
    with np.errstate(under="ignore"):
        for s in samples:
            for feats, text in zip(s.features[1:], s.texts[1:]):
                for k, ref in enumerate(text):
                    x = feats[:, k * fpt:(k + 1) * fpt]        # (f, fpt)
                    d2 = ((x.T[:, None, :] - centers[None, :, :]) ** 2
                          ).sum(axis=(0, 2))                   # per-char distance
                    loglik = -d2 / (2.0 * cfg.noise_sigma ** 2)
                    post = loglik + np.log(np.maximum(prior, 1e-300))
                    best = int(np.argmax(post))    # argmax takes lowest index on ties
                    if chars[best] != ref:
                        errors += 1
                    total += 1
    return errors / max(total, 1)


# -- on-disk formats -------------------------------------------------------------


def write_feature_file(path, mats: Sequence[np.ndarray]) -> None:
    """Per-lecture binary: header then (M, frames-outer float32 LE) per utterance."""
    f = mats[0].shape[0]
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, f, len(mats)))
        for m in mats:
            if m.shape[0] != f:
                raise ValueError("inconsistent feature dimension within lecture")
            fh.write(struct.pack("<I", m.shape[1]))
            fh.write(np.ascontiguousarray(m.T, dtype="<f4").tobytes())


def read_feature_file(path) -> List[np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(4) != FEATURE_MAGIC:
            raise ValueError(f"{path}: not a feature file")
        version, f, count = struct.unpack("<III", fh.read(12))
        if version != FEATURE_VERSION:
            raise ValueError(f"{path}: unsupported feature file version {version}")
        mats = []
        for _ in range(count):
            (m,) = struct.unpack("<I", fh.read(4))
            raw = np.frombuffer(fh.read(4 * f * m), dtype="<f4")
            mats.append(raw.reshape(m, f).T.astype(np.float64))
    return mats


def write_transcript_file(path, texts: Sequence[str]) -> None:
    Path(path).write_text("".join(t + "\n" for t in texts), encoding="utf-8")


def read_transcript_file(path) -> List[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()


def save_corpus(out_dir, name: str, samples: Sequence[DiscourseSample]) -> Path:
    """Write features + transcripts + manifest for one split; returns manifest path."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "text").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        fpath = out / "features" / f"{s.lecture_id}.dsfx"
        tpath = out / "text" / f"{s.lecture_id}.txt"
        write_feature_file(fpath, s.features)
        write_transcript_file(tpath, s.texts)
        lines.append(f"{s.lecture_id}\t{fpath.relative_to(out)}\t{tpath.relative_to(out)}")
    manifest = out / f"{name}.manifest"
    manifest.write_text("".join(l + "\n" for l in lines), encoding="utf-8")
    return manifest


def load_corpus(manifest_path) -> List[DiscourseSample]:
    mpath = Path(manifest_path)
    base = mpath.parent
    samples = []
    for line in mpath.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{manifest_path}: malformed manifest line: {line!r}")
        lec, fpath, tpath = parts
        feats = read_feature_file(base / fpath)
        texts = read_transcript_file(base / tpath)
        if len(feats) != len(texts):
            raise ValueError(f"{lec}: feature/transcript utterance counts differ")
        samples.append(DiscourseSample(lec, feats, texts))
    return samples
