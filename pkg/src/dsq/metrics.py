"""Character error rate scoring."""

from __future__ import annotations

from typing import Dict, Sequence, Tuple

import numpy as np

from .kernels import levenshtein


def _codepoints(s: str) -> np.ndarray:
    return np.array([ord(c) for c in s], dtype=np.uint32)


def edit_distance(a: str, b: str) -> int:
    """Unit-cost Levenshtein distance between two strings."""
    return int(levenshtein(_codepoints(a), _codepoints(b)))


def compute_cer(hyp: str, ref: str) -> float:
    """Levenshtein distance over reference length; ref must be nonempty."""
    if len(ref) == 0:
        raise ValueError("reference must be nonempty")
    return edit_distance(hyp, ref) / len(ref)


def score_corpus(decodes: Dict[Tuple[str, int], str],
                 references: Dict[Tuple[str, int], str]) -> float:
    """Micro-average CER: total edit distance over total reference length.

    Both maps key on (lecture id, utterance index); every reference
    utterance must have a decode.
    """
    extra = set(decodes) - set(references)
    if extra:
        raise ValueError(f"decodes for unknown utterances: {sorted(extra)[:4]}")
    total_dist = 0
    total_len = 0
    for key, ref in references.items():
        if key not in decodes:
            raise ValueError(f"missing decode for utterance {key}")
        total_dist += edit_distance(decodes[key], ref)
        total_len += len(ref)
    if total_len == 0:
        raise ValueError("empty reference corpus")
    return total_dist / total_len


def references_of(samples) -> Dict[Tuple[str, int], str]:
    out = {}
    for s in samples:
        for i, t in enumerate(s.texts):
            out[(s.lecture_id, i)] = t
    return out
