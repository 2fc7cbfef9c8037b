"""Discourse-level speech transcription on a minimal numpy autodiff core.

The package trains and decodes a hierarchical encoder-decoder whose token
decoder attends over both the utterance's acoustics and a memory built from
all preceding utterance texts, plus the matching long-context language model
used as a distillation teacher.
"""

from . import tensor
from .config import RunConfig, load_run_config
from .data import SynthTaskConfig, Vocabulary, generate_synthetic_corpus
from .decoding import DecodeConfig, decode_corpus
from .metrics import compute_cer, edit_distance, score_corpus
from .model import AsrModel, ModelConfig, build_asr_model, build_lm
from .training import TrainingConfig, train_asr, train_lm

__version__ = "0.1.0"

__all__ = [
    "AsrModel", "DecodeConfig", "ModelConfig", "RunConfig", "SynthTaskConfig",
    "TrainingConfig", "Vocabulary", "build_asr_model", "build_lm",
    "compute_cer", "decode_corpus", "edit_distance",
    "generate_synthetic_corpus", "load_run_config", "score_corpus",
    "tensor", "train_asr", "train_lm", "__version__",
]
