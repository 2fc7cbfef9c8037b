"""Run configuration: dotted-key text files plus command-line overrides.

Config files hold one assignment per line, ``section.field = value`` (# and
blank lines skipped), e.g.::

    model.d = 32
    training.peak_lr = 0.002
    training.augment.n_time_masks = 1
    decode.beam_size = 4
    synth.ambiguity_rate = 0.3
    seed = 7

``seed`` fans out to training.seed and synth.seed unless those are set
explicitly; the DSQ_SEED environment variable overrides every seed. Unknown
keys are rejected. Overrides passed on the command line use the same
``key=value`` form and win over file values.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Tuple

from .data import SynthTaskConfig
from .decoding import DecodeConfig
from .model import ModelConfig
from .training import TrainingConfig


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    synth: SynthTaskConfig = field(default_factory=SynthTaskConfig)
    seed: int = 0
    numeric_mode: str = "fast"     # training/decoding mode; checks use verify


class ConfigError(ValueError):
    pass


def _parse_value(raw: str, typ):
    raw = raw.strip()
    if typ is bool:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if typ is int:
        return int(raw)
    if typ is float:
        return float(raw)
    return raw


def _set_dotted(cfg: RunConfig, key: str, raw: str) -> None:
    parts = key.split(".")
    obj = cfg
    for p in parts[:-1]:
        if not dataclasses.is_dataclass(obj) or p not in {
                f.name for f in dataclasses.fields(obj)}:
            raise ConfigError(f"unknown config key {key!r}")
        obj = getattr(obj, p)
    leaf = parts[-1]
    if not dataclasses.is_dataclass(obj):
        raise ConfigError(f"unknown config key {key!r}")
    for f in dataclasses.fields(obj):
        if f.name == leaf:
            if dataclasses.is_dataclass(getattr(obj, leaf)):
                raise ConfigError(f"{key!r} names a section, not a value")
            typ = _FIELD_TYPES[(type(obj).__name__, leaf)]
            setattr(obj, leaf, _parse_value(raw, typ))
            return
    raise ConfigError(f"unknown config key {key!r}")


# `from __future__ import annotations` turns field types into strings in the
# owning modules, so keep an explicit name -> type map for value parsing.
def _build_field_types():
    out = {}
    for klass in (RunConfig, ModelConfig, TrainingConfig, DecodeConfig,
                  SynthTaskConfig):
        proto = klass()
        for f in dataclasses.fields(proto):
            val = getattr(proto, f.name)
            if not dataclasses.is_dataclass(val):
                out[(klass.__name__, f.name)] = type(val)
    from .training import SpecAugmentConfig
    proto = SpecAugmentConfig()
    for f in dataclasses.fields(proto):
        out[("SpecAugmentConfig", f.name)] = type(getattr(proto, f.name))
    return out


_FIELD_TYPES = _build_field_types()


def _parse_lines(lines: Iterable[str], source: str) -> List[Tuple[str, str]]:
    out = []
    for i, line in enumerate(lines, 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{i}: expected 'key = value', got {line!r}")
        key, _, val = stripped.partition("=")
        out.append((key.strip(), val.strip()))
    return out


def load_run_config(path: Optional[str] = None,
                    overrides: Iterable[str] = ()) -> RunConfig:
    """Build a RunConfig from an optional file plus key=value overrides."""
    cfg = RunConfig()
    pairs: List[Tuple[str, str]] = []
    if path is not None:
        pairs += _parse_lines(
            Path(path).read_text(encoding="utf-8").splitlines(), str(path))
    pairs += _parse_lines(overrides, "override")
    explicit = set()
    for key, val in pairs:
        _set_dotted(cfg, key, val)
        explicit.add(key)
    if "seed" in explicit:
        if "training.seed" not in explicit:
            cfg.training.seed = cfg.seed
        if "synth.seed" not in explicit:
            cfg.synth.seed = cfg.seed
    env_seed = os.environ.get("DSQ_SEED")
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"DSQ_SEED must be an integer, got {env_seed!r}")
        cfg.seed = seed
        cfg.training.seed = seed
        cfg.synth.seed = seed
    _revalidate(cfg)
    return cfg


def _revalidate(cfg: RunConfig) -> None:
    # setattr bypasses __post_init__ checks; replace() reruns them
    cfg.model = dataclasses.replace(cfg.model)
    cfg.training = dataclasses.replace(
        cfg.training, augment=dataclasses.replace(cfg.training.augment))
    cfg.decode = dataclasses.replace(cfg.decode)
    cfg.synth = dataclasses.replace(cfg.synth)
    if cfg.numeric_mode not in ("fast", "verify"):
        raise ConfigError(f"numeric_mode must be fast or verify, "
                          f"got {cfg.numeric_mode!r}")


def format_config(cfg: RunConfig) -> str:
    """Dotted-key dump; reloading it reproduces the same RunConfig."""
    lines: List[str] = []

    def walk(obj, prefix):
        for f in dataclasses.fields(obj):
            val = getattr(obj, f.name)
            key = f"{prefix}{f.name}"
            if dataclasses.is_dataclass(val):
                walk(val, key + ".")
            else:
                lines.append(f"{key} = {val}")

    walk(cfg, "")
    return "".join(l + "\n" for l in sorted(lines))
