"""Experiment configuration: every knob and every seed in one place.

All randomness in a run flows from the named seeds here; the configuration
hash covers exactly the fields that affect numerics, so two configs with the
same hash produce bit-identical runs. ``out_dir`` is cosmetic (where results
land) and is excluded from the hash.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping

__all__ = [
    "VARIANTS",
    "StageSettings",
    "ExperimentConfig",
    "config_to_dict",
    "config_from_dict",
    "config_hash",
    "config_diff",
]

VARIANTS = ("full", "no-moe", "no-aux-losses", "conventional-balance")
TRANSITION_MODES = ("mixed", "sampled")

# fields that do not change any computed number; excluded from the hash
COSMETIC_FIELDS = ("out_dir",)


@dataclass(frozen=True)
class StageSettings:
    total_batches: int
    batch_size: int
    learning_rate: float

    def __post_init__(self) -> None:
        if self.total_batches < 1:
            raise ValueError(f"total_batches must be >= 1, got {self.total_batches}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")


@dataclass(frozen=True)
class ExperimentConfig:
    # synthetic world
    num_languages: int = 2
    d_in: int = 16
    separation: float = 6.0
    noise_sigma: float = 0.1
    vocab_per_lang: int = 64
    token_margin: float = 3.0
    utterance_length: int = 12
    cs_switches: int = 1
    # dataset sizes (per language for ASR/ST; total for CS)
    train_utterances: int = 400
    val_utterances: int = 64
    # model
    d_model: int = 32
    num_layers: int = 3
    experts_per_group: int = 3
    top_k: int = 3
    prompt_len: int = 4
    # per-stage training settings; a long stage 1 builds strong per-language
    # projectors whose transfer the later stages exploit
    stage1: StageSettings = field(default_factory=lambda: StageSettings(200, 8, 3e-3))
    stage2: StageSettings = field(default_factory=lambda: StageSettings(150, 8, 3e-3))
    stage3: StageSettings = field(default_factory=lambda: StageSettings(100, 8, 3e-3))
    stage4: StageSettings = field(default_factory=lambda: StageSettings(60, 8, 3e-3))
    # behavior
    variant: str = "full"
    transition_mode: str = "mixed"
    normalize_aux: bool = False
    lang_weight: float = 1.0
    balance_weight: float = 10.0
    # seeds (world geometry, dataset draws, initialization + batch order)
    world_seed: int = 0
    data_seed: int = 0
    train_seed: int = 0
    # cosmetic
    out_dir: str = "runs/default"

    def __post_init__(self) -> None:
        if self.num_languages < 2:
            raise ValueError(f"num_languages must be >= 2, got {self.num_languages}")
        if self.d_in < self.num_languages:
            raise ValueError(
                f"d_in={self.d_in} must be >= num_languages={self.num_languages}"
            )
        if self.top_k < 1 or self.top_k > self.experts_per_group * self.num_languages:
            raise ValueError(
                f"top_k={self.top_k} out of range for "
                f"{self.experts_per_group * self.num_languages} experts"
            )
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.transition_mode not in TRANSITION_MODES:
            raise ValueError(
                f"transition_mode must be one of {TRANSITION_MODES}, got {self.transition_mode!r}"
            )
        if self.utterance_length < self.cs_switches + 1:
            raise ValueError(
                f"utterance_length={self.utterance_length} too short for "
                f"cs_switches={self.cs_switches}"
            )
        for name in ("world_seed", "data_seed", "train_seed"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("train_utterances", "val_utterances"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def total_experts(self) -> int:
        return self.num_languages * self.experts_per_group

    @property
    def target_vocab_size(self) -> int:
        return (self.num_languages + 1) * self.vocab_per_lang

    def stage_settings(self, stage_id: int) -> StageSettings:
        return {1: self.stage1, 2: self.stage2, 3: self.stage3, 4: self.stage4}[stage_id]


def config_to_dict(config: ExperimentConfig) -> dict:
    return asdict(config)


def config_from_dict(data: Mapping) -> ExperimentConfig:
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown config fields: {sorted(unknown)}")
    kwargs = dict(data)
    for name in ("stage1", "stage2", "stage3", "stage4"):
        if name in kwargs and isinstance(kwargs[name], Mapping):
            kwargs[name] = StageSettings(**kwargs[name])
    return ExperimentConfig(**kwargs)


def config_hash(config: ExperimentConfig) -> str:
    """Hex digest over every numerics-affecting field, in canonical order."""
    payload = config_to_dict(config)
    for name in COSMETIC_FIELDS:
        payload.pop(name, None)
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def config_diff(a: ExperimentConfig, b: ExperimentConfig) -> list[str]:
    """Human-readable list of non-cosmetic fields on which two configs differ."""
    da, db = config_to_dict(a), config_to_dict(b)
    lines = []
    for name in sorted(da):
        if name in COSMETIC_FIELDS:
            continue
        if da[name] != db[name]:
            lines.append(f"{name}: {da[name]!r} != {db[name]!r}")
    return lines
