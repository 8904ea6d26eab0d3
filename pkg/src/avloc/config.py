"""Run configuration: defaults, YAML loading, schema validation, hashing.

A config file overrides defaults field by field; unknown sections or keys,
type mismatches, and out-of-range values are all collected so one failed
load reports every offending field at once.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .datagen import DatagenConfig
from .encoders import EncoderConfig, default_config, paper_scale_config
from .evaluation import EvalConfig
from .loss import LossConfig

ENCODER_PRESETS = ("default", "paper")


class ConfigError(ValueError):
    """Validation failure; the message lists every offending field."""


@dataclass
class DataPaths:
    dir: str = "data/default"
    train_manifest: str = "train.txt"
    eval_manifest: str = "test_seen.txt"

    def validate(self) -> list:
        problems = []
        for name in ("dir", "train_manifest", "eval_manifest"):
            value = getattr(self, name)
            if not isinstance(value, str) or not value:
                problems.append(f"data.{name} must be a non-empty string")
        return problems


@dataclass
class OptimConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> list:
        problems = []
        if not self.lr > 0:
            problems.append(f"optim.lr must be > 0, got {self.lr}")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                problems.append(f"optim.{name} must lie in [0, 1), got {v}")
        if not self.eps > 0:
            problems.append(f"optim.eps must be > 0, got {self.eps}")
        return problems


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    checkpoint_every: int = 500
    # training consumes a center crop; the tones span the whole clip, so a
    # shorter window halves audio-stream cost without losing class evidence
    audio_seconds: float = 1.5
    # contrastive group per loss term; the easy-negative sum grows with group
    # size while the positive term does not, so groups must stay small relative
    # to the class count or same-class collisions outweigh the positive signal
    loss_group_size: int = 4

    def validate(self) -> list:
        problems = []
        if self.steps < 1:
            problems.append(f"train.steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            problems.append(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.loss_group_size < 2:
            problems.append(
                f"train.loss_group_size must be >= 2, got {self.loss_group_size}"
            )
        if self.checkpoint_every < 1:
            problems.append(
                f"train.checkpoint_every must be >= 1, got {self.checkpoint_every}"
            )
        if not self.audio_seconds > 0:
            problems.append(
                f"train.audio_seconds must be > 0, got {self.audio_seconds}"
            )
        return problems


@dataclass
class AblateConfig:
    num_seeds: int = 5
    first_seed: int = 0

    def validate(self) -> list:
        problems = []
        if self.num_seeds < 1:
            problems.append(f"ablate.num_seeds must be >= 1, got {self.num_seeds}")
        if self.first_seed < 0:
            problems.append(f"ablate.first_seed must be >= 0, got {self.first_seed}")
        return problems


@dataclass
class RunConfig:
    run_dir: str = "runs/default"
    seed: int = 0
    encoder_preset: str = "default"
    data: DataPaths = field(default_factory=DataPaths)
    datagen: DatagenConfig = field(default_factory=DatagenConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    def encoder_config(self) -> EncoderConfig:
        return default_config() if self.encoder_preset == "default" else paper_scale_config()


# section name -> (dataclass attribute, field name -> expected type)
_SCHEMA = {
    "data": (
        "data",
        {"dir": str, "train_manifest": str, "eval_manifest": str},
    ),
    "datagen": (
        "datagen",
        {
            "num_classes": int,
            "seen_fraction": float,
            "train_per_class": int,
            "test_per_class": int,
            "image_size": int,
            "texture_size": int,
            "patch_min": int,
            "patch_max": int,
            "min_distractors": int,
            "max_distractors": int,
            "seconds": float,
            "rate": int,
            "snr_db": (float, type(None)),
        },
    ),
    "loss": (
        "loss",
        {
            "eps_pos": float,
            "eps_neg": float,
            "temperature": float,
            "include_hard_negatives": bool,
            "include_easy_negatives": bool,
            "normalize_easy": bool,
            "mode": str,
        },
    ),
    "optim": (
        "optim",
        {"lr": float, "beta1": float, "beta2": float, "eps": float},
    ),
    "train": (
        "train",
        {
            "steps": int,
            "batch_size": int,
            "checkpoint_every": int,
            "audio_seconds": float,
            "loss_group_size": int,
        },
    ),
    "eval": (
        "eval",
        {"seconds": float, "consensus": int, "threshold": float},
    ),
    "ablate": ("ablate", {"num_seeds": int, "first_seed": int}),
}

_TOP_LEVEL = {"run_dir": str, "seed": int, "encoder": dict}


def _check_type(value, expected) -> bool:
    kinds = expected if isinstance(expected, tuple) else (expected,)
    for kind in kinds:
        if kind is float:
            if isinstance(value, (int, float)) and not isinstance(value, bool):
                return True
        elif kind is int:
            if isinstance(value, int) and not isinstance(value, bool):
                return True
        elif kind is type(None):
            if value is None:
                return True
        elif isinstance(value, kind):
            return True
    return False


def _type_name(expected) -> str:
    kinds = expected if isinstance(expected, tuple) else (expected,)
    return " or ".join("null" if k is type(None) else k.__name__ for k in kinds)


def load_run_config(path=None) -> RunConfig:
    """Defaults, overridden field-wise by a YAML file when given."""
    cfg = RunConfig()
    problems = []
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")
        for key in sorted(set(raw) - set(_SCHEMA) - set(_TOP_LEVEL)):
            problems.append(f"unknown section or key {key!r}")
        if "run_dir" in raw:
            if _check_type(raw["run_dir"], str):
                cfg.run_dir = raw["run_dir"]
            else:
                problems.append("run_dir must be a string")
        if "seed" in raw:
            if _check_type(raw["seed"], int) and raw["seed"] >= 0:
                cfg.seed = raw["seed"]
            else:
                problems.append(f"seed must be a non-negative integer, got {raw['seed']!r}")
        if "encoder" in raw:
            section = raw["encoder"]
            if not isinstance(section, dict):
                problems.append("encoder must be a mapping with a 'preset' key")
            else:
                for key in sorted(set(section) - {"preset"}):
                    problems.append(f"unknown key encoder.{key}")
                preset = section.get("preset", cfg.encoder_preset)
                if preset in ENCODER_PRESETS:
                    cfg.encoder_preset = preset
                else:
                    problems.append(
                        f"encoder.preset must be one of {ENCODER_PRESETS}, got {preset!r}"
                    )
        for section_name, (attr, fields) in _SCHEMA.items():
            if section_name not in raw:
                continue
            section = raw[section_name]
            if not isinstance(section, dict):
                problems.append(f"{section_name} must be a mapping")
                continue
            for key in sorted(set(section) - set(fields)):
                problems.append(f"unknown key {section_name}.{key}")
            updates = {}
            for key, expected in fields.items():
                if key not in section:
                    continue
                value = section[key]
                if _check_type(value, expected):
                    if expected is float and value is not None:
                        value = float(value)
                    updates[key] = value
                else:
                    problems.append(
                        f"{section_name}.{key} must be {_type_name(expected)}, "
                        f"got {value!r}"
                    )
            if updates:
                setattr(cfg, attr, replace(getattr(cfg, attr), **updates))

    problems += cfg.data.validate()
    problems += cfg.optim.validate()
    problems += cfg.train.validate()
    problems += cfg.ablate.validate()
    for section, name in ((cfg.datagen, "datagen"), (cfg.loss, "loss"), (cfg.eval, "eval")):
        try:
            section.validate()
        except ValueError as err:
            text = str(err)
            for prefix in ("invalid datagen config: ", "invalid loss config: ",
                           "invalid eval config: "):
                text = text.replace(prefix, "")
            problems += [f"{name}: {p}" for p in text.split("; ")]
    if problems:
        raise ConfigError(
            "config validation failed:\n" + "\n".join(f"  - {p}" for p in problems)
        )
    return cfg


def config_hash(cfg: RunConfig) -> str:
    """Architecture fingerprint: checkpoints refuse to load under a
    different encoder geometry. Only the encoder section participates."""
    return hashlib.sha256(repr(cfg.encoder_config()).encode("ascii")).hexdigest()


def hash_to_tensor(hex_digest: str) -> np.ndarray:
    return np.frombuffer(bytes.fromhex(hex_digest), dtype=np.uint8).astype(np.float64)


def tensor_to_hash(arr: np.ndarray) -> str:
    return bytes(int(b) for b in arr.astype(np.uint8)).hex()


def to_dict(cfg: RunConfig) -> dict:
    """Plain nested dict, suitable for yaml.safe_dump."""
    return {
        "run_dir": cfg.run_dir,
        "seed": cfg.seed,
        "encoder": {"preset": cfg.encoder_preset},
        "data": vars(cfg.data).copy(),
        "datagen": vars(cfg.datagen).copy(),
        "loss": vars(cfg.loss).copy(),
        "optim": vars(cfg.optim).copy(),
        "train": vars(cfg.train).copy(),
        "eval": {
            "seconds": cfg.eval.seconds,
            "consensus": cfg.eval.consensus,
            "threshold": cfg.eval.threshold,
        },
        "ablate": vars(cfg.ablate).copy(),
    }


def save_run_config(cfg: RunConfig, path) -> None:
    text = yaml.safe_dump(to_dict(cfg), sort_keys=True, default_flow_style=False)
    Path(path).write_text(text, encoding="utf-8")
