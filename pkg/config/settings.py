"""
Application settings and run configuration: presets, the flat key table,
and the loader that merges preset, config file, STT_SEED and CLI overrides
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from pathlib import Path

from utils.alignment import LossConfig
from utils.encoders import EncoderConfig
from utils.errors import ValidationError
from utils.evaluation import EvalConfig
from utils.pairing import CurriculumSchedule, PairingConfig

# Page Configuration
PAGE_CONFIG = {
    "page_title": "Tactile Localization Workbench",
    "page_icon": "🖐️",
    "layout": "wide",
    "initial_sidebar_state": "expanded",
}

CUSTOM_CSS = """
    <style>
    .stButton>button {
        background: linear-gradient(90deg, #7986CB 0%, #9FA8DA 100%);
        color: white;
        border: none;
        padding: 10px 30px;
        border-radius: 8px;
        font-weight: 600;
    }

    /* Metric tiles */
    [data-testid="stMetricValue"] {
        font-size: 28px;
        color: #3949AB;
    }

    .stt-header {
        text-align: center;
        padding: 8px 0 16px 0;
        color: #3949AB;
    }
    </style>
"""

SEED_ENV_VAR = "STT_SEED"
DEFAULT_SEED = 7
DEFAULT_OUT_DIR = "stt-out"
CORPUS_DIR = "corpus"

# Desk scale shrinks the full-scale recipe so a run fits on one CPU core.
PRESETS = {
    "desk": {
        "lr": 1e-3,
        "batch_size": 16,
        "stage1_epochs": 20,
        "stage2_epochs": 10,
        "frozen_epochs": 2,
        "beta1": 0.9,
        "beta2": 0.95,
        "weight_decay": 0.05,
    },
    "paper": {
        "lr": 1e-5,
        "batch_size": 64,
        "stage1_epochs": 100,
        "stage2_epochs": 50,
        "frozen_epochs": 3,
        "beta1": 0.9,
        "beta2": 0.95,
        "weight_decay": 0.05,
    },
}


def _parse_bool(text):
    if isinstance(text, bool):
        return text
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_optional_int(text):
    return None if str(text).strip().lower() in ("", "none") else int(text)


# flat key -> (section, field, parser)
CONFIG_KEYS = {
    "seed": (None, "seed", int),
    "out": (None, "out_dir", str),
    "augment_flip": (None, "augment_flip", _parse_bool),
    "image_side": ("encoder", "image_side", int),
    "patch_size": ("encoder", "patch_size", int),
    "backbone_dim": ("encoder", "backbone_dim", int),
    "shared_dim": ("encoder", "shared_dim", int),
    "backbone_kind": ("encoder", "backbone_kind", str),
    "channels": ("encoder", "channels", int),
    "ln_eps": ("encoder", "ln_eps", float),
    "temperature": ("loss", "temperature", float),
    "cosine": ("loss", "cosine", _parse_bool),
    "stage1_epochs": ("schedule", "stage1_epochs", int),
    "stage2_epochs": ("schedule", "stage2_epochs", int),
    "out_domain_ratio": ("schedule", "out_domain_ratio", float),
    "frozen_epochs": ("schedule", "frozen_epochs", int),
    "lr": ("optimizer", "lr", float),
    "beta1": ("optimizer", "beta1", float),
    "beta2": ("optimizer", "beta2", float),
    "adam_eps": ("optimizer", "eps", float),
    "weight_decay": ("optimizer", "weight_decay", float),
    "batch_size": ("optimizer", "batch_size", int),
    "steps_per_epoch": ("optimizer", "steps_per_epoch", int),
    "instance_pairing": ("pairing", "instance_pairing", _parse_bool),
    "in_domain": ("pairing", "in_domain", _parse_bool),
    "tactile_frames": ("pairing", "tactile_frames", str),
    "touch_manifest": ("data", "touch_manifest", str),
    "web_manifest": ("data", "web_manifest", str),
    "eval_manifest": ("data", "eval_manifest", str),
    "interactive_manifest": ("data", "interactive_manifest", str),
    "checkpoint": ("data", "checkpoint", str),
    "max_instances_per_video": ("data", "max_instances_per_video", _parse_optional_int),
    "threshold": ("evaluation", "threshold", float),
    "ap_flavor": ("evaluation", "ap_flavor", str),
    "descriptor": ("evaluation", "descriptor", str),
    "frame_position": ("evaluation", "frame_position", str),
}


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.05
    batch_size: int = 16
    steps_per_epoch: int = 0

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0 or self.eps <= 0:
            raise ValidationError("lr and weight decay must be non-negative, eps positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValidationError("AdamW betas must lie in (0, 1)")
        if self.batch_size < 1 or self.steps_per_epoch < 0:
            raise ValidationError("batch size must be positive and steps_per_epoch non-negative")


@dataclass(frozen=True)
class DataPaths:
    touch_manifest: str = ""
    web_manifest: str = ""
    eval_manifest: str = ""
    interactive_manifest: str = ""
    checkpoint: str = ""
    max_instances_per_video: int | None = None


@dataclass(frozen=True)
class RunConfig:
    seed: int = DEFAULT_SEED
    encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(backbone_kind="feature-file"))
    loss: LossConfig = field(default_factory=LossConfig)
    schedule: CurriculumSchedule = field(default_factory=CurriculumSchedule)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    pairing: PairingConfig = field(default_factory=PairingConfig)
    data: DataPaths = field(default_factory=DataPaths)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    out_dir: str = DEFAULT_OUT_DIR
    augment_flip: bool = False

    @property
    def out_path(self) -> Path:
        return Path(self.out_dir)

    @property
    def corpus_dir(self) -> Path:
        return self.out_path / CORPUS_DIR

    def data_path(self, key: str, default_name: str) -> Path:
        value = getattr(self.data, key)
        return Path(value) if value else self.corpus_dir / default_name

    def echo(self) -> dict:
        """Flat key -> value view, in CONFIG_KEYS order."""
        flat = {}
        for key, (section, name, _parser) in CONFIG_KEYS.items():
            holder = self if section is None else getattr(self, section)
            flat[key] = getattr(holder, name)
        return flat


_COMMENT = re.compile(r"(?:^|\s)#")


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` at line start or after whitespace starts a comment."""
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot read config file {path}: {exc}") from exc
    for number, raw in enumerate(text.splitlines(), 1):
        line = _COMMENT.split(raw, 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ValidationError(f"{path}:{number}: expected 'key = value'")
        if key != "preset" and key not in CONFIG_KEYS:
            raise ValidationError(f"{path}:{number}: unknown config key {key!r}")
        values[key] = value.strip()
    return values


def build_run_config(values: dict) -> RunConfig:
    sections = {"encoder": {"backbone_kind": "feature-file"}}
    top = {}
    for key, raw in values.items():
        if key == "preset":
            continue
        if key not in CONFIG_KEYS:
            raise ValidationError(f"unknown config key {key!r}")
        section, name, parser = CONFIG_KEYS[key]
        try:
            value = parser(raw)
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"bad value for {key!r}: {raw!r} ({exc})") from exc
        if section is None:
            top[name] = value
        else:
            sections.setdefault(section, {})[name] = value
    factories = {
        "encoder": EncoderConfig,
        "loss": LossConfig,
        "schedule": CurriculumSchedule,
        "optimizer": OptimizerConfig,
        "pairing": PairingConfig,
        "data": DataPaths,
        "evaluation": EvalConfig,
    }
    built = {name: factory(**sections.get(name, {})) for name, factory in factories.items()}
    return RunConfig(**top, **built)


def load_run_config(path=None, overrides=None, environ=None) -> RunConfig:
    """Preset, then config file, then STT_SEED, then explicit overrides (later wins)."""
    environ = os.environ if environ is None else environ
    overrides = dict(overrides or {})
    file_values = read_config_file(path) if path else {}
    preset_name = overrides.get("preset", file_values.get("preset", "desk"))
    if preset_name not in PRESETS:
        raise ValidationError(f"unknown preset {preset_name!r}; choose from {sorted(PRESETS)}")
    values = {key: value for key, value in PRESETS[preset_name].items()}
    values.update(file_values)
    if environ.get(SEED_ENV_VAR):
        values["seed"] = environ[SEED_ENV_VAR]
    values.update(overrides)
    return build_run_config(values)
