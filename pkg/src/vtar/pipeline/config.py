"""Run configuration: four INI sections mapped onto frozen dataclasses.

Unknown sections or keys are rejected by name. The digest is a sha256 over
canonical JSON of the fully resolved configuration, so two files that spell
the same values differently share a digest.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from vtar.errors import ConfigError
from vtar.reasoner import ReasonerConfig
from vtar.synthgen import DataConfig
from vtar.vtem import VtemConfig


@dataclass(frozen=True)
class TrainConfig:
    # phase 1: mapper
    vtem_lr: float = 1e-4
    vtem_iterations: int = 2000
    vtem_batch: int = 16
    # phase 2: prompts (or every weight for full fine-tuning)
    prompt_lr: float = 2e-3
    prompt_iterations: int = 1000
    prompt_batch: int = 16
    finetune_lr: float = 1e-4
    # reasoner proxy pretraining
    pretrain_steps: int = 600
    pretrain_batch: int = 16
    pretrain_length: int = 32
    pretrain_lr: float = 3e-3
    reasoner_seed: int = 0
    # shared AdamW
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    log_interval: int = 100
    seed: int = 0

    def __post_init__(self):
        for name in ("vtem_lr", "prompt_lr", "finetune_lr", "pretrain_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        for name in ("vtem_iterations", "prompt_iterations", "vtem_batch", "prompt_batch", "log_interval"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.pretrain_steps < 0:
            raise ValueError("pretrain_steps must be >= 0")


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = DataConfig()
    vtem: VtemConfig = VtemConfig()
    reasoner: ReasonerConfig = ReasonerConfig()
    train: TrainConfig = TrainConfig()

    def __post_init__(self):
        pairs = (
            ("data.feature_dim", self.data.feature_dim, "vtem.feature_dim", self.vtem.feature_dim),
            ("vtem.d_model", self.vtem.d_model, "reasoner.d_model", self.reasoner.d_model),
            ("data.num_classes", self.data.num_classes, "reasoner.num_classes", self.reasoner.num_classes),
        )
        for a, va, b, vb in pairs:
            if va != vb:
                raise ConfigError(f"{a}={va} disagrees with {b}={vb}")

    def as_dict(self) -> dict:
        return {s: dataclasses.asdict(getattr(self, s)) for s in SECTIONS}

    @property
    def digest(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, section: str, **changes) -> "RunConfig":
        try:
            new = dataclasses.replace(getattr(self, section), **changes)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}] {exc}") from None
        return dataclasses.replace(self, **{section: new})


SECTIONS = ("data", "vtem", "reasoner", "train")
_TYPES = {"data": DataConfig, "vtem": VtemConfig, "reasoner": ReasonerConfig, "train": TrainConfig}


def _coerce(section: str, key: str, raw: str, target):
    kind = type(target)
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw.strip())
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc.message.splitlines()[0]}") from None
    base = RunConfig()
    built = {}
    for section in parser.sections():
        if section not in _TYPES:
            raise ConfigError(f"{source}: unknown section [{section}]")
        defaults = getattr(base, section)
        known = {f.name for f in fields(_TYPES[section])}
        changes = {}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"{source}: unknown key [{section}] {key}")
            changes[key] = _coerce(section, key, raw, getattr(defaults, key))
        try:
            built[section] = dataclasses.replace(defaults, **changes)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{source}: [{section}] {exc}") from None
    # sections are combined in one step so cross-section checks see the final values
    return dataclasses.replace(base, **built)


def load_config(path: Optional[str | Path]) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    return parse_config(text, str(p))


def dump_config(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section, values in cfg.as_dict().items():
        parser[section] = {k: str(v) for k, v in values.items()}
    lines = []
    for section in SECTIONS:
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v}" for k, v in parser[section].items())
        lines.append("")
    return "\n".join(lines)
