"""Run configuration: an INI file with fixed sections and keys.

Unknown sections or keys are errors. Every key has a default, so an empty
file (or no file) gives the desk-scale defaults. See README for the list.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field


@dataclass
class DataSection:
    n_requests: int = 3
    n_options: int = 4
    tokens_per_domain: int = 8
    shared_tokens: int = 8
    seq_len: int = 12
    temperature: float = 3.0
    option_bias: float = 3.5
    shared_penalty: float = 1.5
    n_train: int = 200
    n_test: int = 100


@dataclass
class ModelSection:
    d_model: int = 32
    n_layers: int = 4
    n_heads: int = 2
    max_len: int = 32
    pretrain_epochs: int = 30
    pretrain_lr: float = 3e-3
    pretrain_batch: int = 32
    encoder_epochs: int = 30
    encoder_lr: float = 3e-3


@dataclass
class UnlearnSection:
    learning_rate: float = 3e-4
    batch_size: int = 16
    epochs: int = 20
    lambda_orth: float = 0.1
    rank: int = 8
    lora_alpha: float = 16.0
    label_mode: str = "random-label"
    orth_previous_only: bool = False


@dataclass
class DetectorSection:
    epochs: int = 15
    batch_size: int = 16
    learning_rate: float = 3e-3
    mask_percent: float = 15.0
    momentum: float = 0.99
    temperature: float = 1.0
    scale_reps: bool = True
    alpha_split: float = 0.8
    rank: int = 8
    lora_alpha: float = 16.0


@dataclass
class ScoringSection:
    gamma: float = 1000.0
    nu: float = 0.1


@dataclass
class GateSection:
    zeta: float = 10.0
    mode: str = "soft"


@dataclass
class RunSection:
    seed: int = 0


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    unlearn: UnlearnSection = field(default_factory=UnlearnSection)
    detector: DetectorSection = field(default_factory=DetectorSection)
    scoring: ScoringSection = field(default_factory=ScoringSection)
    gate: GateSection = field(default_factory=GateSection)
    run: RunSection = field(default_factory=RunSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cfg = cls()
        for sec, values in d.items():
            apply_section(cfg, sec, values)
        return cfg

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **overrides) -> "RunConfig":
        """Copy with ``section__key=value`` overrides."""
        d = self.to_dict()
        for name, value in overrides.items():
            sec, key = name.split("__", 1)
            d[sec][key] = value
        return RunConfig.from_dict(d)


def _coerce(value, typ):
    if typ is bool:
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    return typ(value)


def apply_section(cfg: RunConfig, section: str, values: dict) -> None:
    if section not in {f.name for f in dataclasses.fields(cfg)}:
        raise ValueError(f"unknown config section [{section}]")
    sec = getattr(cfg, section)
    types = {f.name: f.type for f in dataclasses.fields(sec)}
    for key, raw in values.items():
        if key not in types:
            raise ValueError(f"unknown config key {section}.{key}")
        typ = {"int": int, "float": float, "str": str, "bool": bool}[types[key]]
        setattr(sec, key, _coerce(raw, typ))


def load_config(path=None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    with open(path) as fh:
        parser.read_file(fh)
    for section in parser.sections():
        apply_section(cfg, section, dict(parser.items(section)))
    return cfg
