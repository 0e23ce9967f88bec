"""Run configuration read from ``key=value`` text files."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

MODEL_KINDS = ("slds", "lds", "lm")


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    model: str = "slds"
    K: int = 3
    latent_dim: int = 8
    embed_dim: int = 64
    hidden: int = 128
    enc_hidden: int = 64
    state_context: bool = False  # classifier reads neighbouring sentences too
    vocab_cutoff: int = 5
    n_sentences: int = 0  # 0 accepts any story length
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 30
    patience: int = 3
    seed: int = 0
    label_fraction: float = 1.0
    kl_warmup: bool = True
    temperature: float = 1.0
    supervision_weight: float = 1.0
    clip_norm: float = 5.0
    max_sentence_len: int = 20
    valid_fraction: float = 0.1
    test_fraction: float = 0.1
    samples: int = 50
    burn_in: int = 25
    topk: int = 15
    baseline_samples: int = 1000
    mc_samples: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if not 0.0 <= self.label_fraction <= 1.0:
            raise ConfigError("label_fraction must lie in [0, 1]")
        if self.burn_in >= self.samples:
            raise ConfigError("burn_in must be smaller than samples")
        for name in ("latent_dim", "embed_dim", "hidden", "enc_hidden", "batch_size", "K"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")

    @property
    def n_states(self) -> int:
        return 1 if self.model == "lds" else self.K

    def replace(self, **changes) -> Config:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> Config:
        known = {f.name for f in fields(cls)}
        bad = sorted(set(d) - known)
        if bad:
            raise ConfigError(f"unknown config keys: {', '.join(bad)}")
        return cls(**d)


def _coerce(field_type, raw: str, key: str):
    t = field_type if isinstance(field_type, str) else field_type.__name__
    try:
        if t == "bool":
            low = raw.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("1", "true", "yes", "on")
        if t == "int":
            return int(raw)
        if t == "float":
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {t}") from None


def parse_config_text(text: str, base: Config | None = None) -> Config:
    types = {f.name: f.type for f in fields(Config)}
    values = (base or Config()).to_dict()
    bad = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value, got {line!r}")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in types:
            bad.append(key)
            continue
        values[key] = _coerce(types[key], raw, key)
    if bad:
        raise ConfigError(f"unknown config keys: {', '.join(bad)}")
    return Config(**values)


def load_config(path, base: Config | None = None) -> Config:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), base)


def dump_config(cfg: Config) -> str:
    return "".join(f"{k}={v}\n" for k, v in cfg.to_dict().items())
