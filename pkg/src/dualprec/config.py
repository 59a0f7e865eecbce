"""Training configuration and the flat `key = value` config file format.

Config files hold one `key = value` per line with `#` comments. Unknown keys
are an error so typos never pass silently. Flag overrides win over file
values; the resolved snapshot written next to a run reloads bit-identically.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .quant import ScaleRule


class ConfigError(Exception):
    """Invalid key, value, or combination in a run configuration."""


@dataclass
class TrainConfig:
    dataset: str = "mnist"           # mnist | cifar10 | synth
    arch: str = "mlp256"             # mlp256 | miniconvbn
    bits: int = 2                    # shared bit-width b (the run also serves b+1)
    scale_rule: str = "level-span"   # level-span | range-exact
    batch_size: int = 125
    seed: int = 0
    epochs: int = 100
    phase1_epochs: int = 50
    lr_phase1_odd: float = 3e-4
    lr_phase1_even: float = 3e-5
    lr_phase2: float = 4e-3
    eta: float = 0.01
    lambda_init_std: float = 0.3
    # Latent mean below zero starts the up-scaling bits at (almost) all zero,
    # so the high mode tracks the low mode through phase 1 and level
    # branching happens in phase 2, where the bits actually train.
    lambda_init_mean: float = -1.0
    index_norm: str = "maxabs"       # maxabs | std | none
    quantize_layers: str = "all"     # all | comma-separated weight layer names
    augment: str = "none"            # none | flipcrop
    data_dir: str = ""
    train_limit: int = 0             # 0 = use everything
    test_limit: int = 0
    synth_train: int = 6000
    synth_test: int = 1000
    bn_momentum: float = 0.1

    def validate(self):
        if self.dataset not in ("mnist", "cifar10", "synth"):
            raise ConfigError(f"dataset: unknown value {self.dataset!r}")
        if self.arch not in ("mlp256", "miniconvbn"):
            raise ConfigError(f"arch: unknown value {self.arch!r}")
        if not 2 <= self.bits <= 7:
            raise ConfigError(f"bits: shared width must be in [2, 7], got {self.bits}")
        if self.scale_rule not in ("level-span", "range-exact"):
            raise ConfigError(f"scale_rule: unknown value {self.scale_rule!r}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size: must be >= 1, got {self.batch_size}")
        if self.phase1_epochs < 1:
            raise ConfigError(f"phase1_epochs: must be >= 1, got {self.phase1_epochs}")
        if self.epochs < self.phase1_epochs:
            raise ConfigError(
                f"epochs: total {self.epochs} is below phase1_epochs {self.phase1_epochs}"
            )
        for key in ("lr_phase1_odd", "lr_phase1_even", "lr_phase2", "eta",
                    "lambda_init_std"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key}: must be positive")
        if self.index_norm not in ("maxabs", "std", "none"):
            raise ConfigError(f"index_norm: unknown value {self.index_norm!r}")
        if self.augment not in ("none", "flipcrop"):
            raise ConfigError(f"augment: unknown value {self.augment!r}")
        return self

    @property
    def scale_rule_enum(self):
        return ScaleRule(self.scale_rule)


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _coerce(key, raw):
    ftype = _FIELDS[key].type
    raw = raw.strip()
    try:
        if ftype in ("int", int):
            return int(raw)
        if ftype in ("float", float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}")
    return raw


def parse_config_text(text, base=None):
    """Parse `key = value` lines onto a config (a copy of `base` or defaults)."""
    config = dataclasses.replace(base) if base is not None else TrainConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        setattr(config, key, _coerce(key, raw))
    return config


def load_config_file(path, base=None):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(text, base)


def apply_overrides(config, overrides):
    """Apply {key: value-or-string} overrides; unknown keys are errors."""
    for key, value in overrides.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}")
        setattr(config, key, _coerce(key, str(value)))
    return config


def format_config(config):
    """Render a config as reloadable `key = value` lines."""
    lines = [f"{f.name} = {getattr(config, f.name)}" for f in dataclasses.fields(TrainConfig)]
    return "\n".join(lines) + "\n"
