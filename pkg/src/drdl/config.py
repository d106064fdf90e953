"""Flat key=value run configuration shared by every subcommand.

A config file holds one ``key = value`` per line; ``#`` starts a comment.
Keys are the field names of :class:`RunConfig`.  Command-line flags override
file values, and unknown keys are rejected before any work starts.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields

from .autodiff.optim import ConfigError
from .data import AugmentConfig
from .losses import LossWeights
from .synth import SynthConfig
from .trainer import TrainConfig


@dataclass
class RunConfig:
    seed: int = 0
    out: str = ""
    # synthesis
    ids: int = 32
    cams: int = 3
    per: int = 4
    test_ids: int = 0  # 0 means same as ids
    membership: str = "all"
    height: int = 32
    width: int = 16
    noise: float = 0.02
    normalize: bool = False  # per-image mean/std standardisation of model inputs
    # re-conduction
    graph: str = "line"
    move_probability: float = 0.25
    # training
    epochs: int = 60
    iter_pre: int = 25
    batch_size: int = 16
    warmup: int = 5
    lr_e1: float = 3e-4
    weight_decay_e1: float = 5e-4
    lr_e2: float = 3.5e-4
    lr_w1: float = 3e-4
    lr_w2: float = 3e-5
    alpha: float = 0.01
    beta: float = 1.0
    lam: float = 0.01
    tau: float = 0.01
    crop_padding: int = 0
    flip_prob: float = 0.0
    erase_prob: float = 0.0
    eval_every: int = 0
    checkpoint_every: int = 0
    # evaluation
    feature: str = "fused"
    junk: bool = True

    def synth_config(self, name: str = "synth") -> SynthConfig:
        cfg = SynthConfig(
            num_ids=self.ids,
            num_cams=self.cams,
            per_camera=self.per,
            num_test_ids=self.test_ids or None,
            membership=self.membership,
            shape=(3, self.height, self.width),
            noise_sigma=self.noise,
            seed=self.seed,
            name=name,
        )
        cfg.validate()
        return cfg

    def train_config(self, **overrides) -> TrainConfig:
        try:
            weights = LossWeights(self.alpha, self.beta, self.lam, self.tau)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        cfg = TrainConfig(
            total_epochs=self.epochs,
            iter_pre=self.iter_pre,
            batch_size=self.batch_size,
            lr_e1=self.lr_e1,
            weight_decay_e1=self.weight_decay_e1,
            lr_e2=self.lr_e2,
            lr_w1=self.lr_w1,
            lr_w2=self.lr_w2,
            warmup_epochs=self.warmup,
            weights=weights,
            augment=AugmentConfig(self.crop_padding, self.flip_prob, self.erase_prob),
            seed=self.seed,
            eval_every=self.eval_every,
            checkpoint_every=self.checkpoint_every,
        )
        cfg = dataclasses.replace(cfg, **overrides)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.feature not in ("fused", "gap", "gmp", "style"):
            raise ConfigError(f"feature must be fused, gap, gmp or style, got {self.feature!r}")
        if not 0.0 <= self.move_probability <= 1.0:
            raise ConfigError("move_probability must lie in [0, 1]")


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw) -> object:
    kind = FIELD_TYPES[key]
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot read {text!r} as {kind}") from None
    return text


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, object]:
    out: dict[str, object] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in FIELD_TYPES:
            raise ConfigError(f"{origin}:{n}: unknown config key {key!r}")
        out[key] = _coerce(key, value)
    return out


def load_config_file(path: str | os.PathLike) -> dict[str, object]:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), str(path))


def build_run_config(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then file values, then explicit overrides (``None`` means not given)."""
    merged: dict[str, object] = {}
    for source in (file_values or {}, overrides or {}):
        for k, v in source.items():
            if v is None:
                continue
            if k not in FIELD_TYPES:
                raise ConfigError(f"unknown config key {k!r}")
            merged[k] = _coerce(k, v)
    cfg = RunConfig(**merged)
    cfg.validate()
    return cfg


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in fields(cfg))
