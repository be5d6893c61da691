"""Run configuration: one flat ``key=value`` text file plus command-line overrides.

Every key has a default (see :data:`DEFAULTS_DOC`); unknown keys are
rejected. Booleans accept ``true/false``, ``1/0``, ``yes/no``, ``on/off``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig


@dataclass
class RunConfig:
    # data
    facts: str = "data/facts.tsv"
    train: str = "data/train.jsonl"
    dev: str = "data/dev.jsonl"
    test: str = "data/test.jsonl"
    checkpoint: str = "runs/checkpoint"
    # embedding and model widths
    dim: int = 16
    d_model: int = 32
    layers: int = 2
    diffusion_hops: int = 2
    # objective
    lam: float = 0.5
    mu: float = 0.1
    # optimisation
    lr: float = 0.01
    epochs: int = 50
    batch_size: int = 32
    pretrain_epochs: int = 50
    pretrain_lr: float = 0.5
    pretrain_init: float = 0.3
    # retrieval
    k_hops: int = 2
    max_nodes: int = 32
    max_facts: int = 16
    # ablation flags
    time_aware: bool = True
    adaptive_fusion: bool = True
    multi_hop: bool = True
    constraint_aware: bool = True
    seed: int = 0

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            dim=self.dim, d_model=self.d_model, layers=self.layers, diffusion_hops=self.diffusion_hops,
            k_hops=self.k_hops, max_nodes=self.max_nodes, max_facts=self.max_facts,
            time_aware=self.time_aware, adaptive_fusion=self.adaptive_fusion, multi_hop=self.multi_hop,
            constraint_aware=self.constraint_aware, lam=self.lam,
        )

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name}={_format(getattr(self, f.name))}\n" for f in fields(self))


DEFAULTS_DOC = {
    "facts": "facts TSV (subject, relation, object, start, end)",
    "train": "training questions (JSON lines)",
    "dev": "dev questions used for model selection",
    "test": "test questions used by evaluate and ablate",
    "checkpoint": "checkpoint directory",
    "dim": "complex embedding dimension D (rows are 2D wide)",
    "d_model": "hidden width of encoder, reasoner and fusion",
    "layers": "number of propagation layers L",
    "diffusion_hops": "highest diffusion power",
    "lam": "weight of the timestamp-ordering loss",
    "mu": "weight of the embedding loss during end-to-end training (0 freezes the KG tables)",
    "lr": "Adam learning rate for end-to-end training",
    "epochs": "end-to-end epochs",
    "batch_size": "questions per step",
    "pretrain_epochs": "SGD epochs of embedding pretraining (0 skips it)",
    "pretrain_lr": "SGD learning rate of embedding pretraining",
    "pretrain_init": "standard deviation of the initial embedding rows",
    "k_hops": "subgraph radius around question entities",
    "max_nodes": "subgraph node cap",
    "max_facts": "retrieved facts per question",
    "time_aware": "positional time codes and ordering loss",
    "adaptive_fusion": "multi-view fusion (off: concatenation head)",
    "multi_hop": "diffusion reasoning (off: zero hops)",
    "constraint_aware": "fact cross-attention in the question encoder",
    "seed": "random seed",
}

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _parse_value(key: str, kind, text: str):
    text = text.strip()
    if kind is bool or kind == "bool":
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    try:
        if kind is int or kind == "int":
            return int(text)
        if kind is float or kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r}") from None
    return text


def apply_overrides(config: RunConfig, pairs) -> RunConfig:
    """Apply ``key=value`` strings (or ``(key, value)`` tuples) on top of ``config``."""
    kinds = {f.name: f.type for f in fields(RunConfig)}
    changes = {}
    for item in pairs:
        if isinstance(item, str):
            if "=" not in item:
                raise ConfigError(f"expected key=value, got {item!r}")
            key, value = item.split("=", 1)
        else:
            key, value = item
        key = key.strip()
        if key not in kinds:
            raise ConfigError(f"unknown config key {key!r}")
        changes[key] = _parse_value(key, kinds[key], str(value))
    config = config.replace(**changes)
    validate(config)
    return config


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        pairs.append(line)
    return apply_overrides(base or RunConfig(), pairs)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)


def validate(config: RunConfig):
    for key in ("dim", "d_model", "batch_size", "max_nodes"):
        if getattr(config, key) < 1:
            raise ConfigError(f"{key} must be positive")
    for key in ("epochs", "layers", "diffusion_hops", "pretrain_epochs", "k_hops", "max_facts"):
        if getattr(config, key) < 0:
            raise ConfigError(f"{key} must be nonnegative")
    for key in ("lam", "mu"):
        if getattr(config, key) < 0:
            raise ConfigError(f"{key} must be nonnegative")
    if config.lr <= 0 or config.pretrain_lr <= 0:
        raise ConfigError("learning rates must be positive")
