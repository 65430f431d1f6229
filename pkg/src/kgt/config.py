"""Flat key=value run configuration.

Config files are plain text: one ``section.key = value`` per line, ``#`` for
comments. Every key has a typed default; unknown keys and malformed values
raise :class:`ConfigError` naming the key. Ratios accept ``a:b`` or a plain
float.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError, ParseError
from .model import ModelConfig
from .optim import AdamWConfig
from .queries import TRAINABLE_TYPES, QueryType
from .train import Stage, TrainConfig


def _parse_int(text: str) -> int:
    return int(text)


def _parse_optional_int(text: str) -> int | None:
    return None if text == "" else int(text)


def _parse_float(text: str) -> float:
    return float(text)


def _parse_optional_float(text: str) -> float | None:
    return None if text == "" else float(text)


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_ratio(text: str) -> float:
    """``a:b`` (a per one b; b may be 0 for "only a") or a plain float."""
    if ":" in text:
        left, right = text.split(":", 1)
        a = float(left)
        b = float(right)
        if a < 0 or b < 0 or (a == 0 and b == 0):
            raise ValueError(f"bad ratio {text!r}")
        return math.inf if b == 0 else a / b
    value = float(text)
    if value < 0:
        raise ValueError(f"ratio must be non-negative, got {text!r}")
    return value


def _parse_int_list(text: str) -> tuple[int, ...]:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ValueError("empty list")
    return tuple(int(p) for p in parts)


def _parse_str(text: str) -> str:
    return text


@dataclass
class PipelineConfig:
    seed: int = 0
    threads: int = 1
    data_dir: str = "data"

    model_layers: int = 4
    model_hidden: int = 128
    model_heads: int = 4
    model_experts: int = 4
    model_top_k: int = 2
    model_expert_hidden: int | None = None
    model_dropout: float = 0.1
    model_tie_decoder: bool = False

    optimizer_lr: float = 1e-4
    optimizer_beta1: float = 0.9
    optimizer_beta2: float = 0.999
    optimizer_eps: float = 1e-8
    optimizer_weight_decay: float = 0.01
    optimizer_lr_decay: float = 0.997

    stage1_epochs: int = 10
    stage1_batch_size: int = 32
    stage1_label_smoothing: float = 0.1
    stage1_mask_rate: float = 0.25
    stage1_method_mix: float = 1.0
    stage1_budget_min: int = 8
    stage1_budget_max: int = 16
    stage1_edge_keep: float = 0.8
    stage1_ladies_per_layer: int = 8
    stage1_ladies_depth: int = 2
    stage1_steps_per_epoch: int | None = None
    stage1_lr: float | None = None

    stage2_epochs: int = 10
    stage2_batch_size: int = 32
    stage2_label_smoothing: float = 0.1
    stage2_pattern_mix: float = 4.0
    stage2_steps_per_epoch: int | None = None
    stage2_lr: float | None = None

    finetune_epochs: int = 10
    finetune_batch_size: int = 128
    finetune_lr: float | None = None
    finetune_combos: str = ""
    grad_clip: float = 1.0

    queries_train_count: int = 500
    queries_valid_count: int = 100
    queries_test_count: int = 100
    queries_max_answers: int = 100

    eval_ks: tuple[int, ...] = (1, 3, 10)

    def model_config(self, entity_count: int, relation_count: int) -> ModelConfig:
        return ModelConfig(
            entity_count=entity_count,
            relation_count=relation_count,
            layers=self.model_layers,
            hidden=self.model_hidden,
            heads=self.model_heads,
            experts=self.model_experts,
            top_k=self.model_top_k,
            expert_hidden=self.model_expert_hidden,
            dropout=self.model_dropout,
            tie_decoder=self.model_tie_decoder,
        )

    def _optimizer(self, lr_override: float | None) -> AdamWConfig:
        return AdamWConfig(
            lr=lr_override if lr_override is not None else self.optimizer_lr,
            beta1=self.optimizer_beta1,
            beta2=self.optimizer_beta2,
            eps=self.optimizer_eps,
            weight_decay=self.optimizer_weight_decay,
            lr_decay=self.optimizer_lr_decay,
        )

    def stage1_config(self) -> TrainConfig:
        return TrainConfig(
            stage=Stage.STAGE1,
            epochs=self.stage1_epochs,
            batch_size=self.stage1_batch_size,
            label_smoothing=self.stage1_label_smoothing,
            mask_rate=self.stage1_mask_rate,
            method_mix=self.stage1_method_mix,
            budget_min=self.stage1_budget_min,
            budget_max=self.stage1_budget_max,
            edge_keep=self.stage1_edge_keep,
            ladies_per_layer=self.stage1_ladies_per_layer,
            ladies_depth=self.stage1_ladies_depth,
            grad_clip=self.grad_clip,
            seed=self.seed + 101,
            steps_per_epoch=self.stage1_steps_per_epoch,
            optimizer=self._optimizer(self.stage1_lr),
        )

    def stage2_config(self) -> TrainConfig:
        return TrainConfig(
            stage=Stage.STAGE2,
            epochs=self.stage2_epochs,
            batch_size=self.stage2_batch_size,
            label_smoothing=self.stage2_label_smoothing,
            pattern_mix=self.stage2_pattern_mix,
            grad_clip=self.grad_clip,
            seed=self.seed + 202,
            steps_per_epoch=self.stage2_steps_per_epoch,
            optimizer=self._optimizer(self.stage2_lr),
        )

    def finetune_config(self) -> TrainConfig:
        return TrainConfig(
            stage=Stage.FINETUNE,
            epochs=self.finetune_epochs,
            batch_size=self.finetune_batch_size,
            label_smoothing=0.0,
            grad_clip=self.grad_clip,
            seed=self.seed + 303,
            optimizer=self._optimizer(self.finetune_lr),
        )

    def combos(self) -> list[tuple[QueryType, ...]]:
        """Parse ``finetune.combos``: combos split by ``|``, types by ``,``."""
        text = self.finetune_combos.strip()
        if not text:
            return []
        by_value = {t.value: t for t in QueryType}
        out = []
        for part in text.split("|"):
            names = [n.strip() for n in part.split(",") if n.strip()]
            if not names:
                raise ConfigError("finetune.combos: empty combination")
            combo = []
            for name in names:
                if name not in by_value:
                    raise ConfigError(f"finetune.combos: unknown query type {name!r}")
                qtype = by_value[name]
                if qtype not in TRAINABLE_TYPES:
                    raise ConfigError(f"finetune.combos: {name} is not a trainable type")
                combo.append(qtype)
            out.append(tuple(combo))
        return out


_PARSERS = {
    "seed": _parse_int,
    "threads": _parse_int,
    "data.dir": _parse_str,
    "model.layers": _parse_int,
    "model.hidden": _parse_int,
    "model.heads": _parse_int,
    "model.experts": _parse_int,
    "model.top_k": _parse_int,
    "model.expert_hidden": _parse_optional_int,
    "model.dropout": _parse_float,
    "model.tie_decoder": _parse_bool,
    "optimizer.lr": _parse_float,
    "optimizer.beta1": _parse_float,
    "optimizer.beta2": _parse_float,
    "optimizer.eps": _parse_float,
    "optimizer.weight_decay": _parse_float,
    "optimizer.lr_decay": _parse_float,
    "stage1.epochs": _parse_int,
    "stage1.batch_size": _parse_int,
    "stage1.label_smoothing": _parse_float,
    "stage1.mask_rate": _parse_float,
    "stage1.method_mix": _parse_ratio,
    "stage1.budget_min": _parse_int,
    "stage1.budget_max": _parse_int,
    "stage1.edge_keep": _parse_float,
    "stage1.ladies_per_layer": _parse_int,
    "stage1.ladies_depth": _parse_int,
    "stage1.steps_per_epoch": _parse_optional_int,
    "stage1.lr": _parse_optional_float,
    "stage2.epochs": _parse_int,
    "stage2.batch_size": _parse_int,
    "stage2.label_smoothing": _parse_float,
    "stage2.pattern_mix": _parse_ratio,
    "stage2.steps_per_epoch": _parse_optional_int,
    "stage2.lr": _parse_optional_float,
    "finetune.epochs": _parse_int,
    "finetune.batch_size": _parse_int,
    "finetune.lr": _parse_optional_float,
    "finetune.combos": _parse_str,
    "grad_clip": _parse_float,
    "queries.train_count": _parse_int,
    "queries.valid_count": _parse_int,
    "queries.test_count": _parse_int,
    "queries.max_answers": _parse_int,
    "eval.ks": _parse_int_list,
}

_ATTRS = {key: key.replace(".", "_") for key in _PARSERS}

# every parser key must land on a real dataclass field
assert set(_ATTRS.values()) == {f.name for f in fields(PipelineConfig)}


def parse_config_text(text: str, path: str = "<config>") -> dict[str, str]:
    """Raw key -> value strings from config text; duplicates are errors."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(path, lineno, f"expected key = value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key in values:
            raise ParseError(path, lineno, f"duplicate key {key!r}")
        values[key] = value
    return values


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> PipelineConfig:
    """Defaults, then file values, then explicit overrides."""
    merged: dict[str, str] = {}
    if path is not None:
        merged.update(parse_config_text(Path(path).read_text(encoding="utf-8"), str(path)))
    if overrides:
        merged.update(overrides)
    config = PipelineConfig()
    updates = {}
    for key, text in merged.items():
        if key not in _PARSERS:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            updates[_ATTRS[key]] = _PARSERS[key](text)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from None
    config = replace(config, **updates)
    _validate(config)
    return config


def _validate(config: PipelineConfig) -> None:
    checks = [
        (config.threads >= 1, "threads must be at least 1"),
        (config.stage1_budget_min >= 1, "stage1.budget_min must be at least 1"),
        (config.stage1_budget_min <= config.stage1_budget_max, "stage1 budget bounds out of order"),
        (0.0 < config.stage1_mask_rate <= 1.0, "stage1.mask_rate must be in (0, 1]"),
        (0.0 <= config.stage1_edge_keep <= 1.0, "stage1.edge_keep must be in [0, 1]"),
        (config.queries_max_answers >= 1, "queries.max_answers must be at least 1"),
        (all(k >= 1 for k in config.eval_ks), "eval.ks must be positive"),
        (config.grad_clip > 0, "grad_clip must be positive"),
    ]
    for ok, message in checks:
        if not ok:
            raise ConfigError(message)
    config.combos()  # validates the combo syntax eagerly
