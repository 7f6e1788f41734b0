"""Plain-text experiment configuration with a strict schema.

One ``section.key = value`` per line; ``#`` starts a comment. Values are
Python literals (numbers, lists, quoted strings) or bare words
(``true``/``false``/``none`` or unquoted strings).
"""

from __future__ import annotations

import ast
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

from .datastream import AugmentConfig
from .losses import CmpHyperParams
from .models import NetworkSpec
from .probe import ProbeConfig
from .trainer import StrategyConfig

REQUIRED = object()


class ConfigError(ValueError):
    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


# key -> (type, default); REQUIRED marks experiment-defining values that have no silent default
SCHEMA: dict[str, tuple[Any, Any]] = {
    "seed": (int, 0),
    "data.source": (str, "synth"),
    "data.path": (str, ""),
    "data.format": (str, "vectors-csv"),
    "data.classes": (int, 8),
    "data.dim": (int, 16),
    "data.samples_per_class": (int, 200),
    "data.class_sep": (float, 3.0),
    "data.seed": (int, 0),
    "data.test_fraction": (float, 0.2),
    "stream.splits": (int, 20),
    "stream.b_s": (int, REQUIRED),
    "strategy.method": (str, REQUIRED),
    "strategy.base_ssl": (str, "byol"),
    "strategy.alpha": (float, REQUIRED),
    "strategy.beta": (float, REQUIRED),
    "strategy.eps_sq": (float, REQUIRED),
    "strategy.n_patches": (int, REQUIRED),
    "strategy.tcr_pooling": (str, "per-patch-index"),
    "strategy.normalize_tcr": (bool, True),
    "strategy.mse_form": (str, "mean"),
    "strategy.buffer_size": (int, 0),
    "strategy.replay_k": (int, 90),
    "strategy.lr": (float, REQUIRED),
    "strategy.momentum": (float, 0.9),
    "strategy.weight_decay": (float, 1e-4),
    "strategy.ema_tau": (float, 0.99),
    "model.backbone": (str, "mlp"),
    "model.hidden": (list, [64]),
    "model.channels": (list, [8, 16, 32]),
    "model.proj_hidden": (int, 64),
    "model.dim": (int, 32),
    "model.pred_hidden": (int, None),
    "model.standardize": (bool, False),
    "augment.crop_scale": (list, [0.25, 1.0]),
    "augment.flip_prob": (float, 0.5),
    "augment.brightness": (float, 0.4),
    "augment.noise_sigma": (float, 0.1),
    "augment.dropout": (float, 0.1),
    "probe.enabled": (bool, True),
    "probe.lr0": (float, 0.05),
    "probe.decay": (float, 1 / 3),
    "probe.patience": (int, 3),
    "probe.max_epochs": (int, 100),
    "probe.lr_floor": (float, 1e-4),
    "probe.batch_size": (int, 64),
    "probe.standardize": (bool, False),
    "probe.features": (str, "projector"),
}

_BARE = {"true": True, "false": False, "none": None}


def _parse_value(text: str):
    low = text.lower()
    if low in _BARE:
        return _BARE[low]
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _coerce(key: str, value):
    kind, default = SCHEMA[key]
    if value is None:
        if default is None:
            return None
        raise ConfigError(f"{key} may not be none", key)
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false", key)
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer", key)
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number", key)
        return float(value)
    if kind is list:
        if not isinstance(value, (list, tuple)) or not all(isinstance(v, (int, float)) for v in value):
            raise ConfigError(f"{key} must be a list of numbers", key)
        return list(value)
    return str(value)


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, str):
        return value
    return repr(value)


@dataclass
class ExperimentConfig:
    values: dict[str, Any]

    @classmethod
    def parse(cls, text: str) -> "ExperimentConfig":
        raw: dict[str, Any] = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in SCHEMA:
                raise ConfigError(f"unknown key {key!r}", key)
            if key in raw:
                raise ConfigError(f"duplicate key {key!r}", key)
            raw[key] = _parse_value(value)
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "ExperimentConfig":
        values = {}
        for key in raw:
            if key not in SCHEMA:
                raise ConfigError(f"unknown key {key!r}", key)
        for key, (_, default) in SCHEMA.items():
            if key in raw:
                values[key] = _coerce(key, raw[key])
            elif default is REQUIRED:
                raise ConfigError(f"missing required key {key!r}", key)
            else:
                values[key] = default
        cfg = cls(values)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.parse(Path(path).read_text())

    def __getitem__(self, key):
        return self.values[key]

    def replace(self, **updates) -> "ExperimentConfig":
        merged = dict(self.values)
        for key, value in updates.items():
            merged[key.replace("__", ".")] = value
        return ExperimentConfig.from_dict(merged)

    def validate(self):
        """Build every derived object once so bad combinations fail before compute."""
        try:
            self.strategy()
            self.augment()
            self.probe()
            if self["data.source"] not in ("synth", "file"):
                raise ValueError("data.source must be 'synth' or 'file'")
            if self["data.source"] == "file" and not self["data.path"]:
                raise ValueError("data.path is required when data.source = file")
            if not 0 < self["data.test_fraction"] < 1:
                raise ValueError("data.test_fraction must lie in (0, 1)")
            if self["stream.splits"] < 1:
                raise ValueError("stream.splits must be positive")
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None

    # -- derived objects ----------------------------------------------------

    def hyper(self) -> CmpHyperParams:
        v = self.values
        return CmpHyperParams(v["strategy.alpha"], v["strategy.beta"], v["strategy.eps_sq"],
                              v["strategy.n_patches"], v["strategy.tcr_pooling"],
                              v["strategy.normalize_tcr"], v["strategy.mse_form"])

    def strategy(self, seed: Optional[int] = None) -> StrategyConfig:
        v = self.values
        return StrategyConfig(
            method=v["strategy.method"], base_ssl=v["strategy.base_ssl"], hyper=self.hyper(),
            buffer_size=v["strategy.buffer_size"], replay_k=v["strategy.replay_k"],
            batch_size=v["stream.b_s"], lr=v["strategy.lr"], momentum=v["strategy.momentum"],
            weight_decay=v["strategy.weight_decay"], ema_tau=v["strategy.ema_tau"],
            seed=v["seed"] if seed is None else seed,
        )

    def network(self, input_dim: int, image_shape=None) -> NetworkSpec:
        v = self.values
        return NetworkSpec(
            input_dim=input_dim, backbone=v["model.backbone"],
            hidden=tuple(int(h) for h in v["model.hidden"]),
            channels=tuple(int(c) for c in v["model.channels"]),
            image_shape=tuple(image_shape) if image_shape is not None else None,
            proj_hidden=v["model.proj_hidden"], dim=v["model.dim"],
            pred_hidden=v["model.pred_hidden"], standardize=v["model.standardize"],
        )

    def augment(self, seed: Optional[int] = None) -> AugmentConfig:
        v = self.values
        return AugmentConfig(
            n_patches=v["strategy.n_patches"], crop_scale=tuple(v["augment.crop_scale"]),
            flip_prob=v["augment.flip_prob"], brightness=v["augment.brightness"],
            noise_sigma=v["augment.noise_sigma"], dropout=v["augment.dropout"],
            seed=v["seed"] if seed is None else seed,
        )

    def probe(self, seed: Optional[int] = None) -> ProbeConfig:
        v = self.values
        return ProbeConfig(
            lr0=v["probe.lr0"], decay=v["probe.decay"], patience=v["probe.patience"],
            max_epochs=v["probe.max_epochs"], lr_floor=v["probe.lr_floor"],
            batch_size=v["probe.batch_size"], standardize=v["probe.standardize"],
            features=v["probe.features"], seed=v["seed"] if seed is None else seed,
        )

    # -- serialisation ------------------------------------------------------

    def to_text(self) -> str:
        return "".join(f"{key} = {_render(self.values[key])}\n" for key in SCHEMA)

    def config_hash(self) -> str:
        """Hash of everything except the master seed, grouping seed replicates."""
        body = "".join(f"{k} = {_render(self.values[k])}\n" for k in SCHEMA if k != "seed")
        return hashlib.sha256(body.encode()).hexdigest()[:16]
