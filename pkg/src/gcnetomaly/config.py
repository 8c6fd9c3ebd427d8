"""Run configuration: flat ``section.key=value`` settings with population presets.

Precedence, lowest first: defaults, preset, config file(s), explicit overrides.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .features import FeatureConfig
from .model import ABLATIONS, ModelConfig
from .node2vec import Node2VecConfig

DEFAULTS: dict[str, object] = {
    "seed": 0,
    "ablation": "vae",
    "partitions": 1,
    "min_history_days": 7,
    "ingest.events_path": "",
    "ingest.internal_cidrs": ["10.0.0.0/8"],
    "ingest.subset_cidrs": [],
    "ingest.subset_ids": [],
    "ingest.inventory_path": "",
    "ingest.window_days": 1,
    "features.process_blocks": True,
    "features.process_block_source": "counts",
    "features.decay": 0.9,
    "features.history_days": 7,
    "node2vec.dim": 10,
    "node2vec.walk_length": 5,
    "node2vec.walks_per_node": 10,
    "node2vec.window": 2,
    "node2vec.negatives": 5,
    "node2vec.epochs": 5,
    "model.gcn_filters": 32,
    "model.latent_dim": 16,
    "model.dropout_rate": 0.5,
    "model.epochs": 200,
    "model.learning_rate": 0.01,
    "model.batch_size": 256,
    "model.kl_weight": 0.0,
    "model.alpha": 0.3,
    "model.beta": 0.3,
    "model.gamma": 0.2,
    "model.delta": 0.2,
    "model.process_zero_weight": 0.1,
    "loss.alpha_binds": "SF",
    "scoring.threshold": 0.6,
    "scoring.max_ratio": 100.0,
    "scoring.history_windows": 9,
    "scoring.retention": 30,
    "scoring.explain_threshold": 0.2,
    "synth.population": "atm",
    "synth.n_machines": 200,
    "synth.n_days": 9,
    "synth.start_date": "2021-10-21",
    "synth.events_per_machine_per_day": 0.0,
    "synth.behavioral_noise": -1.0,
}

PRESETS: dict[str, dict[str, object]] = {
    "atm": {
        "model.alpha": 0.3, "model.beta": 0.3, "model.gamma": 0.2, "model.delta": 0.2,
        "scoring.threshold": 0.6, "partitions": 1,
    },
    "ad": {
        "model.alpha": 0.4, "model.beta": 0.2, "model.gamma": 0.2, "model.delta": 0.2,
        "scoring.threshold": 0.018, "partitions": 4, "synth.population": "ad",
    },
}


class ConfigError(ValueError):
    pass


def _coerce(key: str, raw) -> object:
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    default = DEFAULTS[key]
    if not isinstance(raw, str):
        return list(raw) if isinstance(default, list) else raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in ("1", "true", "on", "yes"):
                return True
            if lowered in ("0", "false", "off", "no"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, list):
            return [part.strip() for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return text


def parse_config_text(text: str) -> dict[str, object]:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key = key.strip()
        values[key] = _coerce(key, value)
    return values


def format_config(values: Mapping[str, object]) -> str:
    lines = []
    for key in sorted(values):
        v = values[key]
        if isinstance(v, bool):
            v = "on" if v else "off"
        elif isinstance(v, list):
            v = ",".join(str(x) for x in v)
        lines.append(f"{key}={v}")
    return "\n".join(lines) + "\n"


@dataclass
class RunConfig:
    values: dict[str, object] = field(default_factory=lambda: dict(DEFAULTS))

    @classmethod
    def build(cls, preset: str | None = None, files=(), overrides: Mapping[str, object] | None = None) -> "RunConfig":
        values = dict(DEFAULTS)
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
            values.update(PRESETS[preset])
        for path in files:
            values.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
        for key, raw in (overrides or {}).items():
            values[key] = _coerce(key, raw)
        config = cls(values)
        config.validate()
        return config

    def __getitem__(self, key: str):
        return self.values[key]

    def validate(self) -> None:
        if self["ablation"] not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}")
        if int(self["partitions"]) < 1:
            raise ConfigError("partitions must be at least 1")
        if float(self["scoring.threshold"]) <= 0:
            raise ConfigError("scoring.threshold must be positive")
        if not self["ingest.internal_cidrs"]:
            raise ConfigError("ingest.internal_cidrs must not be empty")
        try:
            self.model_config()
            self.feature_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def model_config(self, seed: int | None = None) -> ModelConfig:
        base = ModelConfig(
            gcn_filters=int(self["model.gcn_filters"]),
            latent_dim=int(self["model.latent_dim"]),
            dropout_rate=float(self["model.dropout_rate"]),
            epochs=int(self["model.epochs"]),
            learning_rate=float(self["model.learning_rate"]),
            batch_size=int(self["model.batch_size"]),
            kl_weight=float(self["model.kl_weight"]),
            loss_weights=(float(self["model.alpha"]), float(self["model.beta"]),
                          float(self["model.gamma"]), float(self["model.delta"])),
            alpha_binds=str(self["loss.alpha_binds"]),
            process_zero_weight=float(self["model.process_zero_weight"]),
            seed=int(self["seed"]) if seed is None else seed,
        )
        return base.with_ablation(str(self["ablation"]))

    def feature_config(self) -> FeatureConfig:
        return FeatureConfig(
            process_blocks=bool(self["features.process_blocks"]),
            process_block_source=str(self["features.process_block_source"]),
            decay=float(self["features.decay"]),
            history_days=int(self["features.history_days"]),
            node2vec=Node2VecConfig(
                dim=int(self["node2vec.dim"]),
                walk_length=int(self["node2vec.walk_length"]),
                walks_per_node=int(self["node2vec.walks_per_node"]),
                window=int(self["node2vec.window"]),
                negatives=int(self["node2vec.negatives"]),
                epochs=int(self["node2vec.epochs"]),
            ),
        )
