"""Plain-text config files: flat `key = value` lines under [section] headers."""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, fields

from .errors import ConfigError
from .trainer import TrainerConfig

__all__ = ["load_train_config", "save_train_config", "GenConfig", "load_gen_config"]

_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _parse_bool(raw: str, key: str) -> bool:
    low = raw.strip().lower()
    if low in _BOOL_TRUE:
        return True
    if low in _BOOL_FALSE:
        return False
    raise ConfigError(f"config key {key}: expected a boolean, got {raw!r}")


# section -> key -> (TrainerConfig field, type)
_TRAIN_SCHEMA: dict[str, dict[str, tuple[str, type]]] = {
    "data": {
        "dir": ("data_dir", str),
    },
    "model": {
        "classes": ("num_classes", int),
        "stem_channels": ("stem_channels", int),
        "hidden_channels": ("hidden_channels", int),
    },
    "train": {
        "iters": ("total_iters", int),
        "warmup": ("warmup_iters", int),
        "eval_interval": ("eval_interval", int),
        "batch_k": ("batch_k", int),
        "lr_encoder": ("lr_encoder", float),
        "lr_decoder": ("lr_decoder", float),
        "lr_decay": ("lr_decay", str),
        "lr_power": ("lr_power", float),
        "weight_decay": ("weight_decay", float),
        "beta1": ("beta1", float),
        "beta2": ("beta2", float),
        "eps": ("eps", float),
        "seed": ("seed", int),
        "out": ("out_dir", str),
        "run_id": ("run_id", str),
        "augment": ("augment", bool),
        "eval_batch": ("eval_batch", int),
        "save_checkpoints": ("save_checkpoints", bool),
    },
    "dts": {
        "group1": ("group1", str),
        "group2": ("group2", str),
        "bidirectional": ("bidirectional", bool),
        "routing": ("routing", str),
        "ema_momentum": ("ema_momentum", float),
        "conf_threshold": ("conf_threshold", float),
        "prob_window": ("prob_window", int),
        "prob_cumulative": ("prob_cumulative", bool),
    },
}


def _read_ini(path) -> configparser.ConfigParser:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"config file {path}: {exc}") from exc
    return parser


def _apply_schema(parser: configparser.ConfigParser, schema, target, path) -> None:
    for section in parser.sections():
        if section not in schema:
            raise ConfigError(f"config file {path}: unknown section [{section}]")
        keys = schema[section]
        for key, raw in parser.items(section):
            if key not in keys:
                raise ConfigError(
                    f"config file {path}: unknown key {key!r} in [{section}]")
            attr, typ = keys[key]
            try:
                if typ is bool:
                    value = _parse_bool(raw, key)
                else:
                    value = typ(raw.strip())
            except ValueError as exc:
                raise ConfigError(
                    f"config file {path}: key {key!r}: {exc}") from exc
            setattr(target, attr, value)


def load_train_config(path) -> TrainerConfig:
    """Parse an INI file into a TrainerConfig; unknown keys are rejected."""
    cfg = TrainerConfig()
    _apply_schema(_read_ini(path), _TRAIN_SCHEMA, cfg, path)
    return cfg


def save_train_config(cfg: TrainerConfig, path) -> None:
    """Write a config snapshot able to round-trip through load_train_config."""
    lines = []
    for section, keys in _TRAIN_SCHEMA.items():
        lines.append(f"[{section}]")
        for key, (attr, typ) in keys.items():
            value = getattr(cfg, attr)
            if typ is bool:
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        lines.append("")
    with open(path, "w") as fh:
        fh.write("\n".join(lines))


@dataclass
class GenConfig:
    out_dir: str = ""
    seed: int = 0
    n_source: int = 800
    n_target: int = 800
    n_eval: int = 200
    n_source_eval: int = 0
    height: int = 64
    width: int = 64
    num_classes: int = 5
    paired: bool = False

    def validate(self) -> None:
        if min(self.n_source, self.n_target, self.n_eval) < 1:
            raise ConfigError("gen-data: source/target/eval counts must be positive")
        if self.n_source_eval < 0:
            raise ConfigError("gen-data: source_eval count must be >= 0")
        if self.height < 32 or self.width < 32:
            raise ConfigError("gen-data: minimum resolution is 32x32")
        if not 2 <= self.num_classes <= 8:
            raise ConfigError("gen-data: classes must lie in [2,8]")


_GEN_SCHEMA = {
    "gen": {
        "out": ("out_dir", str),
        "seed": ("seed", int),
        "source": ("n_source", int),
        "target": ("n_target", int),
        "eval": ("n_eval", int),
        "source_eval": ("n_source_eval", int),
        "height": ("height", int),
        "width": ("width", int),
        "classes": ("num_classes", int),
        "paired": ("paired", bool),
    },
}


def load_gen_config(path) -> GenConfig:
    cfg = GenConfig()
    _apply_schema(_read_ini(path), _GEN_SCHEMA, cfg, path)
    return cfg
