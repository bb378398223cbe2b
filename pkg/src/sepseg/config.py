"""Flat key-value run configuration.

Plain text files with ``key = value`` lines and ``#`` comments. Unknown
keys are rejected; every key has a documented default.
"""

from __future__ import annotations

from dataclasses import dataclass, fields


class ConfigError(ValueError):
    """Unparseable configuration or unknown/invalid key."""


def _bool(s):
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# key -> (attribute, parser, default)
KEYS = {
    "model.variant": ("model_variant", str, "proposed"),
    "model.base-depth": ("model_base_depth", int, 64),
    "model.kernel": ("model_kernel", int, 3),
    "model.num-classes": ("model_num_classes", int, 2),
    "train.iterations": ("train_iterations", int, 100_000),
    "train.batch-size": ("train_batch_size", int, 16),
    "train.lr": ("train_lr", float, 0.001),
    "train.dropout": ("train_dropout", float, 0.05),
    "train.eval-every": ("train_eval_every", int, 500),
    "train.augment": ("train_augment", _bool, True),
    "data.window-low": ("data_window_low", float, -100.0),
    "data.window-high": ("data_window_high", float, 200.0),
    "data.resize": ("data_resize", int, 256),
    "seed": ("seed", int, 0),
    "folds": ("folds", int, 4),
    "fold-index": ("fold_index", int, 0),
}


@dataclass
class RunConfig:
    model_variant: str = "proposed"
    model_base_depth: int = 64
    model_kernel: int = 3
    model_num_classes: int = 2
    train_iterations: int = 100_000
    train_batch_size: int = 16
    train_lr: float = 0.001
    train_dropout: float = 0.05
    train_eval_every: int = 500
    train_augment: bool = True
    data_window_low: float = -100.0
    data_window_high: float = 200.0
    data_resize: int = 256
    seed: int = 0
    folds: int = 4
    fold_index: int = 0


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        attr, parser, _ = KEYS[key]
        try:
            setattr(cfg, attr, parser(value))
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from exc
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc


def render_config(cfg: RunConfig) -> str:
    """Snapshot that parses back to an identical configuration."""
    lines = []
    for key, (attr, parser, _) in KEYS.items():
        value = getattr(cfg, attr)
        if parser is _bool:
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
