"""Flat ``key = value`` run configuration.

Recognised keys:

* ``arch`` (required) and ``preset`` (``toy`` by default, or ``full`` or
  ``none``). A preset fills the model keys first; explicit keys override it.
* model keys: ``input_size`` (``64x64`` or ``64``), ``embed_dim``, ``depths``,
  ``heads``, ``stem_widths`` (comma separated), ``window_size``,
  ``lgg_window``, ``mlp_ratio``, ``memory_units``, ``patch_size``,
  ``out_channels``.
* training keys: ``lr``, ``weight_decay``, ``beta1``, ``beta2``, ``eps``,
  ``batch_size``, ``epochs``, ``loss``, ``seed``, ``eval_every``, ``threshold``.
* ``split_ratio``: training share of the fold split, 0.8 by default.

Lines starting with ``#`` and blank lines are ignored. Unknown or repeated
keys are errors.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .errors import ConfigError
from .models import ModelConfig
from .training import TrainConfig

PRESETS = ("toy", "full", "none")
_TUPLE_KEYS = ("depths", "heads", "stem_widths")
_MODEL_KEYS = tuple(f.name for f in dataclasses.fields(ModelConfig) if f.name != "arch")
_TRAIN_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig))
KEYS = ("arch", "preset", "split_ratio") + _MODEL_KEYS + _TRAIN_KEYS


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    split_ratio: float = 0.8

    def to_dict(self):
        return {"model": self.model.to_dict(), "train": self.train.to_dict(), "split_ratio": self.split_ratio}

    @classmethod
    def from_dict(cls, d):
        return cls(ModelConfig(**d["model"]), TrainConfig(**d["train"]), d["split_ratio"])


def _parse_size(text):
    parts = text.lower().replace(",", "x").split("x")
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2:
        raise ValueError(text)
    return tuple(int(p) for p in parts)


def _convert(key, text, template):
    try:
        if key == "input_size":
            return _parse_size(text)
        if key in _TUPLE_KEYS:
            return tuple(int(p) for p in text.split(",") if p.strip())
        current = getattr(template, key)
        if isinstance(current, bool):
            raise ValueError(text)
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value {text!r} for key {key!r}") from None


def parse_pairs(text):
    """``{key: raw value}`` from config text, rejecting malformed lines, unknown and repeated keys."""
    pairs = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {number}: expected 'key = value', got {raw!r}")
        if key not in KEYS:
            raise ConfigError(f"line {number}: unknown config key {key!r}")
        if key in pairs:
            raise ConfigError(f"line {number}: key {key!r} given twice")
        pairs[key] = value
    return pairs


def build_run_config(pairs):
    if "arch" not in pairs:
        raise ConfigError("config needs an 'arch' key")
    preset = pairs.get("preset", "toy")
    if preset not in PRESETS:
        raise ConfigError(f"preset must be one of {', '.join(PRESETS)}, got {preset!r}")
    arch = pairs["arch"]
    if preset == "toy":
        model = ModelConfig.toy(arch)
    elif preset == "full":
        model = ModelConfig.full(arch)
    else:
        model = ModelConfig(arch)
    model_updates = {k: _convert(k, v, model) for k, v in pairs.items() if k in _MODEL_KEYS}
    model = dataclasses.replace(model, **model_updates)
    model.validate()
    train = TrainConfig()
    train = TrainConfig(**{**train.to_dict(), **{k: _convert(k, v, train) for k, v in pairs.items() if k in _TRAIN_KEYS}})
    try:
        ratio = float(pairs.get("split_ratio", 0.8))
    except ValueError:
        raise ConfigError(f"bad value {pairs['split_ratio']!r} for key 'split_ratio'") from None
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"split_ratio must lie in (0, 1), got {ratio}")
    return RunConfig(model, train, ratio)


def parse_config(text):
    return build_run_config(parse_pairs(text))


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
