"""Plain-text ``key=value`` run configuration.

Blank lines and lines starting with ``#`` are skipped. Unknown keys are
rejected. ``num_classes`` and ``input_size`` default to the dataset's values
when absent; every other key defaults to the values below.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

from .errors import ConfigError
from .model import ModelConfig
from .trainer import TrainConfig


def _ints(text):
    return tuple(int(v) for v in text.replace("x", ",").split(",") if v.strip())


def _switch(text):
    if text not in ("on", "off"):
        raise ValueError(f"expected on|off, got {text!r}")
    return text == "on"


PARSERS = {
    "num_classes": int,
    "input_size": _ints,
    "encoder_channels": _ints,
    "convs_per_stage": int,
    "batch_size": int,
    "base_lr": float,
    "momentum": float,
    "weight_decay": float,
    "lr_step": int,
    "lr_gamma": float,
    "max_iters": int,
    "seed": int,
    "class_balance": _switch,
    "log_every": int,
    "checkpoint_every": int,
}


@dataclass
class RunConfig:
    values: dict

    def model_config(self, num_classes=None, input_size=None) -> ModelConfig:
        v = self.values
        C = v.get("num_classes", num_classes)
        size = v.get("input_size", input_size)
        if C is None or size is None:
            raise ConfigError("num_classes and input_size must come from the config or the dataset")
        size = tuple(size)
        if len(size) == 1:
            size = size * 2
        kw = {}
        if "encoder_channels" in v:
            kw["encoder_channels"] = v["encoder_channels"]
        if "convs_per_stage" in v:
            kw["convs_per_stage"] = v["convs_per_stage"]
        return ModelConfig(num_classes=C, input_size=size, **kw)

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        try:
            return TrainConfig(**{k: val for k, val in self.values.items() if k in names})
        except ValueError as e:
            raise ConfigError(str(e)) from None

    @property
    def class_balance(self):
        return self.values.get("class_balance", False)


def parse_config(text: str, source="<config>") -> RunConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        if key not in PARSERS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = PARSERS[key](val)
        except ValueError as e:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {e}") from None
    return RunConfig(values)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read(), str(path))
