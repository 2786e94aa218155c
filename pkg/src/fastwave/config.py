"""Sectioned ``key = value`` run configuration.

::

    [model]
    base_channels = 16
    [train]
    rates = 8000, 24000

Unknown sections or keys are rejected with the offending line number.
"""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path

from .edm import RHO, SIGMA_MAX, SIGMA_MIN
from .model import ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def _int_list(text: str) -> tuple:
    return tuple(int(v) for v in text.replace(",", " ").split())


_PARSERS = {int: int, float: float, tuple: _int_list}
_TYPES = {"int": int, "float": float, "tuple": tuple}


def _fields(cls) -> dict:
    default = cls()
    return {f.name: (_TYPES[f.type], getattr(default, f.name)) for f in fields(cls)}


def _schema() -> dict:
    train = _fields(TrainConfig)
    return {
        "model": _fields(ModelConfig),
        "train": train,
        "diffusion": {"sigma_min": (float, SIGMA_MIN), "sigma_max": (float, SIGMA_MAX),
                      "rho": (float, RHO)},
        "eval": {"nfe": (int, 8), "rates": train["rates"]},
    }


SCHEMA = _schema()


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    """Typed value map ``section -> key -> value`` with schema defaults."""

    def __init__(self, values: dict | None = None):
        self.values = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
        for section, kv in (values or {}).items():
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]")
            for key, v in kv.items():
                self.set(section, key, v)

    def set(self, section: str, key: str, value) -> None:
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        self.values[section][key] = value

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        cfg = cls()
        section = None
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("["):
                if not line.endswith("]"):
                    raise ConfigError(f"malformed section header {raw.strip()!r}", lineno)
                section = line[1:-1].strip()
                if section not in SCHEMA:
                    raise ConfigError(f"unknown section [{section}]", lineno)
                continue
            if "=" not in line:
                raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno)
            if section is None:
                raise ConfigError("key outside of a section", lineno)
            key, _, text_value = (part.strip() for part in line.partition("="))
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]", lineno)
            typ = SCHEMA[section][key][0]
            try:
                cfg.values[section][key] = _PARSERS[typ](text_value)
            except ValueError:
                raise ConfigError(f"invalid {typ.__name__} for {key!r}: {text_value!r}", lineno) from None
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.parse(Path(path).read_text())

    def dumps(self) -> str:
        out = []
        for section, kv in self.values.items():
            out.append(f"[{section}]")
            out.extend(f"{k} = {_format(v)}" for k, v in kv.items())
            out.append("")
        return "\n".join(out)

    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.values["model"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.values["train"])

    def schedule_kwargs(self) -> dict:
        return dict(self.values["diffusion"])

    @classmethod
    def toy(cls) -> "RunConfig":
        cfg = cls()
        cfg.values["model"].update(ModelConfig.toy().to_dict())
        toy = TrainConfig.toy()
        cfg.values["train"].update({f.name: getattr(toy, f.name) for f in fields(TrainConfig)})
        return cfg
