"""Run configuration: flat ``key = value`` text files with ``#`` comments.

Keys mirror :class:`~mutualvpr.trainer.TrainConfig` field names, plus the
synthetic-world, path and evaluation keys below. Precedence is
command-line flag > config file > built-in default.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import get_type_hints

from .errors import ParameterError
from .trainer import TrainConfig


@dataclass(frozen=True)
class RunConfig(TrainConfig):
    # synthetic world
    num_cells: int = 100
    places_per_cell: int = 1
    A: int = 3
    tokens: int = 8
    fov: float = 90.0
    noise_sigma: float = 0.05
    occlusion_prob: float = 0.3
    rho: float = 0.3
    query_rho: float = 0.3
    queries_per_place: int = 2
    start_angles: tuple = (0.0, 30.0)
    crop_step: float = 60.0
    # paths
    dataset: str = ""
    out: str = ""
    # evaluation
    ks: tuple = (1, 5, 10, 20)
    radius: float = 25.0

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})


_TUPLE_ITEM = {"start_angles": float, "ks": int}


def _types():
    return get_type_hints(RunConfig)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_value(key: str, text: str):
    types = _types()
    if key not in types:
        raise ParameterError(f"unknown config key {key!r}")
    t = types[key]
    text = text.strip()
    try:
        if t is bool:
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if t is int:
            return int(text)
        if t is float:
            return float(text)
        if t is tuple:
            item = _TUPLE_ITEM[key]
            return tuple(item(x) for x in text.split(",") if x.strip())
        return text
    except ValueError:
        raise ParameterError(f"bad value for {key}: {text!r}") from None


def parse_text(text: str) -> dict:
    """Parse ``key = value`` lines into a dict of typed overrides."""
    out = {}
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"config line {no}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = parse_value(key, value)
    return out


def dump(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {_format(getattr(cfg, f.name))}\n" for f in fields(cfg))


def read(path) -> RunConfig:
    return RunConfig(**parse_text(Path(path).read_text(encoding="utf-8")))


def write(cfg: RunConfig, path) -> None:
    Path(path).write_text(dump(cfg), encoding="utf-8")


def resolve(config_path=None, flags: dict | None = None, sets=()) -> RunConfig:
    """Defaults, then the config file, then explicit flags, then ``--set`` pairs."""
    values = {}
    if config_path:
        values.update(parse_text(Path(config_path).read_text(encoding="utf-8")))
    for k, v in (flags or {}).items():
        if v is not None:
            values[k] = v
    for item in sets:
        if "=" not in item:
            raise ParameterError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = parse_value(k.strip(), v)
    return RunConfig(**values)
