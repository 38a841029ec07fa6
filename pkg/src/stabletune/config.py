"""Experiment configuration files (YAML or JSON) mapped onto the dataclasses.

Unknown keys and badly typed values are rejected with the dotted path of the
offending field, e.g. ``run.adam.lr: expected a number, got 'fast'``.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .data import SyntheticTaskSpec
from .model import ModelConfig
from .trainer import PretrainConfig, RunConfig


class ConfigError(ValueError):
    pass


GRID_METHODS = ("lr", "llrd", "mixout", "prior_wd", "plain_wd", "steps")

DEFAULT_GRIDS: dict[str, list] = {
    "lr": [2e-5, 5e-5, 1e-4],
    "llrd": [[lr, d] for lr in (2e-5, 5e-5, 1e-4) for d in (0.9, 0.95)],
    "mixout": [0.1, 0.3, 0.5, 0.7, 0.9],
    "prior_wd": [1e-3, 1e-2, 1e-1, 1.0],
    "plain_wd": [1e-4, 1e-3, 1e-2, 1e-1],
    "steps": [200, 400, 800, 1600, 3200],
}


@dataclass(frozen=True)
class TsvSource:
    path: str
    columns: dict[str, str] | None = None
    task_kind: str = "classification"
    metric: str | None = None
    max_seq_len: int = 32


@dataclass(frozen=True)
class DatasetSection:
    synthetic: SyntheticTaskSpec | None = None
    tsv: TsvSource | None = None
    downsample: int | None = None
    downsample_seed: int = 0


@dataclass(frozen=True)
class PretrainSection:
    snapshot: str | None = None  # existing checkpoint to fine-tune from
    fresh: bool = False  # fine-tune from random init instead
    seed: int = 0
    settings: PretrainConfig = field(default_factory=PretrainConfig)


@dataclass(frozen=True)
class GridSection:
    method: str = "mixout"
    values: list | None = None

    def resolved_values(self) -> list:
        return list(self.values) if self.values is not None else list(DEFAULT_GRIDS[self.method])


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: dict[str, Any] = field(default_factory=dict)
    run: RunConfig = field(default_factory=RunConfig)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    seeds: list[tuple[int, int]] = field(default_factory=lambda: [(s, s) for s in range(20)])
    grid: GridSection | None = None
    output: str = "runs"
    workers: int = 1


# ---------------------------------------------------------------------------
# generic dataclass builder


def _type_name(tp) -> str:
    return getattr(tp, "__name__", str(tp))


def _convert(tp, value, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        options = [a for a in args if a is not type(None)]
        errors = []
        for opt in options:
            try:
                return _convert(opt, value, path)
            except ConfigError as exc:
                errors.append(str(exc))
        raise ConfigError(errors[0] if len(errors) == 1 else f"{path}: no accepted form matches {value!r}")
    if tp is Any:
        return value
    if dataclasses.is_dataclass(tp):
        return build(tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping, got {value!r}")
        kt, vt = args or (Any, Any)
        return {_convert(kt, k, path): _convert(vt, v, f"{path}.{k}") for k, v in value.items()}
    if origin in (list, tuple) or tp in (list, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        inner = args[0] if args else Any
        return [_convert(inner, v, f"{path}[{i}]") for i, v in enumerate(value)]
    raise ConfigError(f"{path}: unsupported field type {_type_name(tp)}")


def build(cls, data, path: str = ""):
    """Instantiate dataclass ``cls`` from a mapping, validating keys and types."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected a mapping, got {data!r}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else str(key)
        if key not in names:
            raise ConfigError(f"{sub}: unknown key (expected one of {sorted(names)})")
        kwargs[key] = _convert(hints[key], value, sub)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or '<root>'}: {exc}") from None
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path or '<root>'}: {exc}") from None


# ---------------------------------------------------------------------------
# experiment files


def parse_seeds(value, path: str = "seeds") -> list[tuple[int, int]]:
    """A list means paired seeds (s, s); ``{init: [...], order: [...]}`` means
    every init seed crossed with every order seed."""
    if isinstance(value, str):
        try:
            value = [int(s) for s in value.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"{path}: expected comma-separated integers, got {value!r}") from None
    if isinstance(value, dict):
        unknown = set(value) - {"init", "order"}
        if unknown:
            raise ConfigError(f"{path}.{sorted(unknown)[0]}: unknown key (expected init, order)")
        inits = _convert(list[int], value.get("init", [0]), f"{path}.init")
        orders = _convert(list[int], value.get("order", [0]), f"{path}.order")
        pairs = list(itertools.product(inits, orders))
    else:
        pairs = [(s, s) for s in _convert(list[int], value, path)]
    if not pairs:
        raise ConfigError(f"{path}: empty seed list")
    return pairs


def parse_experiment(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>: expected a mapping")
    data = dict(data)
    seeds = data.pop("seeds", None)
    model = data.pop("model", None) or {}
    if not isinstance(model, dict):
        raise ConfigError("model: expected a mapping")
    model = dict(model)
    model_fields = {f.name: f for f in dataclasses.fields(ModelConfig)}
    hints = typing.get_type_hints(ModelConfig)
    for k, v in model.items():
        if k not in model_fields:
            raise ConfigError(f"model.{k}: unknown key (expected one of {sorted(model_fields)})")
        model[k] = _convert(hints[k], v, f"model.{k}")
    cfg = build(ExperimentConfig, data)
    cfg = dataclasses.replace(cfg, model=model)
    if seeds is not None:
        cfg = dataclasses.replace(cfg, seeds=parse_seeds(seeds))
    ds = cfg.dataset
    if ds.synthetic is not None and ds.tsv is not None:
        raise ConfigError("dataset: give at most one of synthetic / tsv")
    if ds.tsv is not None and not Path(ds.tsv.path).exists():
        raise ConfigError(f"dataset.tsv.path: {ds.tsv.path} does not exist")
    if cfg.pretrain.snapshot is not None and not Path(cfg.pretrain.snapshot).exists():
        raise ConfigError(f"pretrain.snapshot: {cfg.pretrain.snapshot} does not exist")
    if cfg.grid is not None:
        if cfg.grid.method not in GRID_METHODS:
            raise ConfigError(f"grid.method: unknown method {cfg.grid.method!r}; expected one of {GRID_METHODS}")
        if cfg.grid.values is not None and not cfg.grid.values:
            raise ConfigError("grid.values: empty grid")
    if cfg.workers < 1:
        raise ConfigError("workers: must be >= 1")
    return cfg


def load_experiment(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: no such config file")
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: cannot parse: {exc}") from None
    return parse_experiment(data or {})
