"""Experiment configuration: one JSON file drives every pipeline stage.

Sections mirror the library's own dataclasses, so a config round-trips through
``to_dict``/``from_dict`` and its canonical JSON hashes to a stable
provenance tag. Invalid input raises :class:`ConfigError` naming the dotted
path of the offending field.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .networks import NetworkConfig
from .quantizer import QuantizerSpec
from .synthetic import SyntheticSceneSpec
from .training import RATE_UNITS, LossWeights, TrainConfig

CONFIG_FORMAT = 1


class ConfigError(ValueError):
    """Invalid configuration; ``path`` is the dotted field path at fault."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass
class DatasetConfig:
    manifest: str | None = None
    synthetic: SyntheticSceneSpec = field(default_factory=SyntheticSceneSpec)


@dataclass
class EpiConfig:
    L: int = 3
    strip_width: int = 8


@dataclass
class QuantizerConfig:
    levels: int = 256
    lo: float = -1.0
    hi: float = 1.0
    sigma: float | None = None
    window: int = 9

    def spec(self) -> QuantizerSpec:
        return QuantizerSpec(self.levels, self.lo, self.hi, self.sigma, self.window)


@dataclass
class TrainSection:
    epochs: int = 10
    iterations: int = 200
    batchsize: int = 1
    base_lr: float = 1e-3
    decay_rate: float = 0.7
    disc_lr_scale: float = 0.1
    pretrain_steps: int = 500
    softness: float = 1.0
    non_saturating: bool = False
    rate_unit: str = "code_bits"
    checkpoint_every: int = 0


@dataclass
class EvaluationConfig:
    fps: float = 30.0
    count_reference_bits: bool = False
    sweep: bool = False


@dataclass
class BdConfig:
    anchor: str | None = None
    test: str | None = None


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "out"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    epi: EpiConfig = field(default_factory=EpiConfig)
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainSection = field(default_factory=TrainSection)
    loss: LossWeights = field(default_factory=LossWeights)
    operating_points: list[float] = field(default_factory=lambda: [1e-5, 3e-6, 1e-6, 3e-7])
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    bd: BdConfig = field(default_factory=BdConfig)

    # -- views used by the stages --

    def quantizer_spec(self) -> QuantizerSpec:
        return self.quantizer.spec()

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **dataclasses.asdict(self.train))

    def to_dict(self) -> dict:
        return _to_plain(self)

    def hash(self) -> str:
        """Hash of everything except where outputs go."""
        d = self.to_dict()
        d.pop("output_dir")
        return digest(d)

    def model_hash(self) -> str:
        """Hash of the fields a trained checkpoint depends on."""
        d = self.to_dict()
        keep = ("seed", "dataset", "epi", "quantizer", "network", "train", "loss")
        return digest({k: d[k] for k in keep})


def digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


# -- building from plain data --

def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None:
            if type(None) in args:
                return None
            raise ConfigError(path, "must not be null")
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, path)
    if origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        (arg, *_rest) = typing.get_args(tp) or (Any,)
        items = [_coerce(arg, v, f"{path}[{i}]") for i, v in enumerate(value)]
        return tuple(items) if origin is tuple else items
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    return value


def _build(cls, data, path: str):
    if isinstance(data, cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    for key in data:
        if key not in names:
            raise ConfigError(_join(path, key), "unknown field")
    for f in dataclasses.fields(cls):
        required = f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING
        if f.init and required and f.name not in data:
            raise ConfigError(_join(path, f.name), "required field is missing")
    kwargs = {k: _coerce(hints[k], v, _join(path, k)) for k, v in data.items()}
    # range checks on this section run first so the error names the exact field
    for dotted, ok, msg in _CHECKS:
        section, _, key = dotted.rpartition(".")
        if section == path and key in kwargs and not ok(kwargs[key]):
            raise ConfigError(dotted, f"{msg}, got {kwargs[key]!r}")
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(_guess_path(path, names, str(exc)), str(exc)) from exc


def _join(path: str, key: str) -> str:
    return f"{path}.{key}" if path else key


def _guess_path(path: str, names, message: str) -> str:
    for name in sorted(names, key=len, reverse=True):
        if name in message:
            return _join(path, name)
    return path


_CHECKS: list[tuple[str, typing.Callable[[Any], bool], str]] = [
    ("epi.L", lambda v: v >= 1, "must be >= 1"),
    ("epi.strip_width", lambda v: v >= 1, "must be >= 1"),
    ("quantizer.levels", lambda v: v >= 2, "must be >= 2"),
    ("quantizer.window", lambda v: v >= 1 and v % 2 == 1, "must be a positive odd integer"),
    ("train.epochs", lambda v: v >= 0, "must be >= 0"),
    ("train.iterations", lambda v: v >= 0, "must be >= 0"),
    ("train.batchsize", lambda v: v >= 1, "must be >= 1"),
    ("train.base_lr", lambda v: v > 0, "must be > 0"),
    ("train.decay_rate", lambda v: 0 < v <= 1, "must lie in (0, 1]"),
    ("train.disc_lr_scale", lambda v: v > 0, "must be > 0"),
    ("train.pretrain_steps", lambda v: v >= 0, "must be >= 0"),
    ("train.softness", lambda v: v > 0, "must be > 0"),
    ("train.rate_unit", lambda v: v in RATE_UNITS, f"must be one of {list(RATE_UNITS)}"),
    ("train.checkpoint_every", lambda v: v >= 0, "must be >= 0"),
    ("loss.alpha", lambda v: v >= 0, "must be >= 0"),
    ("loss.beta", lambda v: v >= 0, "must be >= 0"),
    ("evaluation.fps", lambda v: v > 0, "must be > 0"),
]


def _lookup(d: dict, dotted: str):
    for part in dotted.split("."):
        d = d[part]
    return d


def from_dict(data: dict) -> ExperimentConfig:
    """Validate plain data (e.g. parsed JSON) into an :class:`ExperimentConfig`."""
    data = copy.deepcopy(data)
    fmt = data.pop("format", CONFIG_FORMAT)
    if fmt != CONFIG_FORMAT:
        raise ConfigError("format", f"unsupported config format {fmt!r}")
    cfg = _build(ExperimentConfig, data, "")
    plain = cfg.to_dict()
    for dotted, ok, msg in _CHECKS:
        if not ok(_lookup(plain, dotted)):
            raise ConfigError(dotted, f"{msg}, got {_lookup(plain, dotted)!r}")
    for i, beta in enumerate(cfg.operating_points):
        if beta < 0:
            raise ConfigError(f"operating_points[{i}]", "must be >= 0")
    if len(set(cfg.operating_points)) != len(cfg.operating_points):
        raise ConfigError("operating_points", "values must be distinct")
    try:
        cfg.quantizer_spec()
    except ValueError as exc:
        raise ConfigError("quantizer", str(exc)) from exc
    return cfg


def parse_override(text: str) -> tuple[str, Any]:
    """``a.b=value`` with ``value`` read as JSON when it parses, else as a string."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError("--set", f"expected key=value, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def apply_overrides(data: dict, overrides) -> dict:
    data = copy.deepcopy(data)
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            nxt = node.setdefault(part, {})
            if not isinstance(nxt, dict):
                raise ConfigError(key, f"{part!r} is not a section")
            node = nxt
        node[parts[-1]] = value
    return data


def load_config(path, overrides=(), output_dir: str | None = None) -> ExperimentConfig:
    """Read a JSON config, apply ``--set`` overrides and validate."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError("", f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("", f"{path} must hold a JSON object")
    data = apply_overrides(data, overrides)
    if output_dir is not None:
        data["output_dir"] = output_dir
    return from_dict(data)


def dump_config(cfg: ExperimentConfig, path) -> None:
    d = {"format": CONFIG_FORMAT, **cfg.to_dict()}
    Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
