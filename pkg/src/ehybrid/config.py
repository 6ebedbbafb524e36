"""Run configuration: flat ``section.key = value`` files.

The syntax is the TOML subset of dotted keys, so files parse with the
standard TOML reader; ``[section]`` headers are accepted as well. The
fusion block is written as an inline table::

    model.hf = { variant = "E", subvariant = 0 }
"""

from __future__ import annotations

import json
import math
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .network import ModelSpec, build_default_spec
from .training import ARMS, SWEEP_FRACTIONS, TrainConfig
from .wavelets import MorletParams


@dataclass(frozen=True)
class ModelSection:
    resolution: int = 32
    num_classes: int = 8
    in_channels: int = 3
    width_mult: float = 1.0
    depth_mult: float = 1.0
    activation: str = "swish"
    arm: str = "hybrid"
    hf: dict = field(default_factory=lambda: {"variant": "E", "subvariant": 0})


@dataclass(frozen=True)
class ScatteringSection:
    j_hf1: int = 2
    j_hf2: int = 3
    L: int = 8
    A: int = 4
    include_order0: bool = True
    sigma: float = 0.8
    xi: float = 3 * math.pi / 4
    slant: float = 0.5


@dataclass(frozen=True)
class DataSection:
    source: str = "synthetic"
    classes: int = 8
    per_class: int = 250
    seed: int = 0
    train_dir: str = ""
    test_dir: str = ""


@dataclass(frozen=True)
class ExperimentSection:
    seeds: tuple = (0,)
    fractions: tuple = SWEEP_FRACTIONS
    arms: tuple = ARMS


@dataclass(frozen=True)
class OutputSection:
    dir: str = "runs/default"


@dataclass(frozen=True)
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    scattering: ScatteringSection = field(default_factory=ScatteringSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataSection = field(default_factory=DataSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    output: OutputSection = field(default_factory=OutputSection)

    def model_spec(self, hybrid: bool = True) -> ModelSpec:
        m, s = self.model, self.scattering
        try:
            return build_default_spec(
                m.resolution, m.num_classes, m.hf["variant"], m.hf["subvariant"], m.width_mult,
                m.depth_mult, hybrid=hybrid, L=s.L, A=s.A, include_order0=s.include_order0,
                in_channels=m.in_channels, activation=m.activation,
                morlet=MorletParams(s.sigma, s.xi, s.slant), hf_j=(s.j_hf1, s.j_hf2))
        except ConfigError as exc:
            msg = str(exc)
            key = ("scattering.j_hf1" if "HF-1" in msg else "scattering.j_hf2" if "HF-2" in msg
                   else "model.hf" if "fusion" in msg
                   else "model.resolution" if "resolution must" in msg else "model")
            raise ConfigError(f"{key}: {msg}") from None


_SECTION_TYPES = {"model": ModelSection, "scattering": ScatteringSection, "train": TrainConfig,
                  "data": DataSection, "experiment": ExperimentSection, "output": OutputSection}


def _coerce(key: str, value, default):
    """Check ``value`` against the type of the field's default."""
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        ok = isinstance(value, list)
        if ok:
            kind = type(default[0]) if default else object
            value = tuple(float(v) if kind is float and isinstance(v, int) else v for v in value)
            ok = all(isinstance(v, kind) and not isinstance(v, bool) for v in value)
    else:
        ok = isinstance(value, dict)
    if not ok:
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}")
    return value


def _hf(value: dict) -> dict:
    unknown = set(value) - {"variant", "subvariant"}
    if unknown:
        raise ConfigError(f"model.hf.{sorted(unknown)[0]}: unknown key")
    hf = {"variant": value.get("variant", "E"), "subvariant": value.get("subvariant", 0)}
    if not isinstance(hf["variant"], str):
        raise ConfigError(f"model.hf.variant: expected str, got {hf['variant']!r}")
    if not isinstance(hf["subvariant"], int) or isinstance(hf["subvariant"], bool):
        raise ConfigError(f"model.hf.subvariant: expected int, got {hf['subvariant']!r}")
    return hf


def from_dict(tree: dict) -> RunConfig:
    sections = {}
    for name, values in tree.items():
        if name not in _SECTION_TYPES:
            raise ConfigError(f"{name}: unknown config section")
        if not isinstance(values, dict):
            raise ConfigError(f"{name}: expected a section of keys, got {values!r}")
        cls = _SECTION_TYPES[name]
        defaults = cls()
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in values.items():
            if key not in known:
                raise ConfigError(f"{name}.{key}: unknown config key")
            if name == "model" and key == "hf":
                kwargs[key] = _hf(_coerce("model.hf", value, defaults.hf))
            else:
                kwargs[key] = _coerce(f"{name}.{key}", value, getattr(defaults, key))
        sections[name] = cls(**kwargs)
    cfg = RunConfig(**sections)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.model.arm not in ("hybrid", "baseline"):
        raise ConfigError(f"model.arm: expected hybrid or baseline, got {cfg.model.arm!r}")
    if cfg.data.source not in ("synthetic", "folder"):
        raise ConfigError(f"data.source: expected synthetic or folder, got {cfg.data.source!r}")
    if cfg.data.source == "folder" and not (cfg.data.train_dir and cfg.data.test_dir):
        raise ConfigError("data.train_dir: folder datasets need data.train_dir and data.test_dir")
    if cfg.data.source == "synthetic" and cfg.data.classes != cfg.model.num_classes:
        raise ConfigError(f"model.num_classes: {cfg.model.num_classes} differs from data.classes "
                          f"= {cfg.data.classes}")
    if not cfg.experiment.seeds:
        raise ConfigError("experiment.seeds: at least one seed is required")
    for f in cfg.experiment.fractions:
        if not 0 < f <= 1:
            raise ConfigError(f"experiment.fractions: {f} is outside (0, 1]")
    for arm in cfg.experiment.arms:
        if arm not in ARMS:
            raise ConfigError(f"experiment.arms: unknown arm {arm!r}")
    if not cfg.output.dir:
        raise ConfigError("output.dir: must not be empty")
    cfg.model_spec()


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    try:
        tree = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: syntax error: {exc}") from None
    return from_dict(tree)


BUNDLED_DIR = Path(__file__).with_name("configs")


def resolve_config_path(path) -> Path:
    """``path`` itself, or a bundled config of that name (e.g. ``desk32.cfg``)."""
    path = Path(path)
    if not path.is_file() and path.parent == Path(".") and (BUNDLED_DIR / path.name).is_file():
        return BUNDLED_DIR / path.name
    return path


def load_config(path) -> RunConfig:
    path = resolve_config_path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), str(path))


def _literal(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ConfigError(f"cannot serialize non-finite value {value}")
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (tuple, list)):
        return "[" + ", ".join(_literal(v) for v in value) + "]"
    if isinstance(value, dict):
        return "{ " + ", ".join(f"{k} = {_literal(v)}" for k, v in value.items()) + " }"
    raise ConfigError(f"cannot serialize {value!r}")


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for name in _SECTION_TYPES:
        section = getattr(cfg, name)
        for f in fields(section):
            lines.append(f"{name}.{f.name} = {_literal(getattr(section, f.name))}")
        lines.append("")
    return "\n".join(lines)


def with_overrides(cfg: RunConfig, seed=None, out=None, arm=None, fraction=None, ablation=None) -> RunConfig:
    """Apply command-line flags on top of a loaded config."""
    train = cfg.train
    if seed is not None:
        train = replace(train, seed=seed)
    if fraction is not None:
        train = replace(train, subsample_fraction=fraction)
    if ablation is not None:
        train = replace(train, ablation=ablation)
    model = replace(cfg.model, arm=arm) if arm is not None else cfg.model
    output = replace(cfg.output, dir=out) if out is not None else cfg.output
    experiment = replace(cfg.experiment, seeds=(seed,)) if seed is not None else cfg.experiment
    new = replace(cfg, model=model, train=train, output=output, experiment=experiment)
    validate(new)
    return new
