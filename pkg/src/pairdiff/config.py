"""Run configuration: one sectioned ``key = value`` file for every module.

Example::

    [run]
    seed = 0

    [data]
    image_size = 16
    n_samples = 2048

    [train]
    steps = 2000

Omitted keys take their defaults.  Unknown sections or keys are errors.
Tuple-valued keys are comma separated; ``none`` selects the default for
optional ones.  The config hash covers every key except ``run.out_dir``.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import SyntheticSpec
from .denoiser import DenoiserConfig
from .errors import ConfigError, UsageError
from .pig import TrainConfig
from .sampler import SamplerConfig
from .schedule import DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_SAMPLING_STEPS, DEFAULT_T

OUT_ENV = "PAIRDIFF_OUT"
DEFAULT_OUT = "runs"


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    out_dir: str | None = None


@dataclass(frozen=True)
class ScheduleSection:
    T: int = DEFAULT_T
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END


@dataclass(frozen=True)
class TrainSection:
    batch_size: int = 16
    steps: int = 2000
    lr: float = 1e-3
    lr_schedule: str = "cosine"
    checkpoint_every: int = 0


@dataclass(frozen=True)
class SampleSection:
    n_steps: int = DEFAULT_SAMPLING_STEPS
    stochastic: bool = False
    eta: float = 1.0
    clamp: bool = True
    batch_size: int = 64

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"sample.batch_size must be >= 1, got {self.batch_size}")


@dataclass(frozen=True)
class HeldoutSection:
    n_samples: int = 512
    seed: int = 1

    def __post_init__(self):
        if self.n_samples < 1:
            raise ConfigError(f"heldout.n_samples must be >= 1, got {self.n_samples}")


@dataclass(frozen=True)
class EvalSection:
    min_samples: int = 64

    def __post_init__(self):
        if self.min_samples < 2:
            raise ConfigError(f"eval.min_samples must be >= 2, got {self.min_samples}")


SECTIONS = {
    "run": RunSection,
    "data": SyntheticSpec,
    "heldout": HeldoutSection,
    "denoiser": DenoiserConfig,
    "schedule": ScheduleSection,
    "train": TrainSection,
    "sample": SampleSection,
    "eval": EvalSection,
}


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    heldout: HeldoutSection = field(default_factory=HeldoutSection)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    train: TrainSection = field(default_factory=TrainSection)
    sample: SampleSection = field(default_factory=SampleSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def __post_init__(self):
        if self.denoiser.image_size != self.data.image_size:
            raise ConfigError(f"denoiser.image_size={self.denoiser.image_size} "
                              f"but data.image_size={self.data.image_size}")
        self.train_config("guider")
        self.sampler_config()

    @property
    def seed(self) -> int:
        return self.run.seed

    def out_root(self) -> Path:
        return Path(self.run.out_dir or os.environ.get(OUT_ENV) or DEFAULT_OUT)

    def to_dict(self) -> dict:
        return {name: _section_dict(getattr(self, name)) for name in SECTIONS}

    def hash(self) -> str:
        """sha256 over every result-affecting field (all but the output directory)."""
        d = self.to_dict()
        d["run"].pop("out_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def to_text(self, out_dir: bool = True) -> str:
        """The config as a loadable file; ``out_dir=False`` drops ``run.out_dir``."""
        lines = []
        d = self.to_dict()
        if not out_dir:
            d["run"].pop("out_dir")
        for name, values in d.items():
            lines.append(f"[{name}]")
            lines.extend(f"{k} = {_format(v)}" for k, v in values.items())
            lines.append("")
        return "\n".join(lines)

    def replace(self, overrides: dict[str, dict[str, str]]) -> "RunConfig":
        """New config with string-valued ``{section: {key: value}}`` overrides applied."""
        merged = {name: dict(_section_dict(getattr(self, name))) for name in SECTIONS}
        for section, values in overrides.items():
            _check_section(section)
            cls = SECTIONS[section]
            hints = typing.get_type_hints(cls)
            for key, raw in values.items():
                if key not in hints:
                    raise UsageError(f"unknown key {section}.{key}")
                merged[section][key] = _parse(raw, hints[key], f"{section}.{key}")
        # the network follows the data size, and its depth the network size, unless pinned
        given = overrides.get("denoiser", {})
        if "image_size" not in given:
            merged["denoiser"]["image_size"] = merged["data"]["image_size"]
        if "channel_mult" not in given and merged["denoiser"]["image_size"] != self.denoiser.image_size:
            merged["denoiser"]["channel_mult"] = None
        return _build(merged)

    # derived module configs

    def train_config(self, model: str) -> TrainConfig:
        s, sch = self.train, self.schedule
        return TrainConfig(model=model, batch_size=s.batch_size, steps=s.steps, lr=s.lr,
                           lr_schedule=s.lr_schedule, seed=self.seed,
                           checkpoint_every=s.checkpoint_every, T=sch.T, beta_start=sch.beta_start,
                           beta_end=sch.beta_end)

    def sampler_config(self, seed: int | None = None) -> SamplerConfig:
        s, sch = self.sample, self.schedule
        return SamplerConfig.make(sch.T, sch.beta_start, sch.beta_end, s.n_steps, stochastic=s.stochastic,
                                  eta=s.eta, clamp=s.clamp, seed=self.seed if seed is None else seed)

    def heldout_spec(self) -> SyntheticSpec:
        return dataclasses.replace(self.data, n_samples=self.heldout.n_samples, seed=self.heldout.seed)


def _section_dict(obj) -> dict:
    d = obj.to_dict() if hasattr(obj, "to_dict") else dataclasses.asdict(obj)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _check_section(name: str) -> None:
    if name not in SECTIONS:
        raise UsageError(f"unknown config section [{name}]")


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ", ".join(str(v) for v in value)
    return str(value)


def _parse(raw: str, hint, where: str):
    """Convert one config string to the annotated type."""
    raw = raw.strip()
    args = typing.get_args(hint)
    optional = type(None) in args
    if optional:
        if raw.lower() == "none":
            return None
        hint = next(a for a in args if a is not type(None))
    origin = typing.get_origin(hint)
    try:
        if origin is tuple:
            elem = typing.get_args(hint)[0]
            return [elem(v.strip()) for v in raw.split(",") if v.strip()]
        if hint is bool:
            lowered = raw.lower()
            if lowered in ("true", "yes", "on", "1"):
                return True
            if lowered in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        return raw
    except ValueError:
        raise UsageError(f"{where}: cannot parse {raw!r} as {getattr(hint, '__name__', hint)}") from None


def _build(sections: dict[str, dict]) -> RunConfig:
    def make(name):
        values = {k: tuple(v) if isinstance(v, list) else v for k, v in sections[name].items()}
        return SECTIONS[name](**values)

    try:
        return RunConfig(**{name: make(name) for name in SECTIONS})
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc


def load_config(path=None, overrides: dict[str, dict[str, str]] | None = None) -> RunConfig:
    """Defaults, then the file at ``path`` (if any), then ``overrides``."""
    merged: dict[str, dict[str, str]] = {}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str    # keys are case-sensitive (T)
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except configparser.Error as exc:
            raise UsageError(f"malformed config file {path}: {exc}") from None
        for section in parser.sections():
            merged[section] = dict(parser.items(section))
    for section, values in (overrides or {}).items():
        merged.setdefault(section, {}).update(values)
    return RunConfig().replace(merged)


def parse_overrides(items) -> dict[str, dict[str, str]]:
    """``["train.steps=5", ...]`` -> ``{"train": {"steps": "5"}}``."""
    out: dict[str, dict[str, str]] = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise UsageError(f"override must look like section.key=value, got {item!r}")
        out.setdefault(section, {})[name] = value
    return out
