"""Run configuration: a TOML file plus command-line overrides.

File layout (all sections optional)::

    seed = 7
    [edit]      # EditConfig fields
    [masknet]   # MaskNetConfig fields
    [train]     # TrainConfig fields
    [data]      # n_train, n_eval_per_task
    [eval]      # jobs, noise_levels, success_threshold

The LLM endpoint is read from ``MADIFF_LLM_ENDPOINT`` only.
"""
from __future__ import annotations

import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace

from .editor import EditConfig
from .errors import ConfigurationError, ParameterError
from .masknet import MaskNetConfig
from .nn import TrainConfig
from .prompt import ENDPOINT_ENV as LLM_ENV

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 2000
    n_eval_per_task: int = 50


@dataclass(frozen=True)
class EvalConfig:
    jobs: int = 1
    noise_levels: tuple = (0.0, 0.5)
    success_threshold: float = 0.5


@dataclass
class RunConfig:
    seed: int = 0
    edit: EditConfig = field(default_factory=EditConfig)
    masknet: MaskNetConfig = field(default_factory=MaskNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    llm_endpoint: str | None = None

    def to_dict(self):
        out = asdict(self)
        out["eval"]["noise_levels"] = list(self.eval.noise_levels)
        return out


_SECTIONS = {"edit": EditConfig, "masknet": MaskNetConfig, "train": TrainConfig,
             "data": DataConfig, "eval": EvalConfig}


def _build(cls, values, section):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigurationError(f"[{section}] unknown keys: {', '.join(sorted(unknown))}")
    if cls is EvalConfig and "noise_levels" in values:
        values = {**values, "noise_levels": tuple(values["noise_levels"])}
    try:
        return cls(**values)
    except (TypeError, ParameterError) as exc:
        raise ConfigurationError(f"[{section}] {exc}") from exc


def load_config(path=None, overrides=None, environ=None) -> RunConfig:
    """Resolve a :class:`RunConfig`.

    ``overrides`` maps ``"section.key"`` (or ``"seed"``) to values; ``None``
    values are skipped so unset flags leave the file untouched. A root seed
    given on its own also seeds the edit and training sections unless they
    set their own.
    """
    raw = {}
    if path is not None:
        with open(path, "rb") as fh:
            try:
                raw = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigurationError(f"{path}: {exc}") from exc
    unknown = set(raw) - set(_SECTIONS) - {"seed"}
    if unknown:
        raise ConfigurationError(f"unknown top-level keys: {', '.join(sorted(unknown))}")

    sections = {name: dict(raw.get(name, {})) for name in _SECTIONS}
    seed = raw.get("seed", 0)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == "seed":
            seed = value
            continue
        section, _, name = key.partition(".")
        if section not in sections or not name:
            raise ConfigurationError(f"bad override key {key!r}")
        sections[section][name] = value
    for name in ("edit", "train"):
        sections[name].setdefault("seed", seed)

    env = os.environ if environ is None else environ
    return RunConfig(
        seed=int(seed),
        llm_endpoint=env.get(LLM_ENV) or None,
        **{name: _build(cls, sections[name], name) for name, cls in _SECTIONS.items()},
    )


def with_edit(cfg: RunConfig, **changes) -> RunConfig:
    return replace(cfg, edit=replace(cfg.edit, **changes))
