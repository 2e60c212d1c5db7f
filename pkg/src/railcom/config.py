"""Pipeline configuration: defaults < config file < environment < CLI flags."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .gateway import ENV_API_KEY, ENV_BASE_URL, BackendConfig
from .motion import MotionConfig
from .sampler import EventWeights, SamplerConfig
from .tracker import TrackerConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PromptingOptions:
    coalesce: bool = False
    defensive: bool = True
    templates_dir: str | None = None
    strict_parse: bool = False


@dataclass(frozen=True)
class ReportOptions:
    include_middleware_latency: bool = True
    invert_penalty: bool = False


@dataclass(frozen=True)
class PipelineConfig:
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    motion: MotionConfig = field(default_factory=MotionConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    prompting: PromptingOptions = field(default_factory=PromptingOptions)
    report: ReportOptions = field(default_factory=ReportOptions)
    out_dir: str = "out"
    jobs: int = 1

    def __post_init__(self) -> None:
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")


_NESTED = {
    PipelineConfig: {
        "tracker": TrackerConfig,
        "motion": MotionConfig,
        "sampler": SamplerConfig,
        "backend": BackendConfig,
        "prompting": PromptingOptions,
        "report": ReportOptions,
    },
    SamplerConfig: {"weights": EventWeights},
}


def _build(cls: type, data: Mapping[str, Any], where: str) -> Any:
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kw = {}
    nested = _NESTED.get(cls, {})
    for key, val in data.items():
        if cls is SamplerConfig and key == "weights" and isinstance(val, (list, tuple)):
            kw[key] = _build(EventWeights, dict(zip(("new", "moving", "lost"), val)), f"{where}.{key}")
        elif key in nested:
            kw[key] = _build(nested[key], val or {}, f"{where}.{key}")
        else:
            kw[key] = val
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(data: Mapping[str, Any] | None) -> PipelineConfig:
    return _build(PipelineConfig, data or {}, "config")


def config_to_dict(cfg: PipelineConfig) -> dict[str, Any]:
    out = dataclasses.asdict(cfg)
    out["backend"].pop("api_key", None)
    return out


def _merge(base: dict[str, Any], over: Mapping[str, Any]) -> dict[str, Any]:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(
    path: str | Path | None = None,
    overrides: Mapping[str, Any] | None = None,
    env: Mapping[str, str] | None = None,
) -> PipelineConfig:
    """Layer file values, environment variables and explicit overrides."""
    data: dict[str, Any] = {}
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if loaded is not None and not isinstance(loaded, Mapping):
            raise ConfigError(f"{path}: top level must be a mapping")
        data = dict(loaded or {})
    env = os.environ if env is None else env
    env_layer: dict[str, Any] = {}
    if env.get(ENV_API_KEY):
        env_layer["api_key"] = env[ENV_API_KEY]
    if env.get(ENV_BASE_URL):
        env_layer["base_url"] = env[ENV_BASE_URL]
    if env_layer:
        data = _merge(data, {"backend": env_layer})
    if overrides:
        data = _merge(data, overrides)
    return config_from_dict(data)
