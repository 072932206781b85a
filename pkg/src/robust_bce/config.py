"""TOML run configuration with ``[scenario]``, ``[pipeline]`` and ``[compare]`` sections."""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .pipeline import MODES, PipelineConfig, parse_mode
from .scenario import ScenarioConfig


class ConfigError(ValueError):
    """Malformed or unknown configuration entries."""


def _checked(cls, data: dict, section: str) -> dict:
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"[{section}] has unknown keys {unknown}")
    return data


@dataclass
class RunConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    modes: list[str] = field(default_factory=lambda: list(MODES))
    seeds: list[int] = field(default_factory=lambda: [0])


def parse_config(data: dict) -> RunConfig:
    unknown = sorted(set(data) - {"scenario", "pipeline", "compare"})
    if unknown:
        raise ConfigError(f"unknown sections {unknown}")
    try:
        scenario = ScenarioConfig(**_checked(ScenarioConfig, dict(data.get("scenario", {})), "scenario"))
        pipeline = PipelineConfig(**_checked(PipelineConfig, dict(data.get("pipeline", {})), "pipeline"))
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    cmp = dict(data.get("compare", {}))
    extra = sorted(set(cmp) - {"modes", "seeds"})
    if extra:
        raise ConfigError(f"[compare] has unknown keys {extra}")
    modes = [parse_mode(m) for m in cmp.get("modes", MODES)]
    seeds = [int(s) for s in cmp.get("seeds", [scenario.seed])]
    return RunConfig(scenario, pipeline, modes, seeds)


def load_config(path) -> RunConfig:
    text = Path(path).read_text()
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(data)
