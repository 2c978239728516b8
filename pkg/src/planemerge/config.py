"""Declarative run configuration covering every pipeline stage."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Any, Optional

from .errors import ConfigError
from .mrf import EnergyWeights, TextureConfig
from .multistructure import ClusterConfig
from .refinement import LocalPatchConfig
from .sampling import SamplingConfig


@dataclass(frozen=True)
class RunConfig:
    """All stage settings in one document.

    cut_threshold and ork_h default to data-adaptive values (3x the median
    Delaunay edge length, hypothesis count / 20) when left unset.
    """

    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    local_patch: LocalPatchConfig = field(default_factory=LocalPatchConfig)
    weights: EnergyWeights = field(default_factory=EnergyWeights)
    texture: TextureConfig = field(default_factory=TextureConfig)
    ork_h: Optional[int] = None
    cut_threshold: Optional[float] = None
    min_patch_points: int = 10
    contrast_sensitive: bool = True
    mrf_enabled: bool = True
    solver_max_iters: int = 100
    solver_tol: float = 1e-6
    symmetric_residual: bool = False

    def replace(self, **kw) -> "RunConfig":
        import dataclasses

        return dataclasses.replace(self, **kw)


_SECTIONS = {
    "sampling": SamplingConfig,
    "cluster": ClusterConfig,
    "local_patch": LocalPatchConfig,
    "weights": EnergyWeights,
    "texture": TextureConfig,
}


def _build_section(cls, data: dict, path: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {path}: {sorted(unknown)}")
    try:
        return cls(**data)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"invalid {path}: {e}") from e


def config_from_dict(data: dict[str, Any]) -> RunConfig:
    """Build a validated RunConfig; unknown keys anywhere are errors."""
    if not isinstance(data, dict):
        raise ConfigError("config document must be a mapping")
    top_allowed = {f.name for f in fields(RunConfig)}
    unknown = set(data) - top_allowed
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"section '{key}' must be a mapping")
            kwargs[key] = _build_section(_SECTIONS[key], value, key)
        else:
            kwargs[key] = value
    try:
        return RunConfig(**kwargs)
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from e
