"""Run configuration: every numeric knob, one YAML file, one hash."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError
from .optim import LossWeights, OptimizerConfig
from .pseudo import COVERAGE_THRESHOLD, DEFAULT_RADIUS_FACTOR, RadiusPolicy
from .render import RenderSettings
from .synth import SynthSpec


@dataclass
class PseudoConfig:
    radius: float | None = None  # absolute world units; overrides the factor
    radius_factor: float = DEFAULT_RADIUS_FACTOR
    stride: int = 1
    coverage_threshold: float = COVERAGE_THRESHOLD

    def policy(self) -> RadiusPolicy:
        return RadiusPolicy(self.radius, self.radius_factor)


@dataclass
class FeatureConfig:
    source: str = "builtin"  # or "precomputed"
    directory: str | None = None
    patch: int = 8
    stride: int = 4
    downscale: int = 4


def _gray_defaults() -> OptimizerConfig:
    return OptimizerConfig(iterations=3000)


@dataclass
class PipelineConfig:
    seed: int = 0
    deterministic: bool = True
    render: RenderSettings = field(default_factory=RenderSettings)
    gray: OptimizerConfig = field(default_factory=_gray_defaults)
    colorize: OptimizerConfig = field(default_factory=OptimizerConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    pseudo: PseudoConfig = field(default_factory=PseudoConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)

    def validate(self) -> None:
        self.gray.validate()
        self.colorize.validate()
        self.weights.validate()
        if self.pseudo.radius is not None and self.pseudo.radius < 0:
            raise ConfigError("pseudo.radius must be >= 0")
        if self.pseudo.radius_factor <= 0 or self.pseudo.stride < 1:
            raise ConfigError("pseudo.radius_factor must be > 0 and pseudo.stride >= 1")
        if self.features.source not in ("builtin", "precomputed"):
            raise ConfigError(f"features.source must be builtin or precomputed, got {self.features.source!r}")
        if self.features.source == "precomputed" and not self.features.directory:
            raise ConfigError("features.directory is required for precomputed features")
        if self.render.sort not in ("exact", "center"):
            raise ConfigError("render.sort must be exact or center")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()


_SECTIONS = {
    "render": RenderSettings, "gray": OptimizerConfig, "colorize": OptimizerConfig,
    "weights": LossWeights, "pseudo": PseudoConfig, "features": FeatureConfig, "synth": SynthSpec,
}


def _build(cls, base, data: dict, section: str):
    if not isinstance(data, dict):
        raise ConfigError(f"config section '{section}' must be a mapping")
    known = {f.name for f in fields(cls)}
    extra = set(data) - known
    if extra:
        raise ConfigError(f"unknown key(s) in '{section}': {', '.join(sorted(extra))}")
    values = asdict(base)
    values.update(data)
    for k, v in values.items():
        if isinstance(v, list) and k in ("background", "gain_range", "bias_range", "occluded_dir", "twin_dir"):
            values[k] = tuple(v)
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigError(f"config section '{section}': {e}") from e


def config_from_dict(data: dict | None) -> PipelineConfig:
    data = dict(data or {})
    cfg = PipelineConfig()
    for key in list(data):
        if key in _SECTIONS:
            setattr(cfg, key, _build(_SECTIONS[key], getattr(cfg, key), data.pop(key), key))
    for key in ("seed", "deterministic"):
        if key in data:
            setattr(cfg, key, data.pop(key))
    if data:
        raise ConfigError(f"unknown top-level config key(s): {', '.join(sorted(data))}")
    cfg.validate()
    return cfg


def load_config(path=None) -> PipelineConfig:
    if path is None:
        return config_from_dict({})
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from e
    return config_from_dict(data)


def save_config(cfg: PipelineConfig, path) -> None:
    data = json.loads(json.dumps(cfg.to_dict(), default=list))
    Path(path).write_text(yaml.safe_dump(data, sort_keys=False))
