"""Run configuration: a TOML file with a fixed key set, validated on load."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Literal, Optional

import tomli
import tomli_w
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from deltafm.data import GaussianMixtureSpec

OUTPUT_ENV = "DELTAFM_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True, validate_assignment=True)


class DataSection(_Section):
    name: Literal["two_gaussians", "mixture", "csv"] = "two_gaussians"
    separation: Optional[float] = Field(None, ge=0)
    scale: float = Field(1.0, gt=0)
    n_per_class: int = Field(5000, ge=1)
    seed: int = 0
    csv_path: Optional[str] = None
    spec: Optional[dict] = None

    @model_validator(mode="after")
    def _check_source(self):
        if self.name == "csv" and not self.csv_path:
            raise ValueError("csv_path is required when name = 'csv'")
        if self.name == "mixture":
            if self.spec is None:
                raise ValueError("spec is required when name = 'mixture'")
            GaussianMixtureSpec.from_dict(self.spec)
        return self


class ModelSection(_Section):
    hidden_dims: list[int] = Field(default_factory=lambda: [64, 64], min_length=1)
    time_features: int = Field(8, ge=1)
    class_embed_dim: int = Field(16, ge=1)
    seed: int = 0

    @field_validator("hidden_dims")
    @classmethod
    def _positive(cls, v):
        if any(h < 1 for h in v):
            raise ValueError("hidden widths must be >= 1")
        return v


class TrainSection(_Section):
    batch_size: int = Field(256, ge=1)
    iterations: int = Field(20_000, ge=0)
    learning_rate: float = Field(1e-3, gt=0)
    p_uncond: float = Field(0.1, ge=0, le=1)
    seed: int = 0
    optimizer: Literal["sgd", "adaptive_moments"] = "adaptive_moments"
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)


class ObjectiveSection(_Section):
    lam: float = Field(0.05, alias="lambda", ge=0, lt=1)
    negative_policy: Literal["uniform_excluding_self"] = "uniform_excluding_self"


class SamplerSection(_Section):
    kind: Literal["euler_ode", "euler_maruyama"] = "euler_maruyama"
    nfe: int = Field(50, ge=1)
    diffusion_scale: str | float = "sigma"
    seed: int = 0

    @field_validator("diffusion_scale")
    @classmethod
    def _rule(cls, v):
        if isinstance(v, str) and v not in ("sigma", "zero"):
            raise ValueError("diffusion_scale must be 'sigma', 'zero' or a non-negative number")
        if not isinstance(v, str) and v < 0:
            raise ValueError("diffusion_scale must be non-negative")
        return v


class GuidanceSection(_Section):
    mode: Literal["off", "standard", "hat", "tilde"] = "off"
    w: float = Field(1.0, ge=0)
    sigma_low: float = Field(0.0, ge=0, le=1)
    sigma_high: float = Field(1.0, ge=0, le=1)
    lam: Optional[float] = Field(None, alias="lambda", ge=0, lt=1)

    @model_validator(mode="after")
    def _interval(self):
        if self.sigma_low > self.sigma_high:
            raise ValueError("sigma_low must not exceed sigma_high")
        return self


class EvalSection(_Section):
    n_per_class: int = Field(2000, ge=1)
    n_paths: int = Field(500, ge=1)
    seed: int = 1234


class RunConfig(_Section):
    output_dir: str = Field(default_factory=lambda: os.environ.get(OUTPUT_ENV, "runs/default"))
    data: DataSection = Field(default_factory=DataSection)
    model: ModelSection = Field(default_factory=ModelSection)
    train: TrainSection = Field(default_factory=TrainSection)
    objective: ObjectiveSection = Field(default_factory=ObjectiveSection)
    sampler: SamplerSection = Field(default_factory=SamplerSection)
    guidance: GuidanceSection = Field(default_factory=GuidanceSection)
    eval: EvalSection = Field(default_factory=EvalSection)

    def to_dict(self):
        return self.model_dump(by_alias=True, exclude_none=True)

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())


def _format(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        parts.append(f"{loc}: {e['msg']}")
    return "; ".join(parts)


def from_dict(d: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(d)
    except ValidationError as exc:
        raise ConfigError(_format(exc)) from None


def loads(text: str) -> RunConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    return from_dict(raw)


def load(path) -> RunConfig:
    return loads(Path(path).read_text())


def save(cfg: RunConfig, path) -> None:
    Path(path).write_text(cfg.dumps())


def with_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` assignments; values are TOML literals or bare strings."""
    d = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = tomli.loads(f"v = {raw}")["v"]
        except tomli.TOMLDecodeError:
            value = raw
        node = d
        *path, leaf = key.strip().split(".")
        for p in path:
            node = node.setdefault(p, {})
        node[leaf] = value
    return from_dict(d)
