"""Run configuration: one YAML file plus ``key=value`` overrides."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigurationError

# Per-benchmark hyperparameters: threshold, loss weights, (M, N, L)
BENCHMARK_DEFAULTS: dict[str, dict[str, Any]] = {
    "office31": {"gamma": 0.7, "lambda1": 3.0, "lambda2": 6.0, "lambda3": 1.0, "M": 5, "N": 13, "L": 13},
    "officehome": {"gamma": 0.6, "lambda1": 25.0, "lambda2": 20.0, "lambda3": 1.0, "M": 10, "N": 8, "L": 5},
    "minidomainnet": {"gamma": 0.7, "lambda1": 25.0, "lambda2": 20.0, "lambda3": 1.0, "M": 10, "N": 8, "L": 6},
    "synthetic": {"gamma": 0.7, "lambda1": 3.0, "lambda2": 6.0, "lambda3": 1.0, "M": 2, "N": 8, "L": 2, "lr0": 0.01},
}


class ToyOptions(BaseModel):
    model_config = ConfigDict(extra="forbid")

    feature_dim: int = 32
    prompt_token_dim: int = 32
    seed: int = 0
    temperature: float = 0.07
    spatial_scale: float = 0.5


class SyntheticOptions(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_steps: int = 3
    classes_per_step: int = 4
    n_per_class: int = 200
    rotation_deg: float = 30.0
    shared_scale: float = 1.0
    noise: float = 0.7
    seed: int = 0


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    benchmark_id: Literal["office31", "officehome", "minidomainnet", "synthetic"]
    mode: Literal["joint", "source_free"] = "joint"
    data_root: str | None = None
    source_domain: str = "source"
    target_domain: str = "target"

    backend: Literal["toy", "clip"] = "toy"
    checkpoint: str | None = None
    toy: ToyOptions = Field(default_factory=ToyOptions)
    synthetic: SyntheticOptions = Field(default_factory=SyntheticOptions)

    gamma: float
    lambda1: float = Field(ge=0)
    lambda2: float = Field(ge=0)
    lambda3: float = Field(ge=0)
    M: int = Field(ge=1)
    N: int = Field(ge=1)
    L: int = Field(ge=1)
    batch_size: int = Field(32, ge=1)
    epochs_per_step: int = Field(10, ge=1)
    lr0: float = Field(3e-3, gt=0)
    sgd_momentum: float = Field(0.9, ge=0)
    weight_decay: float = Field(0.0, ge=0)
    seed: int = 0
    key_ema: float = Field(0.9, gt=0, lt=1)
    debias_momentum: float = Field(0.999, gt=0, lt=1)
    debias_factor: float = Field(0.4, gt=0)
    tau: float | None = Field(None, gt=0)
    template: str = "a photo of a {}."
    step_eval: Literal["cumulative", "current"] = "cumulative"
    dump_heatmaps: bool = False
    plots: bool = False

    @model_validator(mode="before")
    @classmethod
    def _benchmark_defaults(cls, data: Any):
        if isinstance(data, dict) and data.get("benchmark_id") in BENCHMARK_DEFAULTS:
            merged = dict(BENCHMARK_DEFAULTS[data["benchmark_id"]])
            merged.update(data)
            return merged
        return data

    @model_validator(mode="after")
    def _check(self):
        if self.L > self.N:
            raise ValueError(f"L={self.L} must not exceed N={self.N}")
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.backend == "clip" and not self.checkpoint:
            raise ValueError("backend 'clip' requires 'checkpoint'")
        if self.benchmark_id != "synthetic" and not self.data_root:
            raise ValueError(f"benchmark {self.benchmark_id} requires 'data_root'")
        return self

    def digest(self) -> str:
        blob = json.dumps(self.model_dump(mode="json"), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @property
    def task_name(self) -> str:
        return f"{self.source_domain}->{self.target_domain}"


def _coerce(value: str):
    try:
        return yaml.safe_load(value)
    except yaml.YAMLError:
        return value


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``a.b=value`` strings; values are parsed as YAML scalars."""
    data = json.loads(json.dumps(data))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _coerce(value)
    return data


def build_config(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        problems = "; ".join(f"{'.'.join(map(str, err['loc'])) or '<root>'}: {err['msg']}" for err in e.errors())
        raise ConfigurationError(f"invalid config: {problems}") from None


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigurationError(f"cannot read config {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigurationError(f"config {path} must be a mapping")
    return build_config(apply_overrides(data, overrides or []))


def dump_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=True))
    return path
