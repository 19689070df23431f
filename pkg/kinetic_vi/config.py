"""
Configuration models
推断、采样、学习与掩码的配置模型
"""

import json
from enum import Enum
from pathlib import Path
from typing import Dict, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import DataFormatError


class InferenceMode(str, Enum):
    """推断模式"""
    SMOOTHING = "smoothing"
    FILTERING = "filtering"


class MaskTask(str, Enum):
    """评估任务"""
    PREDICT = "predict"
    SMOOTH = "smooth"
    EXPAND = "expand"


class ViConfig(BaseModel):
    """Settings for the variational message-passing engine."""

    model_config = ConfigDict(frozen=True)

    max_iters: int = Field(100, ge=1)
    min_iters: int = Field(1, ge=1)
    tol: float = Field(1e-6, gt=0)
    damping: float = Field(0.0, ge=0.0, lt=1.0)
    eps: float = Field(1e-12, gt=0)
    mode: InferenceMode = InferenceMode.SMOOTHING
    threads: int = Field(1, ge=1)
    exact_rate_form: bool = False
    track_energy: bool = True

    @model_validator(mode="after")
    def _check_iteration_bounds(self):
        if self.min_iters > self.max_iters:
            raise ValueError("min_iters must not exceed max_iters")
        return self

    def pinned(self, iterations: int) -> "ViConfig":
        """Copy that runs exactly `iterations` sweeps."""
        return self.model_copy(update={"max_iters": iterations, "min_iters": iterations})


class LearnConfig(BaseModel):
    """Settings for EM-style rate learning."""

    model_config = ConfigDict(frozen=True)

    max_em_iters: int = Field(50, ge=1)
    rel_tol: float = Field(1e-4, gt=0)
    init_rates: Optional[Dict[str, float]] = None
    vi: ViConfig = ViConfig()

    @field_validator("init_rates")
    @classmethod
    def _rates_inside_unit_interval(cls, value):
        if value is None:
            return value
        for group, rate in value.items():
            if not 0.0 < rate < 1.0:
                raise ValueError(f"initial rate for {group!r} must lie strictly inside (0, 1)")
        return value


class SamplerConfig(BaseModel):
    """Settings shared by the Gibbs and particle baselines."""

    model_config = ConfigDict(frozen=True)

    iterations: int = Field(1000, ge=1)       # Gibbs sweeps
    particles: int = Field(1000, ge=1)        # PF particle count
    burn_in: Optional[int] = Field(None, ge=0)
    resample_threshold: float = Field(0.5, gt=0.0, le=1.0)
    mode: InferenceMode = InferenceMode.SMOOTHING
    seed: int = 0

    @model_validator(mode="after")
    def _check_burn_in(self):
        if self.burn_in is not None and self.burn_in >= self.iterations:
            raise ValueError("burn_in must be smaller than iterations")
        return self

    @property
    def effective_burn_in(self) -> int:
        if self.burn_in is not None:
            return self.burn_in
        return self.iterations // 10


_DEFAULT_FRACTION = {MaskTask.PREDICT: 0.2, MaskTask.SMOOTH: 0.2, MaskTask.EXPAND: 0.1}


class MaskSpec(BaseModel):
    """Which observation cells to hide for an evaluation task.

    `fraction` means: predict -> share of query timesteps, smooth -> share of
    cells hidden in intervals, expand -> share of individuals kept observed.
    """

    model_config = ConfigDict(frozen=True)

    task: MaskTask
    fraction: Optional[float] = Field(None, gt=0.0, le=1.0)
    min_interval: int = Field(1, ge=1)
    max_interval: int = Field(3, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _check_intervals(self):
        if self.min_interval > self.max_interval:
            raise ValueError("min_interval must not exceed max_interval")
        return self

    @property
    def effective_fraction(self) -> float:
        if self.fraction is not None:
            return self.fraction
        return _DEFAULT_FRACTION[self.task]


class AppConfig(BaseModel):
    """Top-level JSON config file; every section is optional."""

    vi: ViConfig = ViConfig()
    sampler: SamplerConfig = SamplerConfig()
    learn: LearnConfig = LearnConfig()
    mask: Optional[MaskSpec] = None


def load_config(path: Optional[Union[str, Path]]) -> AppConfig:
    """Read a JSON config file, or return defaults when no path is given."""
    if path is None:
        return AppConfig()
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
        return AppConfig.model_validate(raw)
    except json.JSONDecodeError as e:
        raise DataFormatError(f"invalid JSON: {e.msg}", path=str(path), line=e.lineno) from e
    except ValidationError as e:
        raise DataFormatError(f"invalid config: {e}", path=str(path)) from e
