"""Experiment documents: DCL, dataset, training and run configuration.

All sections reject unknown keys so that typos in sweep configs fail loudly.
"""

import logging
from enum import Enum
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

logger = logging.getLogger(__name__)


class Strategy(str, Enum):
    DETERMINISTIC = "deterministic"
    STOCHASTIC = "stochastic"


def decimal_epsilon(order: int) -> float:
    """10^(-order) parsed from its decimal literal, the nearest double to the exact value."""
    return float(f"1e-{order}")


class DclConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    T: int = Field(ge=2)
    M: tuple[int, ...]
    K2: int = Field(ge=1)
    strategy: Strategy = Strategy.DETERMINISTIC
    kernel: Optional[int] = Field(default=None, ge=1)   # None: the whole input extent
    stride: int = Field(default=1, ge=1)
    pad: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check_branches(self) -> "DclConfig":
        if len(self.M) != self.T:
            raise ValueError(f"expected {self.T} branch widths, got {len(self.M)}")
        if any(m < 1 for m in self.M):
            raise ValueError(f"branch widths must be >= 1, got {self.M}")
        if self.strategy is Strategy.STOCHASTIC and self.T < 3:
            raise ValueError("stochastic branch training needs T >= 3")
        if 2 * sum(self.M) > self.K2:
            logger.warning(
                "sum of branch widths %d exceeds K2/2 = %g; the block will not save parameters",
                sum(self.M), self.K2 / 2,
            )
        return self

    @property
    def epsilon(self) -> float:
        return decimal_epsilon(self.T)

    @classmethod
    def uniform(cls, T: int, M: int, K2: int, strategy: Strategy = Strategy.DETERMINISTIC, **kw) -> "DclConfig":
        return cls(T=T, M=(M,) * T, K2=K2, strategy=strategy, **kw)


class DclOverrides(BaseModel):
    """JSON overrides applied to the DCL blocks named in an architecture string."""

    model_config = ConfigDict(extra="forbid")

    M: Optional[tuple[int, ...]] = None
    K2: Optional[int] = Field(default=None, ge=1)
    strategy: Optional[Strategy] = None
    kernel: Optional[int] = Field(default=None, ge=1)
    stride: Optional[int] = Field(default=None, ge=1)
    pad: Optional[int] = Field(default=None, ge=0)


# --- dataset ---

class DigitSlot(BaseModel):
    model_config = ConfigDict(extra="forbid")

    center: tuple[float, float]
    scale: tuple[float, float] = (1.0, 1.0)
    rotation_deg: tuple[float, float] = (0.0, 0.0)
    flip_prob: float = Field(default=0.0, ge=0.0, le=1.0)
    jitter: float = Field(default=0.0, ge=0.0, le=0.5)

    @field_validator("center")
    @classmethod
    def _center_in_canvas(cls, v: tuple[float, float]) -> tuple[float, float]:
        if not all(0.0 <= c <= 1.0 for c in v):
            raise ValueError(f"center must be fractions in [0, 1], got {v}")
        return v

    @field_validator("scale", "rotation_deg")
    @classmethod
    def _ordered_range(cls, v: tuple[float, float]) -> tuple[float, float]:
        if v[0] > v[1]:
            raise ValueError(f"range minimum exceeds maximum: {v}")
        return v

    @field_validator("scale")
    @classmethod
    def _positive_scale(cls, v: tuple[float, float]) -> tuple[float, float]:
        if v[0] <= 0:
            raise ValueError(f"scale must be positive, got {v}")
        return v


class DatasetConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: str
    slots: list[DigitSlot] = Field(min_length=2, max_length=3)
    canvas: int = Field(default=64, ge=28)            # сторона холста до кропа в 28x28
    noise_std: float = Field(default=0.0, ge=0.0)
    seed: int = Field(default=0, ge=0, lt=2**64)
    counts: tuple[int, int] = (60000, 10000)          # (train, test)

    @property
    def num_digits(self) -> int:
        return len(self.slots)

    @property
    def num_classes(self) -> int:
        return 10 ** len(self.slots)


# --- training ---

class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    batch_size: int = Field(default=64, ge=1)
    schedule: list[tuple[int, float]] = Field(default_factory=lambda: [(20, 1e-3), (5, 1e-4)])  # (эпохи, lr) по стадиям
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=5e-4, ge=0.0)
    seed: int = Field(default=0, ge=0, lt=2**64)
    deterministic: bool = False
    precision: Literal["single", "double"] = "single"   # double нужен только для проверок градиентов
    train_subset: Optional[int] = Field(default=None, ge=1)   # урезанные прогоны на CPU
    test_subset: Optional[int] = Field(default=None, ge=1)

    @field_validator("schedule")
    @classmethod
    def _decreasing_rates(cls, v: list[tuple[int, float]]) -> list[tuple[int, float]]:
        if not v:
            raise ValueError("schedule needs at least one stage")
        for epochs, lr in v:
            if epochs < 1 or lr < 0:
                raise ValueError(f"bad schedule stage {(epochs, lr)}")
        rates = [lr for _, lr in v]
        if any(b >= a for a, b in zip(rates, rates[1:])):
            raise ValueError(f"learning rates must strictly decrease across stages, got {rates}")
        return v

    @property
    def total_epochs(self) -> int:
        return sum(e for e, _ in self.schedule)

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 0-based epoch."""
        boundary = 0
        for epochs, lr in self.schedule:
            boundary += epochs
            if epoch < boundary:
                return lr
        return self.schedule[-1][1]


class MetricsRecord(BaseModel):
    epoch: int
    split: Literal["train", "test"]
    loss: float
    error_rate: float = Field(ge=0.0, le=1.0)
    lr: float
    wall_ms: int = 0


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    arch: str
    dcl: Optional[DclOverrides] = None
    dataset: Union[str, DatasetConfig]
    data_dir: Optional[str] = None      # gen-data output; synthesized in memory when absent
    train: TrainConfig = Field(default_factory=TrainConfig)
    out_dir: str
