from enum import Enum
from pathlib import Path
from typing import List, Optional, Tuple

from pydantic import BaseModel, Field, model_validator, validator


class DatasetName(str, Enum):
    MNIST = "mnist"
    CIFAR10 = "cifar10"
    CIFAR100 = "cifar100"

    @property
    def class_count(self) -> int:
        return 100 if self is DatasetName.CIFAR100 else 10

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return (1, 28, 28) if self is DatasetName.MNIST else (3, 32, 32)


class NormalizeScheme(str, Enum):
    SCALE255 = "scale255"
    MEAN_SUBTRACT = "mean-subtract"


class Precision(str, Enum):
    SINGLE = "single"
    DOUBLE = "double"


class LrStage(BaseModel):
    epochs: int = Field(..., gt=0)
    lr: float = Field(..., gt=0.0)


class LrSchedule(BaseModel):
    """Staged learning rate, e.g. 20 epochs at 1e-3 then 4 at 1e-4 then 1 at 1e-5."""

    stages: List[LrStage] = Field(..., min_length=1)

    @validator("stages")
    def validate_decreasing(cls, v):
        for prev, cur in zip(v, v[1:]):
            if cur.lr >= prev.lr:
                raise ValueError("learning rates must strictly decrease across stages")
        return v

    @property
    def total_epochs(self) -> int:
        return sum(stage.epochs for stage in self.stages)

    def render(self) -> str:
        return ",".join(f"{stage.epochs}@{stage.lr:g}" for stage in self.stages)


class RunConfig(BaseModel):
    arch: str
    dataset: DatasetName = DatasetName.MNIST
    data_dir: Optional[Path] = None
    schedule: LrSchedule
    batch_size: int = Field(100, gt=0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(5e-4, ge=0.0)
    seed: int = Field(0, ge=0)
    repeats: int = Field(1, ge=1)
    flip_prob: float = Field(0.0, ge=0.0, le=1.0)
    normalize: NormalizeScheme = NormalizeScheme.SCALE255
    strict_placement: bool = True
    epoch_scale: float = Field(1.0, gt=0.0)
    max_epochs: Optional[int] = Field(None, gt=0)
    limit_train: Optional[int] = Field(None, gt=0)
    limit_test: Optional[int] = Field(None, gt=0)
    out_dir: Path = Path("runs")

    @model_validator(mode="after")
    def check_class_count(self):
        from ..services.arch_service import resolve_arch

        arch = resolve_arch(self.arch)
        if arch.num_classes != self.dataset.class_count:
            raise ValueError(
                f"final FC width {arch.num_classes} does not match "
                f"{self.dataset.value} class count {self.dataset.class_count}"
            )
        return self

    def effective_schedule(self) -> LrSchedule:
        """Schedule after `epoch_scale` and `max_epochs` are applied."""
        stages = [
            LrStage(epochs=max(1, round(stage.epochs * self.epoch_scale)), lr=stage.lr)
            for stage in self.schedule.stages
        ]
        if self.max_epochs is not None:
            remaining = self.max_epochs
            truncated = []
            for stage in stages:
                if remaining <= 0:
                    break
                truncated.append(LrStage(epochs=min(stage.epochs, remaining), lr=stage.lr))
                remaining -= stage.epochs
            stages = truncated
        return LrSchedule(stages=stages)


class RunResult(BaseModel):
    seed: int
    test_error: float = Field(..., ge=0.0, le=1.0)
    epochs: int
    run_dir: Path


class RunSummary(BaseModel):
    results: List[RunResult]

    @property
    def errors(self) -> List[float]:
        return [r.test_error for r in self.results]

    @property
    def mean(self) -> float:
        return sum(self.errors) / len(self.errors)

    @property
    def std(self) -> float:
        """Sample standard deviation (0 for a single run)."""
        n = len(self.errors)
        if n < 2:
            return 0.0
        m = self.mean
        return (sum((e - m) ** 2 for e in self.errors) / (n - 1)) ** 0.5
