from dataclasses import dataclass, field
from typing import List

import numpy as np

from ..core.exceptions import ConfigError, ShapeError
from ..schemas.run import LrSchedule, LrStage


@dataclass
class SgdState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 5e-4
    velocity: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")


def sgd_step(params: List[np.ndarray], grads: List[np.ndarray], state: SgdState) -> None:
    """In-place momentum SGD with L2 weight decay:

        v <- momentum * v - lr * (grad + weight_decay * param)
        param <- param + v
    """
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.velocity:
        state.velocity = [np.zeros_like(p) for p in params]
    if len(state.velocity) != len(params):
        raise ShapeError("velocity buffers do not match the parameter list")

    for param, grad, v in zip(params, grads, state.velocity):
        if param.shape != grad.shape or param.shape != v.shape:
            raise ShapeError(f"shape mismatch: param {param.shape}, grad {grad.shape}, velocity {v.shape}")
        dt = param.dtype.type
        v *= dt(state.momentum)
        v -= dt(state.lr) * (grad + dt(state.weight_decay) * param)
        param += v


def parse_schedule(text: str) -> LrSchedule:
    """Parse "20@1e-3,4@1e-4,1@1e-5" into a schedule."""
    stages = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            epochs, lr = part.split("@")
            stages.append(LrStage(epochs=int(epochs), lr=float(lr)))
        except ValueError as e:
            raise ConfigError(f"bad schedule stage '{part}', expected <epochs>@<lr>") from e
    if not stages:
        raise ConfigError("schedule has no stages")
    try:
        return LrSchedule(stages=stages)
    except ValueError as e:
        raise ConfigError(f"invalid schedule '{text}': {e}") from e


SCHEDULE_PRESETS = {
    "mnist": "20@1e-3,4@1e-4,1@1e-5",
    "cifar": "120@1e-3,20@1e-4,10@1e-5",
    "svhn": "12@1e-3,2@1e-4,1@1e-5",
}


def resolve_schedule(text: str) -> LrSchedule:
    return parse_schedule(SCHEDULE_PRESETS.get(text, text))


def schedule_lr(sched: LrSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ConfigError(f"epoch must be non-negative, got {epoch}")
    end = 0
    for stage in sched.stages:
        end += stage.epochs
        if epoch < end:
            return stage.lr
    raise ConfigError(f"epoch {epoch} is past the end of a {end}-epoch schedule")

