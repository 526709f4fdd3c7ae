"""Training-control pieces for external trainers: cyclical learning rate,
early stopping with checkpoint signals, and the two head losses."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ObserveAfterStop

DETECTOR_PATIENCE = 10
CLASSIFIER_PATIENCE = 50
BCE_EPS = 1e-7


@dataclass(frozen=True)
class CyclicalLrConfig:
    max_lr: float = 1e-4
    base_lr: float = 1e-5
    step_size: int = 4
    policy: str = "triangular"

    def __post_init__(self):
        if not 0 < self.base_lr <= self.max_lr:
            raise ValueError("need 0 < base_lr <= max_lr")
        if self.step_size < 1:
            raise ValueError("step_size must be >= 1")
        if self.policy != "triangular":
            raise ValueError(f"unsupported policy {self.policy!r}")


def lr_at(cfg: CyclicalLrConfig, iteration: int) -> float:
    """Triangular cyclical learning rate.

    Written as an interpolation so both ends of the wave are hit exactly:
    ``base_lr`` at multiples of ``2 * step_size``, ``max_lr`` half-way.
    """
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    cycle = math.floor(1 + iteration / (2 * cfg.step_size))
    x = abs(iteration / cfg.step_size - 2 * cycle + 1)
    frac = max(0.0, 1.0 - x)
    return cfg.base_lr * (1.0 - frac) + cfg.max_lr * frac


def schedule_csv(cfg: CyclicalLrConfig, iterations: int) -> str:
    lines = ["iteration,lr"]
    lines += [f"{i},{lr_at(cfg, i)!r}" for i in range(iterations)]
    return "\n".join(lines) + "\n"


SAVE_CHECKPOINT = "save_checkpoint"
CONTINUE = "continue"
STOP = "stop"


@dataclass(frozen=True)
class EarlyStopState:
    patience: int = DETECTOR_PATIENCE
    min_delta: float = 0.0
    best_loss: float = math.inf
    epochs_since_improvement: int = 0
    stopped: bool = False
    best_epoch: int = -1


def observe(state: EarlyStopState, epoch: int, val_loss: float):
    """Feed one validation loss; returns ``(new_state, action)``."""
    if state.stopped:
        raise ObserveAfterStop(f"observation for epoch {epoch} after early stop")
    if val_loss < state.best_loss - state.min_delta:
        new = replace(state, best_loss=val_loss, best_epoch=epoch, epochs_since_improvement=0)
        return new, SAVE_CHECKPOINT
    waited = state.epochs_since_improvement + 1
    if waited >= state.patience:
        return replace(state, epochs_since_improvement=waited, stopped=True), STOP
    return replace(state, epochs_since_improvement=waited), CONTINUE


def smooth_l1(x):
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    out = np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)
    return out.item() if out.ndim == 0 else out


def bce(p, y):
    """Binary cross-entropy with ``p`` clamped to ``[1e-7, 1 - 1e-7]``."""
    p = np.clip(np.asarray(p, dtype=np.float64), BCE_EPS, 1.0 - BCE_EPS)
    y = np.asarray(y, dtype=np.float64)
    out = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    return out.item() if out.ndim == 0 else out
