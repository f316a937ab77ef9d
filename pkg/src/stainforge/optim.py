"""Adam with linear warm-up and exponential learning-rate decay."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import NumericError, Tensor


@dataclass
class OptimConfig:
    lr: float = 3e-5
    warmup: int = 100
    horizon: int = 30_000
    final_ratio: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.warmup < 0 or self.horizon < 1:
            raise ValueError("warmup must be >= 0 and horizon >= 1")
        if not 0 < self.final_ratio <= 1:
            raise ValueError("final_ratio must lie in (0, 1]")


def lr_at(cfg: OptimConfig, step: int) -> float:
    """Effective learning rate for 1-indexed optimizer step ``step``.

    ``base * min(step / warmup, 1) * final_ratio ** (min(step, horizon) / horizon)``
    """
    warm = 1.0 if cfg.warmup == 0 else min(step / cfg.warmup, 1.0)
    decay = math.exp(math.log(cfg.final_ratio) * min(step, cfg.horizon) / cfg.horizon)
    return cfg.lr * warm * decay


@dataclass
class OptimizerState:
    config: OptimConfig
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, params: dict[str, Tensor], config: OptimConfig) -> "OptimizerState":
        return cls(
            config=config,
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adam_step(params: dict[str, Tensor], state: OptimizerState, grads: dict[str, np.ndarray] | None = None) -> float:
    """Apply one bias-corrected Adam update in place and return the lr used.

    ``grads`` defaults to each parameter's accumulated ``.grad``.
    """
    cfg = state.config
    if grads is None:
        grads = {k: p.grad for k, p in params.items() if p.requires_grad}
    for k, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {k}")
    state.step += 1
    t = state.step
    lr = lr_at(cfg, t)
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for k, g in grads.items():
        p = params[k]
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)).astype(p.dtype, copy=False)
    return lr
