"""AdamW with decoupled weight decay and a warmup/linear-decay schedule."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, TrainingError
from .params import ParamStore


@dataclass(frozen=True)
class OptimConfig:
    lr_peak: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    weight_decay: float = 0.1
    warmup_fraction: float = 0.10
    batch_size: int = 32

    def __post_init__(self):
        if not self.lr_peak > 0:
            raise ConfigError(f"lr_peak must be positive, got {self.lr_peak}")
        if not 0 < self.warmup_fraction < 1:
            raise ConfigError(f"warmup_fraction must lie in (0, 1), got {self.warmup_fraction}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")

    def to_dict(self):
        return asdict(self)


def warmup_steps(total_steps: int, cfg: OptimConfig) -> int:
    return int(np.floor(cfg.warmup_fraction * total_steps + 0.5))


def lr_at(step: int, total_steps: int, cfg: OptimConfig) -> float:
    """Linear warmup from 0 to ``lr_peak``, then linear decay reaching 0 at ``total_steps``."""
    if not 0 <= step < total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps})")
    warm = warmup_steps(total_steps, cfg)
    if step < warm:
        return cfg.lr_peak * step / warm
    return cfg.lr_peak * (total_steps - step) / (total_steps - warm)


def split_budget(total_steps: int, fraction: float) -> tuple[int, int]:
    """Stage-1/stage-2 step counts; stage 1 rounds half up and the sum is preserved."""
    if not 0 <= fraction < 1:
        raise ConfigError(f"stage-1 fraction must lie in [0, 1), got {fraction}")
    stage1 = int(np.floor(fraction * total_steps + 0.5))
    return stage1, total_steps - stage1


def decays(name: str, arr: np.ndarray) -> bool:
    """Weight decay applies to 2-D weight matrices only (never biases or norm gains)."""
    return arr.ndim == 2


@dataclass
class AdamW:
    """Optimiser state over the trainable tensors of one or more ``ParamStore``s.

    Moments are keyed by parameter name, so stores must not share names.
    """

    cfg: OptimConfig
    total_steps: int
    step_index: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, stores: list[ParamStore]) -> float:
        lr = lr_at(self.step_index, self.total_steps, self.cfg)
        t = self.step_index + 1
        b1, b2 = self.cfg.beta1, self.cfg.beta2
        c1, c2 = 1.0 - b1**t, 1.0 - b2**t
        for store in stores:
            for name, p in store.items():
                if not p.requires_grad:
                    continue
                g = p.grad if p.grad is not None else np.zeros_like(p.data)
                if not np.all(np.isfinite(g)):
                    raise TrainingError(f"non-finite gradient in {name!r}", step=self.step_index)
                m = self.m.get(name)
                v = self.v.get(name)
                if m is None:
                    m = np.zeros_like(p.data)
                    v = np.zeros_like(p.data)
                m = b1 * m + (1.0 - b1) * g
                v = b2 * v + (1.0 - b2) * g * g
                self.m[name], self.v[name] = m, v
                w = p.data
                if self.cfg.weight_decay and decays(name, w):
                    w = w * (1.0 - lr * self.cfg.weight_decay)
                p.data = (w - lr * (m / c1) / (np.sqrt(v / c2) + self.cfg.eps)).astype(p.data.dtype)
        self.step_index += 1
        return lr
