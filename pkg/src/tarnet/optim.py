"""Parameter updates: Adam (default) and plain gradient descent."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, MissingGradientError, ShapeError
from .tensor import ParamStore


@dataclass
class OptimizerConfig:
    kind: str = "adam"  # "adam" | "sgd"
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ConfigError(f"optimizer kind must be 'adam' or 'sgd', got {self.kind!r}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")


@dataclass
class Optimizer:
    config: OptimizerConfig = field(default_factory=OptimizerConfig)
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: ParamStore, lr_scale: float = 1.0) -> None:
        missing = [name for name, p in params.items() if p.grad is None]
        if missing:
            raise MissingGradientError(
                f"no gradient for {len(missing)} parameter(s), e.g. {missing[0]!r}; run backward() first"
            )
        cfg = self.config
        lr = cfg.lr * lr_scale
        self.step_count += 1
        t = self.step_count
        for name, p in params.items():
            g = p.grad
            if g.shape != p.shape:
                raise ShapeError(f"gradient shape {g.shape} differs from parameter {name!r} shape {p.shape}")
            if cfg.kind == "sgd":
                p.data = (p.data - lr * g).astype(p.dtype, copy=False)
                continue
            m = self.first_moment.get(name)
            v = self.second_moment.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            m = cfg.beta1 * m + (1 - cfg.beta1) * g
            v = cfg.beta2 * v + (1 - cfg.beta2) * (g * g)
            self.first_moment[name] = m
            self.second_moment[name] = v
            m_hat = m / (1 - cfg.beta1**t)
            v_hat = v / (1 - cfg.beta2**t)
            p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)).astype(p.dtype, copy=False)


def optimizer_step(params: ParamStore, optimizer: Optimizer) -> None:
    optimizer.step(params)
