"""Adam with decoupled weight decay for autodiff parameters."""

from dataclasses import dataclass

import numpy as np

from elplab.errors import ConfigError


@dataclass(frozen=True)
class OptimizerConfig:
    """Optimizer and training-loop settings."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 32
    iterations: int = 10000
    val_every: int = 100
    log_every: int = 50

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"optim.lr must be > 0, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("optim.beta1 and optim.beta2 must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("optim.weight_decay must be >= 0")
        if self.batch_size < 1 or self.iterations < 1:
            raise ConfigError("optim.batch_size and optim.iterations must be >= 1")
        if self.val_every < 1 or self.log_every < 1:
            raise ConfigError("optim.val_every and optim.log_every must be >= 1")


class AdamW:
    """Adaptive moment estimation with weight decay applied to the weights."""

    def __init__(self, params, config):
        self.params = list(params)
        self.config = config
        self.step_count = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        cfg = self.config
        self.step_count += 1
        bias1 = 1.0 - cfg.beta1**self.step_count
        bias2 = 1.0 - cfg.beta2**self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + cfg.eps)
            decayed = p.values * (1.0 - cfg.lr * cfg.weight_decay)
            p.assign_(decayed - cfg.lr * update)

    def state(self):
        """Copies of the current parameter values."""
        return [np.array(p.values) for p in self.params]

    def restore(self, values):
        for p, value in zip(self.params, values):
            p.assign_(value)
