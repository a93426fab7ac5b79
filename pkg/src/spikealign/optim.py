"""Plain SGD and Adam over named parameter tensors."""
from __future__ import annotations

import numpy as np

from .config import Config
from .errors import ConfigError
from .tensor import Tensor


class SGD:
    def __init__(self, params: dict[str, Tensor]):
        self.params = dict(params)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float) -> None:
        for p in self.params.values():
            if p.grad is not None:
                p.data -= p.dtype.type(lr) * p.grad


class Adam(SGD):
    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        super().__init__(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros(p.shape) for k, p in self.params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in self.params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            update = lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data -= update.astype(p.dtype)


def make_optimizer(cfg: Config, params: dict[str, Tensor]) -> SGD:
    name = str(cfg["optim.name"]).lower()
    if name == "sgd":
        return SGD(params)
    if name == "adam":
        return Adam(params, cfg["optim.beta1"], cfg["optim.beta2"], cfg["optim.eps"])
    raise ConfigError(f"unknown optimizer {name!r}")
