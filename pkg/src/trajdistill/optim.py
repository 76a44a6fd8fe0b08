"""SGD with momentum and weight decay over named parameter sets."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, TrajDistillError


class SGD:
    """v <- momentum*v + (grad + wd*param); param <- param - lr*v.

    Gradients are zeroed after each step. Parameters are a name -> Tensor
    mapping so a missing gradient can be reported by name.
    """

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0):
        if lr < 0.0:
            raise ConfigError(f"negative learning rate {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ConfigError(f"momentum {momentum} outside [0, 1)")
        if weight_decay < 0.0:
            raise ConfigError(f"negative weight decay {weight_decay}")
        self.params = dict(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise TrajDistillError(f"parameter {name!r} has no gradient")
            g = p.grad
            if self.weight_decay != 0.0:
                g = g + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data -= self.lr * v
        self.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
