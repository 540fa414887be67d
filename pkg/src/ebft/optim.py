"""Adam and SGD parameter updates used by every fine-tuner and trainer."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import Tensor

DEFAULT_BETAS = (0.9, 0.999)
DEFAULT_EPS = 1e-8


def adam_step(params: Sequence[tuple[Tensor, Tensor, Tensor]],
              grads: Sequence[np.ndarray],
              lr: float,
              betas: tuple[float, float] = DEFAULT_BETAS,
              eps: float = DEFAULT_EPS,
              step: int = 1) -> None:
    """One bias-corrected Adam update, in place.

    `params` holds (parameter, first moment, second moment) triples; `step`
    is 1-based. Deterministic for fixed inputs.
    """
    if lr <= 0:
        raise ConfigError(f"adam_step lr must be positive, got {lr}")
    b1, b2 = betas
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for (p, m1, m2), g in zip(params, grads):
        if g.shape != p.data.shape:
            raise DimensionError("adam_step gradient shape mismatch", p.shape, g.shape)
        m1.data *= b1
        m1.data += (1.0 - b1) * g
        m2.data *= b2
        m2.data += (1.0 - b2) * (g * g)
        p.data -= lr * (m1.data / c1) / (np.sqrt(m2.data / c2) + eps)


class Adam:
    """Stateful wrapper around adam_step for a fixed parameter list."""

    def __init__(self, params: Sequence[Tensor], lr: float,
                 betas: tuple[float, float] = DEFAULT_BETAS, eps: float = DEFAULT_EPS):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self._state = [(p, Tensor(np.zeros_like(p.data)), Tensor(np.zeros_like(p.data)))
                       for p in self.params]

    def step(self, grads: Optional[Sequence[np.ndarray]] = None) -> None:
        if grads is None:
            grads = [p.grad for p in self.params]
        self.step_count += 1
        adam_step(self._state, grads, self.lr, self.betas, self.eps, self.step_count)


class SGD:
    """Plain gradient descent, the update rule written in the training loop."""

    def __init__(self, params: Sequence[Tensor], lr: float):
        if lr <= 0:
            raise ConfigError(f"SGD lr must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr

    def step(self, grads: Optional[Sequence[np.ndarray]] = None) -> None:
        if grads is None:
            grads = [p.grad for p in self.params]
        for p, g in zip(self.params, grads):
            if g.shape != p.data.shape:
                raise DimensionError("sgd gradient shape mismatch", p.shape, g.shape)
            p.data -= self.lr * g


def make_optimizer(kind: str, params: Sequence[Tensor], lr: float):
    if kind == "adam":
        return Adam(params, lr)
    if kind == "sgd":
        return SGD(params, lr)
    raise ConfigError(f"unknown optimizer {kind!r}; expected 'adam' or 'sgd'")
