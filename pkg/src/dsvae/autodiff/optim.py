"""Adam with decoupled weight decay and a step-decay learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class DivergedError(RuntimeError):
    pass


@dataclass
class AdamState:
    learning_rate: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def step_decay_lr(epoch: int, lr_initial: float = 5e-4, factor: float = 0.95, every: int = 5) -> float:
    """Learning rate for a zero-based epoch index: decays by ``factor`` every ``every`` epochs."""
    return lr_initial * factor ** (epoch // every)


def adam_step(params: list[Tensor], state: AdamState) -> None:
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise DivergedError("diverged: non-finite gradient")

    state.step += 1
    b1, b2 = state.betas
    lr = state.learning_rate
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p.data -= lr * state.weight_decay * p.data
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 5e-4, weight_decay: float = 1e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(learning_rate=lr, betas=betas, eps=eps, weight_decay=weight_decay)

    def step(self) -> None:
        adam_step(self.params, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
