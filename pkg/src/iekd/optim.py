"""SGD with (Nesterov) momentum and a piecewise-constant step schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MissingGradient
from .tensor import Tensor, zero_grad


@dataclass
class OptimizerState:
    base_lr: float
    momentum: float = 0.9
    nesterov: bool = True
    schedule: list = field(default_factory=list)  # [(epoch, multiplier), ...]
    weight_decay: float = 0.0
    velocity: dict = field(default_factory=dict)
    epoch: int = 0

    @property
    def learning_rate(self) -> float:
        lr = self.base_lr
        for epoch, mult in sorted(self.schedule):
            if self.epoch >= epoch:
                lr *= mult
        return lr


class SGD:
    """Update rule (Nesterov form)::

        v <- mu * v - lr * g
        p <- p + mu * v - lr * g

    Without Nesterov the second line is ``p <- p + v``.
    """

    def __init__(self, params: dict, lr: float = 0.1, momentum: float = 0.9, nesterov: bool = True,
                 schedule=None, weight_decay: float = 0.0):
        self.params = dict(params)
        schedule = sorted((int(e), float(m)) for e, m in (schedule.items() if isinstance(schedule, dict) else schedule or []))
        self.state = OptimizerState(lr, momentum, nesterov, schedule, weight_decay)
        self.state.velocity = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    @property
    def lr(self) -> float:
        return self.state.learning_rate

    def set_epoch(self, epoch: int) -> None:
        self.state.epoch = epoch

    def zero_grad(self) -> None:
        zero_grad(self.params.values())

    def step(self) -> None:
        st = self.state
        lr, mu = st.learning_rate, st.momentum
        for k, p in self.params.items():
            if p.grad is None:
                raise MissingGradient(f"no gradient for parameter {k}")
            g = p.grad
            if st.weight_decay:
                g = g + st.weight_decay * p.data
            v = st.velocity[k]
            v *= mu
            v -= lr * g
            if st.nesterov:
                p.data += mu * v - lr * g
            else:
                p.data += v


def sgd_step(state: OptimizerState, params: dict) -> None:
    """Functional form: one update of ``params`` (name -> Tensor) from ``state``."""
    opt = SGD.__new__(SGD)
    opt.params = params
    opt.state = state
    for k, p in params.items():
        state.velocity.setdefault(k, np.zeros_like(p.data))
    opt.step()
