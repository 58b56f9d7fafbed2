"""Adam optimizer and the step-decay learning-rate schedule."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autograd import Parameter

__all__ = ["Adam", "NonFiniteGradient", "lr_at_epoch"]

LR_DECAY_PERIOD = 10  # epochs per decay step


class NonFiniteGradient(RuntimeError):
    pass


def lr_at_epoch(epoch: int, initial_lr: float, decay_factor: float = 0.7) -> float:
    """lr = initial_lr * decay_factor ** floor(epoch / 10)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return initial_lr * decay_factor ** (epoch // LR_DECAY_PERIOD)


class Adam:
    """Standard Adam (beta1=0.9, beta2=0.999, eps=1e-8) with bias correction.

    Parameters with trainable=False or a missing gradient are left
    untouched.  A non-finite gradient rejects the whole step.
    """

    def __init__(self, params: Sequence[Parameter], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params if p.trainable}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params if p.trainable}

    def step(self, lr: float) -> None:
        for p in self.params:
            if not p.trainable or p.tensor.grad is None:
                continue
            if not np.all(np.isfinite(p.tensor.grad)):
                raise NonFiniteGradient(f"non-finite gradient for parameter {p.name!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p in self.params:
            if not p.trainable or p.tensor.grad is None:
                continue
            g = p.tensor.grad
            m = self.m[p.name]
            v = self.v[p.name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - lr * update.astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.tensor.zero_grad()

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        for k in self.m:
            self.m[k][...] = state["m"][k]
            self.v[k][...] = state["v"][k]
