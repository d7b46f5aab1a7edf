"""He initialization, RMSProp and the step learning-rate schedule."""
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

__all__ = ["he_init", "OptimizerState", "rmsprop_step", "RMSProp", "lr_schedule"]


def he_init(shape, fan_in, rng):
    """Zero-mean normal weights with variance ``2 / fan_in``."""
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True)


@dataclass
class OptimizerState:
    v: np.ndarray
    rho: float = 0.9
    eps: float = 1e-8
    lr: float = 0.01


def rmsprop_step(param, grad, state):
    """One in-place RMSProp update of ``param`` (ndarray); returns ``param``.

    v <- rho * v + (1 - rho) * g**2 ;  param <- param - lr * g / sqrt(v + eps)
    """
    if state.v.shape != param.shape:
        raise ValueError("optimizer state shape does not match the parameter")
    state.v *= state.rho
    state.v += (1.0 - state.rho) * grad * grad
    param -= state.lr * grad / np.sqrt(state.v + state.eps)
    return param


class RMSProp:
    """RMSProp over a list of parameter tensors."""

    def __init__(self, params, lr=0.01, rho=0.9, eps=1e-8):
        self.params = list(params)
        self.states = [OptimizerState(np.zeros_like(p.data), rho, eps, lr) for p in self.params]

    @property
    def lr(self):
        return self.states[0].lr if self.states else 0.0

    @lr.setter
    def lr(self, value):
        for s in self.states:
            s.lr = value

    def step(self):
        for p, s in zip(self.params, self.states):
            if p.grad is not None:
                rmsprop_step(p.data, p.grad, s)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_arrays(self):
        return [s.v for s in self.states]

    def load_state_arrays(self, arrays):
        for s, a in zip(self.states, arrays):
            s.v[...] = a


def lr_schedule(epoch, total_epochs=200, initial=0.01, milestones=(10, 25),
                factor=0.1, reference_epochs=200):
    """Learning rate for the 0-based ``epoch``.

    The rate is divided by 10 after each milestone epoch. Milestones are
    given on a ``reference_epochs`` run; shorter runs scale them by
    ``total_epochs / reference_epochs`` so the schedule keeps its shape.
    """
    scale = min(1.0, total_epochs / reference_epochs)
    lr = initial
    for m in milestones:
        if epoch >= m * scale:
            lr *= factor
    return lr
