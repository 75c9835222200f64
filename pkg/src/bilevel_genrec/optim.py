"""Optimizers acting on a ParameterSet from plain numpy gradients."""
from __future__ import annotations

from typing import Mapping

import numpy as np

from .autodiff import ParameterSet, Tensor


def _array(g) -> np.ndarray:
    return g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)


class SGD:
    """Plain gradient descent: ``p <- p - lr * g``."""

    def __init__(self, params: ParameterSet, lr: float):
        self.params = params
        self.lr = float(lr)

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        for name, g in grads.items():
            self.params.assign(name, self.params[name].data - self.lr * _array(g))

    def state_dict(self) -> dict:
        return {}

    def load_state_dict(self, state: dict) -> None:
        pass


class AdamW:
    """Adam with decoupled weight decay.

    Decay is applied as ``p <- p * (1 - lr * weight_decay)`` before the
    adaptive step, the same ordering as the reference formulation.
    """

    def __init__(self, params: ParameterSet, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros(s) for n, s in params.shapes().items()}
        self.v = {n: np.zeros(s) for n, s in params.shapes().items()}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            g = _array(g)
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            p = self.params[name].data
            if self.weight_decay:
                p = p * (1.0 - self.lr * self.weight_decay)
            p = p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            self.params.assign(name, p)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = {k: np.array(v) for k, v in state["m"].items()}
        self.v = {k: np.array(v) for k, v in state["v"].items()}


def make_optimizer(kind: str, params: ParameterSet, lr: float, weight_decay: float = 0.0):
    if kind == "adamw":
        return AdamW(params, lr, weight_decay=weight_decay)
    if kind == "sgd":
        return SGD(params, lr)
    raise ValueError(f"unknown optimizer {kind!r}; expected 'adamw' or 'sgd'")
