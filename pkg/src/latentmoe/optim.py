"""Minimal Adam training loop for the layers' hand-written backward passes."""

from __future__ import annotations

import numpy as np

from .moe import RoutedFFN


class Adam:
    def __init__(self, lr: float = 1e-2, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict) -> dict:
        """Return updated copies of ``params``; inputs are left untouched."""
        b1, b2 = self.betas
        self.t += 1
        out = {}
        for k, p in params.items():
            g = grads[k]
            m = self.m.get(k, np.zeros_like(p))
            v = self.v.get(k, np.zeros_like(p))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.m[k], self.v[k] = m, v
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            out[k] = p - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return out


def mse(y: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over rows of squared error, and its gradient w.r.t. ``y``."""
    diff = y - target
    t = y.shape[0]
    return float(np.sum(diff * diff) / t), 2.0 * diff / t


def train_regression(layer: RoutedFFN, x, target, steps: int = 500, lr: float = 1e-2):
    """Full-batch Adam on ``mse(layer(x), target)``; returns the trained layer and loss history."""
    opt = Adam(lr)
    losses = []
    for _ in range(steps):
        y, cache = layer.forward(x, return_cache=True)
        loss, dy = mse(y, target)
        losses.append(loss)
        _, grads = layer.backward(cache, dy)
        layer = layer.with_parameters(opt.step(layer.parameters(), grads))
    losses.append(mse(layer.forward(x), target)[0])
    return layer, losses
