"""Plain SGD with classical momentum."""
from __future__ import annotations

from typing import Iterable, Optional

import numpy as np

from .tensor import Tensor


def sgd_step(params: Iterable[Tensor], lr: float, momentum: float = 0.0,
             velocity: Optional[dict] = None, weight_decay: float = 0.0) -> dict:
    """Update ``params`` in place from their ``.grad``; returns the velocity buffers.

    Uses v <- momentum*v + g, w <- w - lr*v. Parameters without a gradient are skipped.
    """
    velocity = {} if velocity is None else velocity
    for p in params:
        if p.grad is None:
            continue
        g = p.grad
        if weight_decay:
            g = g + weight_decay * p.data
        if momentum:
            v = velocity.get(id(p))
            v = g.copy() if v is None else momentum * v + g
            velocity[id(p)] = v
            g = v
        p.data -= (lr * g).astype(p.data.dtype, copy=False)
    return velocity


class SGD:
    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0, clip_norm: Optional[float] = None):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.velocity: dict = {}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2))
                                 for p in self.params if p.grad is not None)))

    def step(self):
        if self.clip_norm is not None:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
                for p in self.params:
                    if p.grad is not None:
                        p.grad = p.grad * scale
        sgd_step(self.params, self.lr, self.momentum, self.velocity, self.weight_decay)
