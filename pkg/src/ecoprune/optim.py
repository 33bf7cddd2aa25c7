"""Adam over dicts of numpy arrays."""
from __future__ import annotations

import numpy as np


class Adam:
    """Adam with weight decay.

    Decay is decoupled by default (``p -= lr * wd * p`` beside the Adam
    step); ``decoupled=False`` adds ``wd * p`` to the gradient instead, which
    Adam's normalization turns into a full-size step whenever the gradient
    is otherwise zero. ``lr`` may be a float or a mapping from parameter key
    to learning rate (scalar or per-coordinate array).
    """

    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0,
                 decoupled: bool = True):
        self.lr = lr
        self.decoupled = decoupled
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m: dict = {}
        self.v: dict = {}

    def _lr(self, key):
        if isinstance(self.lr, dict):
            return self.lr[key]
        return self.lr

    def step(self, params: dict, grads: dict) -> None:
        """Update ``params`` in place from ``grads`` (same keys)."""
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for key, g in grads.items():
            p = params[key]
            lr = self._lr(key)
            if self.weight_decay:
                if self.decoupled:
                    p -= lr * self.weight_decay * p
                else:
                    g = g + self.weight_decay * p
            m = self.m.get(key)
            if m is None:
                m = self.m[key] = np.zeros_like(p)
                self.v[key] = np.zeros_like(p)
            v = self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
