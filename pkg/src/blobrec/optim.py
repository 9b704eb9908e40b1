"""RMSProp over a dict of numpy parameters (ascent or descent)."""
from __future__ import annotations

import numpy as np


class RMSProp:
    """RMSProp with decay 0.9 and epsilon 1e-8 by default.

    ``step(params, grads)`` updates ``params`` in place; with
    ``maximize=True`` the gradients are followed uphill.
    """

    def __init__(self, learning_rate=1e-3, decay=0.9, eps=1e-8, maximize=True):
        self.learning_rate = learning_rate
        self.decay = decay
        self.eps = eps
        self.sign = 1.0 if maximize else -1.0
        self._sq = {}

    def step(self, params: dict, grads: dict):
        for name, g in grads.items():
            sq = self._sq.get(name)
            if sq is None:
                sq = np.zeros_like(params[name], dtype=np.float64)
            sq *= self.decay
            sq += (1.0 - self.decay) * g * g
            self._sq[name] = sq
            params[name] += self.sign * self.learning_rate * g / (np.sqrt(sq) + self.eps)
        return params
