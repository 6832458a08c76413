from __future__ import annotations

import numpy as np


class RMSprop:
    """RMS-scaled gradient descent over a dict of named arrays (updated in place)."""

    def __init__(self, lr: float, decay: float = 0.99, damping: float = 1e-8):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.lr = lr
        self.decay = decay
        self.damping = damping
        self.mean_sq: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            ms = self.mean_sq.get(name)
            if ms is None:
                ms = self.mean_sq[name] = np.zeros_like(g)
            ms *= self.decay
            ms += (1.0 - self.decay) * g * g
            params[name] -= self.lr * g / (np.sqrt(ms) + self.damping)
