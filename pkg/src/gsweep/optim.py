"""Minimal Adam optimizer used by the score-mapping and fine-tuning loops."""

from __future__ import annotations

import numpy as np


class Adam:
    """Adam with bias correction; state is per parameter array."""

    def __init__(self, step_size: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = step_size
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """Return updated parameters; does not modify the inputs."""
        if self.m is None:
            self.m = np.zeros_like(params, dtype=np.float64)
            self.v = np.zeros_like(params, dtype=np.float64)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        m_hat = self.m / (1 - self.b1 ** self.t)
        v_hat = self.v / (1 - self.b2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
