"""First-order optimizers over flat parameter vectors."""
from __future__ import annotations

import math

import numpy as np


def cosine_lr(peak: float, step: int, total_steps: int, floor_frac: float = 0.1) -> float:
    """Cosine decay from ``peak`` to ``floor_frac * peak`` over ``total_steps``."""
    if total_steps <= 1:
        return peak
    t = min(step, total_steps - 1) / (total_steps - 1)
    lo = floor_frac * peak
    return lo + 0.5 * (peak - lo) * (1.0 + math.cos(math.pi * t))


class AdamW:
    """Adam with decoupled weight decay.

    State (``m``, ``v``, ``t``) is exposed so training can be checkpointed and
    resumed bit-exactly.
    """

    def __init__(self, n_params: int, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01, total_steps: int = 0, cosine: bool = True):
        self.lr = float(lr)
        self.beta1, self.beta2 = (float(b) for b in betas)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.total_steps = int(total_steps)
        self.cosine = bool(cosine)
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def current_lr(self) -> float:
        if self.cosine and self.total_steps > 0:
            return cosine_lr(self.lr, self.t, self.total_steps)
        return self.lr

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        lr = self.current_lr()
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return theta - lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * theta)

    def state_vector(self) -> np.ndarray:
        return np.concatenate([self.m, self.v, [float(self.t)]])

    def load_state_vector(self, vec: np.ndarray) -> None:
        n = self.m.size
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != 2 * n + 1:
            raise ValueError(f"optimizer state has {vec.size} entries, expected {2 * n + 1}")
        self.m = vec[:n].copy()
        self.v = vec[n:2 * n].copy()
        self.t = int(vec[-1])
