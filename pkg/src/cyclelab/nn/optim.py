from __future__ import annotations

import numpy as np

from .tensor import Tensor


def sgd_step(params: list[Tensor], grads: list[np.ndarray], lr: float) -> None:
    """In-place ``p <- p - lr * g``."""
    if len(params) != len(grads):
        raise ValueError("one gradient per parameter expected")
    for p, g in zip(params, grads):
        if p.value.shape != np.shape(g):
            raise ValueError(f"shape mismatch for {p.name}: {p.value.shape} vs {np.shape(g)}")
        p.value -= lr * g


def global_norm(grads: list[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float | None) -> tuple[list[np.ndarray], float]:
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return [g * scale for g in grads], norm


class Adam:
    """Adaptive-moment updates; opt-in alternative to plain SGD."""

    def __init__(self, params: list[Tensor], lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
