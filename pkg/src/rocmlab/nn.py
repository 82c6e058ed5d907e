"""Dense tanh networks and first-order optimizers on top of :mod:`rocmlab.tensor`."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor, get_default_dtype

__all__ = ["MLP", "Adam", "SGD", "global_norm", "clip_grads", "sinusoidal_features"]


class MLP:
    """tanh multilayer perceptron; the last layer is linear."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator, zero_last: bool = False):
        self.sizes = list(sizes)
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        n = len(sizes) - 1
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            if i == n - 1 and zero_last:
                w = np.zeros((fan_in, fan_out))
            else:
                # Glorot-normal; last layer scaled down so F starts near zero
                std = np.sqrt(2.0 / (fan_in + fan_out)) * (0.1 if i == n - 1 else 1.0)
                w = rng.standard_normal((fan_in, fan_out)) * std
            self.weights.append(Tensor(w, requires_grad=True))
            self.biases.append(Tensor(np.zeros(fan_out), requires_grad=True))

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def __call__(self, h: Tensor) -> Tensor:
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = h.tanh()
        return h


def sinusoidal_features(v, freqs: np.ndarray) -> np.ndarray:
    """[sin(v f), cos(v f)] per row; ``v`` scalar or shape (B,)."""
    v = np.atleast_1d(np.asarray(v, dtype=get_default_dtype()))[:, None]
    ang = v * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def global_norm(params: Sequence[Tensor]) -> float:
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(sq))


def clip_grads(params: Sequence[Tensor], max_norm: float | None) -> float:
    """Rescale gradients to ``max_norm`` if exceeded; returns the pre-clip norm."""
    norm = global_norm(params)
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


@dataclass
class SGD:
    params: list
    lr: float

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data = p.data - self.lr * p.grad

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 3e-4,
                 betas: tuple = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

