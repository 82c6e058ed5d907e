"""Differentiable toy reward models on final samples x0."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError
from .tensor import Tensor, as_tensor

__all__ = ["RewardModel", "reward_eval", "REWARD_KINDS"]

REWARD_KINDS = ("radial", "halfplane", "mixture-mode", "hackable")


@dataclass
class RewardModel:
    """Built-in rewards, all smooth in x0.

    radial        -|x0 - target|^2
    halfplane     tanh(<direction, x0> / temperature)
    mixture-mode  log N(x0; target, diag(scale))
    hackable      halfplane + bonus * |x0|^2, which pays off leaving the data
    """

    kind: str = "radial"
    target: list = field(default_factory=lambda: [0.0, 0.0])
    direction: list = field(default_factory=lambda: [1.0, 0.0])
    temperature: float = 0.5
    scale: list = field(default_factory=lambda: [1.0, 1.0])
    bonus: float = 0.05
    differentiable: bool = True

    def __post_init__(self):
        if self.kind not in REWARD_KINDS:
            raise ConfigError(f"unknown reward kind {self.kind!r}; choose from {REWARD_KINDS}")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")

    def to_config(self) -> dict:
        return asdict(self)

    @classmethod
    def from_config(cls, doc: dict) -> "RewardModel":
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def reward_eval(rm: RewardModel, x0, c=None) -> Tensor:
    """Per-sample reward, shape (B,) for x0 of shape (B, d).

    ``c`` is accepted for conditional rewards; the built-ins ignore it.
    """
    x0 = as_tensor(x0)
    if rm.kind == "radial":
        d = x0 - np.asarray(rm.target, dtype=float)
        return -(d * d).sum(axis=-1)
    u = np.asarray(rm.direction, dtype=float)
    if rm.kind in ("halfplane", "hackable"):
        r = ((x0 * u).sum(axis=-1) / rm.temperature).tanh()
        if rm.kind == "hackable":
            r = r + rm.bonus * (x0 * x0).sum(axis=-1)
        return r
    if rm.kind == "mixture-mode":
        var = np.asarray(rm.scale, dtype=float)
        d = x0 - np.asarray(rm.target, dtype=float)
        return -0.5 * (d * d / var).sum(axis=-1) - 0.5 * float(np.sum(np.log(2 * np.pi * var)))
    raise ConfigError(f"unknown reward kind {rm.kind!r}")
