"""Reward fine-tuning of few-step consistency models on analytic toy data.

Pure numpy stack: a small reverse-mode autodiff engine, an analytic
Gaussian-mixture teacher with a probability-flow ODE sampler, consistency
distillation, f-divergence regularizers, the direct (reparameterized)
fine-tuning trainer and a policy-gradient baseline, plus a linear-Gaussian
oracle with exact answers.
"""
from .consistency import ConsistencyModel, DistillConfig, ModelConfig, distill, generate
from .diffusion import GaussianMixture, NoiseSchedule, preset
from .divergences import DivergenceSpec
from .errors import ConfigError, NumericError
from .oracle import LinearPolicy
from .rewards import RewardModel, reward_eval
from .tensor import Tape, Tensor, no_grad
from .trainers import TrainConfig, pg_step, rocm_step, train

__version__ = "0.1.0"

__all__ = [
    "ConsistencyModel",
    "DistillConfig",
    "ModelConfig",
    "distill",
    "generate",
    "GaussianMixture",
    "NoiseSchedule",
    "preset",
    "DivergenceSpec",
    "ConfigError",
    "NumericError",
    "LinearPolicy",
    "RewardModel",
    "reward_eval",
    "Tape",
    "Tensor",
    "no_grad",
    "TrainConfig",
    "pg_step",
    "rocm_step",
    "train",
]
