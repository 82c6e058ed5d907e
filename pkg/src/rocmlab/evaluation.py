"""Held-out evaluation shared by the CLI, the scripts and the tests."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .consistency import generate
from .diffusion import GaussianMixture, NoiseSchedule, teacher_sample
from .divergences import DivergenceSpec, trajectory_divergence
from .metrics import sliced_w2
from .rewards import RewardModel, reward_eval
from .tensor import no_grad

__all__ = ["EvalSet", "fidelity_reference", "make_eval_set", "fidelity", "evaluate"]

EVAL_SEED = 10_007


@dataclass
class EvalSet:
    """Fixed held-out noises and conditions plus the fidelity reference sample."""

    reference: np.ndarray
    noise: np.ndarray
    cond: np.ndarray | None
    omega: float = 0.0


def fidelity_reference(gm: GaussianMixture, sched: NoiseSchedule, rm: RewardModel, n: int,
                       rng: np.random.Generator, region: str = "auto") -> np.ndarray:
    """Teacher ODE samples, restricted to the rewarded half-plane when region applies.

    ``region="auto"`` restricts for halfplane-type rewards, so fidelity
    measures how well the tuned model matches the data it is being steered
    toward rather than penalizing the steering itself.
    """
    if region not in ("auto", "all", "halfplane"):
        raise ValueError(f"unknown fidelity region {region!r}")
    restrict = region == "halfplane" or (region == "auto" and rm.kind in ("halfplane", "hackable"))
    if not restrict:
        return teacher_sample(gm, sched, n, rng)
    u = np.asarray(rm.direction, dtype=float)
    kept: list[np.ndarray] = []
    total = 0
    for _ in range(64):
        x = teacher_sample(gm, sched, 2 * n, rng)
        x = x[x @ u > 0]
        kept.append(x)
        total += len(x)
        if total >= n:
            return np.concatenate(kept)[:n]
    raise ValueError("teacher puts too little mass in the rewarded half-plane")


def make_eval_set(gm: GaussianMixture, sched: NoiseSchedule, rm: RewardModel, n: int = 2048,
                  n_conditions: int = 0, omega: float = 0.0, seed: int = EVAL_SEED,
                  region: str = "auto") -> EvalSet:
    rng = np.random.default_rng(seed)
    ref = fidelity_reference(gm, sched, rm, n, rng, region)
    noise = rng.standard_normal((sched.K + 1, n, gm.dim))
    cond = rng.integers(0, n_conditions, n) if n_conditions else None
    return EvalSet(ref, noise, cond, omega)


def fidelity(model, sched: NoiseSchedule, ev: EvalSet) -> float:
    with no_grad():
        x0 = generate(model, sched, ev.cond, ev.omega, noise=ev.noise).x0.data
    if not np.all(np.isfinite(x0)):
        return float("inf")
    return sliced_w2(x0, ev.reference, rng=np.random.default_rng(0))


def evaluate(model, ref_model, sched: NoiseSchedule, rm: RewardModel, ev: EvalSet,
             spec: DivergenceSpec | None = None) -> dict:
    """Mean reward, mean trajectory divergence and fidelity on the held-out set."""
    spec = spec or DivergenceSpec("kl")
    if spec.kind == "none":
        spec = DivergenceSpec("kl")
    with no_grad():
        traj = generate(model, sched, ev.cond, ev.omega, noise=ev.noise)
        reward = float(reward_eval(rm, traj.x0, traj.cond).data.mean())
        div = trajectory_divergence(spec, traj, model, ref_model, sched,
                                    rng=np.random.default_rng(EVAL_SEED))
    x0 = traj.x0.data
    fid = sliced_w2(x0, ev.reference, rng=np.random.default_rng(0)) if np.all(np.isfinite(x0)) else float("inf")
    return {"reward": reward, "divergence": float(div.data.mean()), "fidelity": fid}
