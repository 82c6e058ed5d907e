"""Reward fine-tuning: direct (reparameterized) optimization and a policy-gradient baseline.

Both trainers maximize  mean_i [R(x0_i) - beta D_i]  where D_i sums per-step
conditional divergences to the frozen reference along trajectory i.  The
direct trainer backpropagates through the whole generation unroll; the
baseline treats R as a black box and uses the score-function estimator.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .consistency import TrajectoryRecord, generate, save_checkpoint
from .diffusion import NoiseSchedule
from .divergences import DivergenceSpec, trajectory_divergence
from .errors import ConfigError, NumericError
from .metrics import RunMetrics
from .nn import SGD, Adam, clip_grads
from .rewards import RewardModel, reward_eval
from .tensor import Tape, Tensor, clip, concat, minimum, no_grad

__all__ = [
    "TrainConfig",
    "PGState",
    "rocm_step",
    "pg_step",
    "train",
    "trajectory_log_prob",
    "resolve_beta_auto",
    "sample_conditions",
    "param_distance",
]


@dataclass
class TrainConfig:
    trainer: str = "rocm"
    iterations: int = 200
    batch_size: int = 32
    lr: float = 1e-2
    divergence: DivergenceSpec = field(default_factory=DivergenceSpec)
    omega: float = 0.0
    K: int = 8
    seed: int = 0
    optimizer: str = "sgd"
    truncate: int | None = None
    grad_clip: float | None = 10.0
    stop_grad_divergence: bool = False
    pg_clip: float | None = None
    ppo_epochs: int = 4
    baseline_decay: float = 0.9
    eval_every: int = 50
    checkpoint_every: int = 0
    reference: str | None = None

    def __post_init__(self):
        if isinstance(self.divergence, dict):
            self.divergence = DivergenceSpec.from_config(self.divergence)
        if self.trainer not in ("rocm", "pg"):
            raise ConfigError(f"unknown trainer {self.trainer!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr < 0:
            raise ConfigError("learning rate must be non-negative")
        if self.truncate is not None and not 1 <= self.truncate <= self.K:
            raise ConfigError(f"truncate must lie in [1, K={self.K}]")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")

    def to_config(self) -> dict:
        out = asdict(self)
        out["divergence"] = self.divergence.to_config()
        return out


@dataclass
class PGState:
    """Running reward baseline for the policy-gradient trainer."""

    baseline: float | None = None
    decay: float = 0.9

    def update(self, rewards: np.ndarray) -> None:
        m = float(np.mean(rewards))
        self.baseline = m if self.baseline is None else self.decay * self.baseline + (1 - self.decay) * m


def make_optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(params, lr=cfg.lr)
    return SGD(list(params), lr=cfg.lr)


def sample_conditions(model, batch: int, rng: np.random.Generator):
    m = getattr(model, "n_conditions", 0)
    return rng.integers(0, m, batch) if m else None


def param_distance(model, ref_model) -> float:
    return float(np.linalg.norm(model.get_flat() - ref_model.get_flat()))


def _check_finite(value, what: str, it, seed) -> None:
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite {what} at iteration {it} (seed {seed})")


def _monitor_spec(spec: DivergenceSpec) -> DivergenceSpec:
    # kind "none" still reports a KL diagnostic so runs stay comparable
    return DivergenceSpec("kl", 0.0) if spec.kind == "none" else spec


def rocm_step(model, ref_model, sched: NoiseSchedule, rm: RewardModel, spec: DivergenceSpec,
              cfg: TrainConfig, rng: np.random.Generator, opt=None, it: int = 0) -> dict:
    """One ascent step on the reparameterized objective, backprop through the unroll."""
    params = model.parameters()
    opt = opt or make_optimizer(params, cfg)
    batch = cfg.batch_size
    cond = sample_conditions(model, batch, rng)
    noise = rng.standard_normal((sched.K + 1, batch, _dim(model)))
    with Tape() as tape:
        traj = generate(model, sched, cond, cfg.omega, noise=noise, grad_steps=cfg.truncate)
        reward = reward_eval(rm, traj.x0, traj.cond)
        if spec.active:
            div = trajectory_divergence(spec, traj, model, ref_model, sched,
                                        stop_grad=cfg.stop_grad_divergence, rng=rng)
            objective = (reward - spec.beta * div).mean()
        else:
            with no_grad():
                div = trajectory_divergence(_monitor_spec(spec), traj, model, ref_model, sched, rng=rng)
            objective = reward.mean()
        _check_finite(objective.data, "objective", it, cfg.seed)
        for p in params:
            p.grad = None
        tape.backward(-objective)
        tape.clear()
    for p in params:
        if p.grad is not None:
            _check_finite(p.grad, "gradient", it, cfg.seed)
    norm = clip_grads(params, cfg.grad_clip)
    opt.step()
    return {
        "reward_mean": float(reward.data.mean()),
        "div_mean": float(div.data.mean()),
        "objective": float(objective.data),
        "grad_norm": norm,
    }


def _dim(model) -> int:
    return model.cfg.dim if hasattr(model, "cfg") else model.dim


def _rescore(model, traj: TrajectoryRecord) -> TrajectoryRecord:
    """Detached states with freshly taped model outputs x_tilde_k = f(x_k)."""
    xs = [x.detach() if x is not None else None for x in traj.x]
    xt: list = [None] * len(xs)
    for k in range(1, traj.K + 1):
        xt[k] = model(xs[k], traj.omega, traj.cond, traj.times[k])
    return TrajectoryRecord(traj.cond, traj.omega, traj.seed, traj.times, xs, xt, traj.noise)


def trajectory_log_prob(rec: TrajectoryRecord, sched: NoiseSchedule, per_step: bool = False) -> Tensor:
    """log prod_{k=2..K} N(x_{k-1}; alpha(t_{k-1}) x_tilde_k, sigma(t_{k-1})^2 I).

    The final step (sigma(t_0) = 0) is deterministic and excluded.  Returns
    shape (B,), or (B, K-1) with ``per_step``.
    """
    terms = []
    for k in range(2, rec.K + 1):
        a = sched.alpha(rec.times[k - 1])
        s = sched.sigma(rec.times[k - 1])
        diff = rec.x[k - 1] - rec.x_tilde[k] * a
        d = diff.shape[-1]
        lp = (diff * diff).sum(axis=-1) * (-0.5 / s**2) - 0.5 * d * float(np.log(2 * np.pi * s * s))
        terms.append(lp.reshape((-1, 1)))
    if not terms:
        return Tensor(np.zeros((rec.noise.shape[1], 0) if per_step else rec.noise.shape[1]))
    steps = concat(terms, axis=1)
    return steps if per_step else steps.sum(axis=1)


def pg_step(model, ref_model, sched: NoiseSchedule, rm: RewardModel, spec: DivergenceSpec,
            cfg: TrainConfig, rng: np.random.Generator, opt=None, state: PGState | None = None,
            it: int = 0) -> dict:
    """Score-function (REINFORCE) step with an EMA reward baseline.

    With ``cfg.pg_clip`` set, runs ``cfg.ppo_epochs`` clipped importance-ratio
    epochs on the same batch instead of a single REINFORCE step.
    """
    params = model.parameters()
    opt = opt or make_optimizer(params, cfg)
    state = state or PGState(decay=cfg.baseline_decay)
    batch = cfg.batch_size
    cond = sample_conditions(model, batch, rng)
    noise = rng.standard_normal((sched.K + 1, batch, _dim(model)))
    with no_grad():
        traj = generate(model, sched, cond, cfg.omega, noise=noise)
        reward = reward_eval(rm, traj.x0, traj.cond).data
    _check_finite(reward, "reward", it, cfg.seed)
    b = state.baseline if state.baseline is not None else float(reward.mean())
    adv = reward - b
    state.update(reward)
    epochs = cfg.ppo_epochs if cfg.pg_clip is not None else 1
    old_lp = None
    if cfg.pg_clip is not None:
        with no_grad():
            old_lp = trajectory_log_prob(_rescore(model, traj), sched, per_step=True).data
    norm = 0.0
    div_value = 0.0
    for _ in range(epochs):
        with Tape() as tape:
            rec = _rescore(model, traj)
            if cfg.pg_clip is None:
                surrogate = (trajectory_log_prob(rec, sched) * adv).mean()
            else:
                lp = trajectory_log_prob(rec, sched, per_step=True)
                ratio = (lp - old_lp).exp()
                a = adv[:, None]
                clipped = clip(ratio, 1.0 - cfg.pg_clip, 1.0 + cfg.pg_clip)
                surrogate = minimum(ratio * a, clipped * a).mean()
            if spec.active:
                div = trajectory_divergence(spec, rec, model, ref_model, sched, rng=rng)
                surrogate = surrogate - spec.beta * div.mean()
            else:
                with no_grad():
                    div = trajectory_divergence(_monitor_spec(spec), rec, model, ref_model, sched, rng=rng)
            _check_finite(surrogate.data, "surrogate", it, cfg.seed)
            for p in params:
                p.grad = None
            tape.backward(-surrogate)
            tape.clear()
        for p in params:
            if p.grad is not None:
                _check_finite(p.grad, "gradient", it, cfg.seed)
        norm = clip_grads(params, cfg.grad_clip)
        opt.step()
        div_value = float(div.data.mean())
    return {"reward_mean": float(reward.mean()), "div_mean": div_value, "grad_norm": norm}


def resolve_beta_auto(model, ref_model, sched, rm, spec: DivergenceSpec, cfg: TrainConfig,
                      probe_steps: int = 20) -> tuple[float, dict]:
    """Pick beta so beta * D sits one order of magnitude below mean |R|.

    D is zero at initialization (theta = theta_ref), so it is measured after a
    short unregularized probe run on a scratch copy of the model.
    """
    probe = model.copy()
    rng = np.random.default_rng(cfg.seed + 7919)
    probe_spec = DivergenceSpec("kl" if spec.kind == "none" else spec.kind, 0.0, spec.mc_samples)
    opt = make_optimizer(probe.parameters(), cfg)
    first = rocm_step(probe, ref_model, sched, rm, probe_spec, cfg, rng, opt)
    last = first
    for i in range(1, probe_steps):
        last = rocm_step(probe, ref_model, sched, rm, probe_spec, cfg, rng, opt, it=i)
    with no_grad():
        cond = sample_conditions(probe, cfg.batch_size, rng)
        traj = generate(probe, sched, cond, cfg.omega, noise=rng.standard_normal(
            (sched.K + 1, cfg.batch_size, _dim(probe))))
        r0 = np.abs(reward_eval(rm, generate(ref_model, sched, cond, cfg.omega, noise=traj.noise).x0).data).mean()
        d = float(trajectory_divergence(probe_spec, traj, probe, ref_model, sched, rng=rng).data.mean())
    if not d > 0:
        return 0.0, {"reward_abs": float(r0), "div_probe": d, "ratio": float("nan")}
    beta = 0.1 * float(r0) / d
    info = {"reward_abs": float(r0), "div_probe": d, "ratio": beta * d / float(r0),
            "probe_reward": last["reward_mean"]}
    return beta, info


def train(model, ref_model, sched: NoiseSchedule, rm: RewardModel, cfg: TrainConfig, *,
          metrics_path=None, eval_fn: Callable | None = None,
          checkpoint_dir=None) -> tuple[object, RunMetrics]:
    """Repeat the chosen step for ``cfg.iterations`` iterations.

    ``eval_fn(model) -> float`` supplies the fidelity column every
    ``cfg.eval_every`` iterations and at the end.
    """
    metrics = RunMetrics(metrics_path)
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(model.parameters(), cfg)
    state = PGState(decay=cfg.baseline_decay)
    spec = cfg.divergence
    try:
        for it in range(cfg.iterations):
            t0 = time.perf_counter()
            if cfg.trainer == "rocm":
                m = rocm_step(model, ref_model, sched, rm, spec, cfg, rng, opt, it=it)
            else:
                m = pg_step(model, ref_model, sched, rm, spec, cfg, rng, opt, state, it=it)
            fidelity = float("nan")
            last = it + 1 == cfg.iterations
            if eval_fn is not None and (last or (cfg.eval_every and (it + 1) % cfg.eval_every == 0)):
                fidelity = float(eval_fn(model))
            m.update(
                iter=it + 1,
                fidelity=fidelity,
                param_dist=param_distance(model, ref_model),
                wall_ms=1e3 * (time.perf_counter() - t0),
            )
            metrics.append(m)
            if checkpoint_dir and cfg.checkpoint_every and ((it + 1) % cfg.checkpoint_every == 0):
                path = Path(checkpoint_dir) / f"step_{it + 1:06d}.ckpt"
                save_checkpoint(path, model)
    finally:
        metrics.close()
    return model, metrics
