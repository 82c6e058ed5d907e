"""Consistency-model parameterization, K-step generation and distillation."""
from __future__ import annotations

import contextlib
import copy
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .diffusion import NULL, GaussianMixture, NoiseSchedule, pf_ode_solve
from .errors import NumericError
from .nn import MLP, Adam, sinusoidal_features
from .tensor import Tape, Tensor, as_tensor, concat, no_grad

__all__ = [
    "ModelConfig",
    "ConsistencyModel",
    "TrajectoryRecord",
    "consistency_apply",
    "generate",
    "DistillConfig",
    "distill",
    "save_checkpoint",
    "load_checkpoint",
    "as_conditions",
]

_MAGIC = b"ROCMCKPT"


@dataclass
class ModelConfig:
    dim: int = 2
    n_conditions: int = 2
    hidden: tuple = (128, 128, 128)
    n_freq: int = 8
    cond_dim: int = 16
    sigma_data: float = 0.5
    scale: float = 1.0
    omega_max: float = 4.0
    K: int = 8


def as_conditions(cond, batch: int) -> np.ndarray:
    if cond is None:
        return np.full(batch, NULL, dtype=int)
    return np.broadcast_to(np.asarray(cond, dtype=int), (batch,)).copy()


class ConsistencyModel:
    """f(x, w, c, t) = c_skip(t) x + c_out(t) F(x, w, c, t).

    The boundary scalings make f(x, ., ., 0) = x exactly for every
    parameter value.  The condition table has one extra row for the null
    condition (label -1).
    """

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0, zero_out: bool = False):
        self.cfg = cfg = cfg or ModelConfig()
        self.sched = NoiseSchedule(cfg.K)
        rng = np.random.default_rng(seed)
        self.freqs = np.pi * 2.0 ** (np.arange(cfg.n_freq) - 2)
        in_dim = cfg.dim + 4 * cfg.n_freq + cfg.cond_dim
        self.net = MLP([in_dim, *cfg.hidden, cfg.dim], rng, zero_last=zero_out)
        self.cond_table = Tensor(rng.standard_normal((cfg.n_conditions + 1, cfg.cond_dim)),
                                 requires_grad=True)

    @property
    def K(self) -> int:
        return self.cfg.K

    @property
    def n_conditions(self) -> int:
        return self.cfg.n_conditions

    def parameters(self) -> list[Tensor]:
        return self.net.parameters() + [self.cond_table]

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.data.reshape(-1) for p in self.parameters()])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=float)
        i = 0
        for p in self.parameters():
            n = p.size
            p.data = flat[i : i + n].reshape(p.shape).copy()
            i += n
        if i != flat.size:
            raise ValueError(f"expected {i} parameters, got {flat.size}")

    def copy(self, frozen: bool = False) -> "ConsistencyModel":
        out = copy.deepcopy(self)
        for p in out.parameters():
            p.grad = None
            p.requires_grad = not frozen
        return out

    def c_skip(self, t):
        s = np.asarray(self.sched.sigma(t)) * self.cfg.scale
        sd2 = self.cfg.sigma_data**2
        return sd2 / (s * s + sd2)

    def c_out(self, t):
        s = np.asarray(self.sched.sigma(t)) * self.cfg.scale
        sd = self.cfg.sigma_data
        return s * sd / np.sqrt(s * s + sd * sd)

    def features(self, x: Tensor, omega, cond, t) -> Tensor:
        b = x.shape[0]
        temb = np.broadcast_to(sinusoidal_features(t, self.freqs), (b, 2 * self.cfg.n_freq))
        w = np.asarray(omega, dtype=float) / self.cfg.omega_max
        wemb = np.broadcast_to(sinusoidal_features(w, self.freqs), (b, 2 * self.cfg.n_freq))
        labels = as_conditions(cond, b)
        onehot = np.zeros((b, self.cfg.n_conditions + 1))
        onehot[np.arange(b), np.where(labels == NULL, self.cfg.n_conditions, labels)] = 1.0
        cemb = Tensor(onehot) @ self.cond_table
        return concat([x, Tensor(np.concatenate([temb, wemb], axis=1)), cemb], axis=1)

    def __call__(self, x, omega=0.0, cond=None, t=0.0) -> Tensor:
        return consistency_apply(self, x, omega, cond, t)


def consistency_apply(model: ConsistencyModel, x, omega, cond, t) -> Tensor:
    x = as_tensor(x)
    t_arr = np.asarray(t, dtype=float)
    if np.any((t_arr < 0) | (t_arr > 1)):
        raise ValueError(f"t must lie in [0, 1], got {t}")
    F = model.net(model.features(x, omega, cond, t_arr))
    cs, co = model.c_skip(t_arr), model.c_out(t_arr)
    if t_arr.ndim:
        cs, co = cs[:, None], co[:, None]
    return x * cs + F * co


@dataclass
class TrajectoryRecord:
    """One batched run of K-step generation.

    ``x[k]`` is the state at t_k (k = 0..K), ``x_tilde[k]`` the model output
    at step k (index 0 unused) and ``noise[k]`` the draw eps_k, so that
    x[k-1] = alpha(t_{k-1}) x_tilde[k] + sigma(t_{k-1}) noise[k-1].
    """

    cond: np.ndarray
    omega: float
    seed: int | None
    times: np.ndarray
    x: list
    x_tilde: list
    noise: np.ndarray

    @property
    def K(self) -> int:
        return len(self.times) - 1

    @property
    def x0(self) -> Tensor:
        return self.x[0]


def generate(model, sched: NoiseSchedule, cond=None, omega=0.0, seed=None, *,
             batch: int | None = None, noise=None, grad_steps: int | None = None,
             dim: int | None = None) -> TrajectoryRecord:
    """K-step consistency sampling, keeping every intermediate.

    With fixed noise the whole record is a differentiable function of the
    model parameters.  ``grad_steps = m`` records only the last m steps
    (k <= m) on the tape; earlier steps run without gradient.
    """
    K = sched.K
    if getattr(model, "K", K) != K:
        raise ValueError(f"model built for K={model.K}, schedule has K={K}")
    if noise is None:
        if batch is None:
            batch = 1 if cond is None or np.ndim(cond) == 0 else len(cond)
        d = dim or model.cfg.dim
        noise = np.random.default_rng(seed).standard_normal((K + 1, batch, d))
    noise = np.asarray(noise, dtype=float)
    batch = noise.shape[1]
    labels = as_conditions(cond, batch)
    times = sched.times
    xs: list = [None] * (K + 1)
    xt: list = [None] * (K + 1)
    xs[K] = Tensor(noise[K])
    for k in range(K, 0, -1):
        track = grad_steps is None or k <= grad_steps
        ctx = contextlib.nullcontext() if track else no_grad()
        with ctx:
            xt[k] = model(xs[k], omega, labels, times[k])
            xs[k - 1] = xt[k] * sched.alpha(times[k - 1]) + noise[k - 1] * sched.sigma(times[k - 1])
    return TrajectoryRecord(labels, omega, seed, times, xs, xt, noise)


@dataclass
class DistillConfig:
    iterations: int = 4000
    batch_size: int = 256
    lr: float = 3e-4
    ema_decay: float = 0.999
    teacher_substeps: int = 64
    omega_max: float = 4.0
    cond_dropout: float = 0.1
    seed: int = 0
    log_every: int = 50


def distill(model: ConsistencyModel, gm: GaussianMixture, sched: NoiseSchedule,
            cfg: DistillConfig) -> tuple[ConsistencyModel, list[tuple[int, float]]]:
    """Consistency distillation against the analytic PF-ODE teacher.

    For adjacent grid times t_{k-1} < t_k the online model at (x_{t_k}, t_k)
    is regressed onto the EMA model at the teacher's one-step ODE solution
    (x_{t_{k-1}}, t_{k-1}).  Returns the online model and (iteration, loss)
    pairs every ``log_every`` iterations.
    """
    rng = np.random.default_rng(cfg.seed)
    target = model.copy(frozen=True)
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr)
    times = sched.times
    losses: list[tuple[int, float]] = []
    running = 0.0
    for it in range(cfg.iterations):
        x0, labels = gm.sample(cfg.batch_size, rng, return_labels=True)
        cond = np.where(rng.random(cfg.batch_size) < cfg.cond_dropout, NULL, labels)
        omega = rng.uniform(0.0, cfg.omega_max, cfg.batch_size)
        k = rng.integers(1, sched.K + 1, cfg.batch_size)
        t, t_prev = times[k], times[k - 1]
        z = rng.standard_normal(x0.shape)
        x_t = sched.alpha(t)[:, None] * x0 + sched.sigma(t)[:, None] * z
        x_prev = pf_ode_solve(gm, sched, x_t, t, t_prev, cfg.teacher_substeps, cond, omega)
        with no_grad():
            goal = target(Tensor(x_prev), omega, cond, t_prev).data
        with Tape() as tape:
            out = model(Tensor(x_t), omega, cond, t)
            diff = out - goal
            loss = (diff * diff).sum(axis=1).mean()
            if not np.isfinite(loss.data):
                raise NumericError(f"distillation loss is non-finite at iteration {it}")
            opt.zero_grad()
            tape.backward(loss)
        opt.step()
        for p_t, p in zip(target.parameters(), params):
            p_t.data = cfg.ema_decay * p_t.data + (1.0 - cfg.ema_decay) * p.data
        running += float(loss.data)
        if (it + 1) % cfg.log_every == 0 or it + 1 == cfg.iterations:
            n = (it % cfg.log_every) + 1
            losses.append((it + 1, running / n))
            running = 0.0
    return model, losses


def save_checkpoint(path, model: ConsistencyModel, extra: dict | None = None) -> None:
    """Magic, u64 header length, JSON header, then little-endian f8 parameters."""
    cfg = asdict(model.cfg)
    cfg["hidden"] = list(cfg["hidden"])
    header = {
        "format": 1,
        "architecture": cfg,
        "schedule": {"kind": "cosine-vp", "K": model.K},
        "K": model.K,
        "sigma_data": model.cfg.sigma_data,
        "shapes": [list(p.shape) for p in model.parameters()],
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode()
    payload = model.get_flat().astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path) -> tuple[ConsistencyModel, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + n])
    arch = dict(header["architecture"])
    arch["hidden"] = tuple(arch["hidden"])
    model = ConsistencyModel(ModelConfig(**arch))
    shapes = [tuple(p.shape) for p in model.parameters()]
    if shapes != [tuple(s) for s in header["shapes"]]:
        raise ValueError("checkpoint parameter shapes do not match architecture")
    model.set_flat(np.frombuffer(raw[16 + n :], dtype="<f8"))
    return model, header
