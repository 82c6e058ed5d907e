"""Noise schedule, analytic Gaussian-mixture data and the probability-flow ODE teacher.

The teacher never needs a learned score: for a diagonal Gaussian mixture the
noised marginal, its score, and the posterior means E[x0 | x_t] and
E[eps | x_t] are all available in closed form.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .tensor import ShapeError, Tensor, as_tensor

__all__ = [
    "NoiseSchedule",
    "GaussianMixture",
    "forward_marginal",
    "score",
    "log_density",
    "posterior_means",
    "pf_ode_drift",
    "pf_ode_solve",
    "teacher_sample",
    "guided_noise",
    "preset",
    "PRESETS",
]

NULL = -1  # condition label meaning "unconditional"


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance-preserving cosine schedule, alpha = cos(pi t / 2), sigma = sin(pi t / 2).

    ``times`` holds t_0 = 0 < t_1 < ... < t_K = 1 uniformly; generation
    denoises at t_K ... t_1 and the last renoising lands on t_0 where
    alpha = 1, sigma = 0.
    """

    K: int = 8

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.K + 1) / self.K

    def t(self, k: int) -> float:
        return k / self.K

    @staticmethod
    def _check(t):
        t = np.asarray(t, dtype=float)
        if np.any((t < 0) | (t > 1)):
            raise ValueError(f"t must lie in [0, 1], got {t}")
        return t

    def alpha(self, t):
        t = self._check(t)
        a = np.cos(0.5 * np.pi * t)
        return np.where(t == 1.0, 0.0, a) if a.ndim else (0.0 if t == 1.0 else float(a))

    def sigma(self, t):
        t = self._check(t)
        s = np.sin(0.5 * np.pi * t)
        return np.where(t == 1.0, 1.0, s) if s.ndim else (1.0 if t == 1.0 else float(s))

    def dalpha(self, t):
        return -0.5 * np.pi * np.sin(0.5 * np.pi * self._check(t))

    def dsigma(self, t):
        return 0.5 * np.pi * np.cos(0.5 * np.pi * self._check(t))

    def f(self, t):
        """Drift coefficient d log alpha / dt of the forward SDE."""
        return self.dalpha(t) / self.alpha(t)

    def g2(self, t):
        """Squared diffusion coefficient d sigma^2/dt - 2 f sigma^2."""
        s = self.sigma(t)
        return 2.0 * s * self.dsigma(t) - 2.0 * self.f(t) * s * s


@dataclass
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray  # diagonal entries, shape (M, d)
    _log_w: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.covariances = np.atleast_2d(np.asarray(self.covariances, dtype=float))
        m = self.weights.size
        if self.means.shape[0] != m or self.covariances.shape != self.means.shape:
            raise ShapeError(
                f"inconsistent mixture shapes: weights {self.weights.shape}, "
                f"means {self.means.shape}, covariances {self.covariances.shape}"
            )
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be a probability vector")
        if np.any(self.covariances <= 0):
            raise ValueError("covariance entries must be positive")
        with np.errstate(divide="ignore"):
            self._log_w = np.log(self.weights)

    @property
    def n_components(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def component(self, m: int) -> "GaussianMixture":
        return GaussianMixture([1.0], self.means[m : m + 1], self.covariances[m : m + 1])

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        mu = self.mean()
        second = np.einsum("m,mi,mj->ij", self.weights, self.means, self.means)
        second += np.diag(self.weights @ self.covariances)
        return second - np.outer(mu, mu)

    def sample(self, n: int, rng: np.random.Generator, return_labels: bool = False):
        labels = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        x = self.means[labels] + np.sqrt(self.covariances[labels]) * z
        return (x, labels) if return_labels else x

    def to_json(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
        }

    @classmethod
    def from_json(cls, doc) -> "GaussianMixture":
        if isinstance(doc, (str, Path)):
            doc = json.loads(Path(doc).read_text())
        return cls(doc["weights"], doc["means"], doc["covariances"])


def forward_marginal(gm: GaussianMixture, sched: NoiseSchedule, t: float) -> GaussianMixture:
    """Exact law of x_t = alpha_t x_0 + sigma_t z for x_0 ~ gm."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    a, s = sched.alpha(t), sched.sigma(t)
    return GaussianMixture(gm.weights, a * gm.means, a * a * gm.covariances + s * s)


def _component_logpdf(gm: GaussianMixture, x: np.ndarray) -> np.ndarray:
    # (N, M) log N(x; mu_m, diag(v_m))
    diff = x[:, None, :] - gm.means[None]
    v = gm.covariances[None]
    return -0.5 * np.sum(diff * diff / v + np.log(2 * np.pi * v), axis=-1)


def log_density(gm: GaussianMixture, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return logsumexp(_component_logpdf(gm, x) + gm._log_w, axis=1)


def score(gm_t: GaussianMixture, x, t: float | None = None) -> np.ndarray:
    """grad_x log q_t(x) for the already-noised mixture ``gm_t``.

    ``t`` is accepted for call-site symmetry; the mixture carries all state.
    """
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    x = np.atleast_2d(x)
    logp = _component_logpdf(gm_t, x) + gm_t._log_w
    resp = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
    comp = (gm_t.means[None] - x[:, None, :]) / gm_t.covariances[None]
    out = np.einsum("nm,nmd->nd", resp, comp)
    return out[0] if squeeze else out


def _ab(sched: NoiseSchedule, t: np.ndarray):
    # unchecked alpha, sigma, alpha', sigma' for the inner ODE loop
    ang = 0.5 * np.pi * t
    a, s = np.cos(ang), np.sin(ang)
    a = np.where(t == 1.0, 0.0, a)
    s = np.where(t == 1.0, 1.0, s)
    return a, s, -0.5 * np.pi * s, 0.5 * np.pi * a


def posterior_means(gm: GaussianMixture, sched: NoiseSchedule, x: np.ndarray, t):
    """Per-component E[x0 | x_t], E[eps | x_t] and log joint weights.

    Returns arrays shaped (N, M, d), (N, M, d), (N, M).  ``t`` may be scalar
    or per-row.  Stays finite at both t = 0 and t = 1.
    """
    x = np.atleast_2d(x)
    t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
    a, s, _, _ = _ab(sched, t)
    return _posterior(gm, x, a[:, None, None], s[:, None, None])


def _posterior(gm, x, a, s):
    mu, cov = gm.means[None], gm.covariances[None]
    var = a * a * cov + s * s  # (N, M, d)
    resid = x[:, None, :] - a * mu
    scaled = resid / var
    x0 = mu + a * cov * scaled
    eps = s * scaled
    logw = gm._log_w[None] - 0.5 * np.sum(resid * scaled + np.log(2 * np.pi * var), axis=-1)
    return x0, eps, logw


def _mix(x0, eps, logw):
    w = np.exp(logw - logw.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    w = w[:, :, None]
    return (w * x0).sum(axis=1), (w * eps).sum(axis=1)


def pf_ode_drift(gm: GaussianMixture, sched: NoiseSchedule, x, t, cond=None, omega=0.0):
    """dx/dt of the (guided) probability-flow ODE.

    Written as alpha'(t) x0_hat + sigma'(t) eps_hat, which equals
    f(t) x + g^2(t) / (2 sigma_t) eps_hat but has no singularity at the ends.
    ``cond`` holds component labels per row (NULL for unconditional).
    """
    x = np.atleast_2d(x)
    n = x.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=float), (n,))
    a, s, da, ds = _ab(sched, t)
    x0s, epss, logw = _posterior(gm, x, a[:, None, None], s[:, None, None])
    x0_g, eps_g = _mix(x0s, epss, logw)
    if cond is not None:
        cond = np.broadcast_to(np.asarray(cond), (n,))
        rows = np.arange(n)
        idx = np.where(cond == NULL, 0, cond)
        is_null = (cond == NULL)[:, None]
        x0_c = np.where(is_null, x0_g, x0s[rows, idx])
        eps_c = np.where(is_null, eps_g, epss[rows, idx])
        w = np.broadcast_to(np.asarray(omega, dtype=float), (n,))[:, None]
        x0_g = (1.0 + w) * x0_c - w * x0_g
        eps_g = (1.0 + w) * eps_c - w * eps_g
    return da[:, None] * x0_g + ds[:, None] * eps_g


def pf_ode_solve(gm, sched, x_start, t_start, t_end, n_substeps: int = 64, cond=None, omega=0.0):
    """Heun integration of the probability-flow ODE from ``t_start`` down to ``t_end``.

    Both times may be per-row arrays.
    """
    if n_substeps < 1:
        raise ValueError("n_substeps must be >= 1")
    x = np.array(x_start, dtype=float)
    squeeze = x.ndim == 1
    x = np.atleast_2d(x)
    ts = np.broadcast_to(np.asarray(t_start, dtype=float), (x.shape[0],))
    te = np.broadcast_to(np.asarray(t_end, dtype=float), (x.shape[0],))
    if np.any(te > ts) or np.any(ts > 1) or np.any(te < 0):
        raise ValueError("need 0 <= t_end <= t_start <= 1")
    h = (te - ts) / n_substeps
    t = ts.copy()
    for i in range(n_substeps):
        t_next = ts + (i + 1) * h if i + 1 < n_substeps else te
        d1 = pf_ode_drift(gm, sched, x, t, cond, omega)
        x_pred = x + h[:, None] * d1
        d2 = pf_ode_drift(gm, sched, x_pred, t_next, cond, omega)
        x = x + 0.5 * h[:, None] * (d1 + d2)
        t = t_next
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("probability-flow ODE produced non-finite values")
    return x[0] if squeeze else x


def teacher_sample(gm, sched, n: int, rng: np.random.Generator, cond=None, omega=0.0,
                   n_substeps: int = 64) -> np.ndarray:
    """Samples from the teacher: integrate N(0, I) draws from t = 1 to t = 0."""
    x1 = rng.standard_normal((n, gm.dim))
    return pf_ode_solve(gm, sched, x1, 1.0, 0.0, n_substeps, cond, omega)


def guided_noise(eps_cond, eps_uncond, omega) -> Tensor:
    """Classifier-free guidance blend (1 + w) eps_cond - w eps_uncond."""
    eps_cond, eps_uncond = as_tensor(eps_cond), as_tensor(eps_uncond)
    if eps_cond.shape != eps_uncond.shape:
        raise ShapeError(f"guidance inputs differ in shape: {eps_cond.shape} vs {eps_uncond.shape}")
    return (1.0 + omega) * eps_cond - omega * eps_uncond


def _ring(n: int, radius: float, std: float) -> GaussianMixture:
    ang = 2 * np.pi * np.arange(n) / n
    means = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return GaussianMixture(np.full(n, 1.0 / n), means, np.full((n, 2), std**2))


def _two_moons(per_moon: int = 6, std: float = 0.12) -> GaussianMixture:
    ang = np.linspace(0.0, np.pi, per_moon)
    upper = np.stack([np.cos(ang), np.sin(ang)], axis=1) - [0.5, 0.25]
    lower = np.stack([1.0 - np.cos(ang), 0.5 - np.sin(ang)], axis=1) - [0.5, 0.25]
    means = np.concatenate([upper, lower])
    n = len(means)
    return GaussianMixture(np.full(n, 1.0 / n), means, np.full((n, 2), std**2))


PRESETS = {
    "gmm2": lambda: GaussianMixture([0.5, 0.5], [[-1.0, 0.0], [1.0, 0.0]], [[0.09, 0.09]] * 2),
    "gmm8-ring": lambda: _ring(8, 1.5, 0.15),
    "two-moons-gmm": _two_moons,
}


def preset(name: str) -> GaussianMixture:
    try:
        return PRESETS[name]()
    except KeyError:
        raise KeyError(f"unknown data preset {name!r}; choose from {sorted(PRESETS)}") from None
