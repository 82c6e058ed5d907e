"""f-divergences between equal-covariance Gaussians, plus quadrature oracles.

Closed forms operate on :class:`~rocmlab.tensor.Tensor` means so they can sit
inside a training graph; the quadrature oracles are plain numpy and exist to
check the closed forms independently.
"""
from __future__ import annotations

import contextlib
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError
from .tensor import DomainError, Tensor, as_tensor, clip

__all__ = [
    "KINDS",
    "DivergenceSpec",
    "GaussianPair",
    "kl_closed",
    "reverse_kl_closed",
    "hellinger_closed",
    "fisher_closed",
    "js_mc",
    "GENERATORS",
    "divergence_oracle_quadrature",
    "fisher_oracle_quadrature",
    "trajectory_divergence",
    "inject_fault",
]

KINDS = ("kl", "reverse-kl", "hellinger", "fisher", "js", "none")
LOG_RATIO_CLAMP = 50.0
_faults: set[str] = set()


@contextlib.contextmanager
def inject_fault(name: str):
    """Test hook: ``"hellinger-sign"`` restores the +exp typo in Hellinger."""
    _faults.add(name)
    try:
        yield
    finally:
        _faults.discard(name)


@dataclass
class DivergenceSpec:
    kind: str = "kl"
    beta: float = 0.0
    mc_samples: int = 1

    def __post_init__(self):
        self.kind = str(self.kind).lower()
        if self.kind not in KINDS:
            raise ConfigError(f"unknown divergence kind {self.kind!r}; choose from {KINDS}")
        if not self.beta >= 0:
            raise ConfigError(f"beta must be non-negative, got {self.beta}")
        if self.mc_samples < 1:
            raise ConfigError("mc_samples must be >= 1")

    @property
    def active(self) -> bool:
        return self.kind != "none" and self.beta > 0

    @classmethod
    def from_config(cls, doc: dict) -> "DivergenceSpec":
        unknown = set(doc) - {"kind", "beta", "mc_samples"}
        if unknown:
            raise ConfigError(f"unknown divergence fields {sorted(unknown)}")
        return cls(**doc)

    def to_config(self) -> dict:
        return asdict(self)


@dataclass
class GaussianPair:
    """N(mu1, sigma^2 I) and N(mu2, sigma^2 I); means may carry batch axes."""

    mu1: Tensor
    mu2: Tensor
    sigma: float

    def __post_init__(self):
        self.mu1, self.mu2 = as_tensor(self.mu1), as_tensor(self.mu2)
        if self.mu1.shape[-1:] != self.mu2.shape[-1:]:
            raise ValueError(f"mean dimensions differ: {self.mu1.shape} vs {self.mu2.shape}")

    def _check(self):
        if not self.sigma > 0:
            raise DomainError(f"sigma must be positive, got {self.sigma}")


def _sqdist(pair: GaussianPair) -> Tensor:
    d = pair.mu1 - pair.mu2
    return (d * d).sum(axis=-1)


def kl_closed(pair: GaussianPair) -> Tensor:
    pair._check()
    return _sqdist(pair) / (2.0 * pair.sigma**2)


def reverse_kl_closed(pair: GaussianPair) -> Tensor:
    # equal covariances make this identical to kl_closed
    return kl_closed(GaussianPair(pair.mu2, pair.mu1, pair.sigma))


def hellinger_closed(pair: GaussianPair) -> Tensor:
    """Squared Hellinger distance 1 - exp(-|dmu|^2 / (8 sigma^2)), in [0, 1)."""
    pair._check()
    sign = 1.0 if "hellinger-sign" in _faults else -1.0
    return 1.0 - (sign * _sqdist(pair) / (8.0 * pair.sigma**2)).exp()


def fisher_closed(pair: GaussianPair) -> Tensor:
    pair._check()
    return _sqdist(pair) / pair.sigma**4


def _js_of_log_ratio(l: Tensor) -> Tensor:
    # f(x) = 1/2 (x log(2x/(x+1)) + log(2/(x+1))) with x = exp(l)
    l = clip(l, -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP)
    x = l.exp()
    log1px = (x + 1.0).log()
    log2 = float(np.log(2.0))
    return 0.5 * (x * (l + log2 - log1px) + (log2 - log1px))


def js_mc(pair: GaussianPair, samples) -> Tensor:
    """Monte-Carlo Jensen-Shannon estimate from samples of p1.

    Averages f(p2(x)/p1(x)) over the leading sample axis.  ``samples`` should
    be reparameterized as mu1 + sigma z so gradients reach mu1.
    """
    pair._check()
    x = as_tensor(samples)
    d1 = x - pair.mu1
    d2 = x - pair.mu2
    log_ratio = ((d1 * d1).sum(axis=-1) - (d2 * d2).sum(axis=-1)) / (2.0 * pair.sigma**2)
    return _js_of_log_ratio(log_ratio).mean(axis=0)


def _f_kl(x):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(x > 0, x * np.log(np.where(x > 0, x, 1.0)), 0.0)


def _f_hellinger(x):
    return 0.5 * (np.sqrt(x) - 1.0) ** 2


def _f_js(x):
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(x > 0, x * np.log(np.where(x > 0, 2 * x / (x + 1), 1.0)), 0.0)
    return 0.5 * (a + np.log(2.0 / (x + 1.0)))


GENERATORS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "kl": _f_kl,
    "hellinger": _f_hellinger,
    "js": _f_js,
    "zero": lambda x: np.zeros_like(x),
}


# conjugate generators u f(1/u) as functions of log u, used where p1 >> p2 so
# the ratio never overflows
_CONJUGATES: dict[Callable, Callable[[np.ndarray], np.ndarray]] = {
    _f_kl: lambda log_u: -log_u,
    _f_hellinger: lambda log_u: _f_hellinger(np.exp(log_u)),
    _f_js: lambda log_u: _f_js(np.exp(log_u)),
}


def _normal_pdf(x, mu, sigma):
    return np.exp(-0.5 * ((x - mu) / sigma) ** 2) / (sigma * np.sqrt(2 * np.pi))


def _adaptive_trapezoid(fn, lo: float, hi: float, tol: float, max_level: int = 20) -> float:
    n = 64
    xs = np.linspace(lo, hi, n + 1)
    ys = fn(xs)
    h = (hi - lo) / n
    est = h * (ys.sum() - 0.5 * (ys[0] + ys[-1]))
    for _ in range(max_level):
        mids = lo + h * (np.arange(n) + 0.5)
        new = 0.5 * est + 0.5 * h * fn(mids).sum()
        n *= 2
        h *= 0.5
        if abs(new - est) < tol and n >= 512:
            return float(new)
        est = new
    raise ArithmeticError(f"trapezoid quadrature did not reach tolerance {tol}")


def _scalar_pair(pair: GaussianPair):
    mu1 = np.asarray(pair.mu1.data, dtype=float).reshape(-1)
    mu2 = np.asarray(pair.mu2.data, dtype=float).reshape(-1)
    if mu1.size != 1 or mu2.size != 1:
        raise ValueError("quadrature oracle is one-dimensional")
    pair._check()
    return float(mu1[0]), float(mu2[0]), float(pair.sigma)


def divergence_oracle_quadrature(pair: GaussianPair, f: Callable | str, tol: float = 1e-8) -> float:
    """Integral of p2(x) f(p1(x)/p2(x)) over +-12 sigma around both means."""
    if isinstance(f, str):
        f = GENERATORS[f]
    m1, m2, s = _scalar_pair(pair)
    lo, hi = min(m1, m2) - 12 * s, max(m1, m2) + 12 * s

    conj = _CONJUGATES.get(f)

    def integrand(x):
        log_ratio = ((x - m2) ** 2 - (x - m1) ** 2) / (2 * s * s)
        if conj is None:
            return _normal_pdf(x, m2, s) * f(np.exp(log_ratio))
        out = np.empty_like(x)
        lo_side = log_ratio <= 0
        out[lo_side] = _normal_pdf(x[lo_side], m2, s) * f(np.exp(log_ratio[lo_side]))
        hi_side = ~lo_side
        out[hi_side] = _normal_pdf(x[hi_side], m1, s) * conj(-log_ratio[hi_side])
        return out

    return _adaptive_trapezoid(integrand, lo, hi, tol)


def fisher_oracle_quadrature(pair: GaussianPair, tol: float = 1e-8) -> float:
    """Integral of p2(x) (d/dx log p1 - d/dx log p2)^2, with scores by finite differences."""
    m1, m2, s = _scalar_pair(pair)
    lo, hi = min(m1, m2) - 12 * s, max(m1, m2) + 12 * s
    h = 1e-4 * s

    def dlog(x, m):
        return (np.log(_normal_pdf(x + h, m, s)) - np.log(_normal_pdf(x - h, m, s))) / (2 * h)

    def integrand(x):
        return _normal_pdf(x, m2, s) * (dlog(x, m1) - dlog(x, m2)) ** 2

    return _adaptive_trapezoid(integrand, lo, hi, tol)


_CLOSED = {
    "kl": kl_closed,
    "reverse-kl": reverse_kl_closed,
    "hellinger": hellinger_closed,
    "fisher": fisher_closed,
}


def trajectory_divergence(spec: DivergenceSpec, traj, model, ref_model, sched,
                          stop_grad: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Per-trajectory sum over k = 2..K of D(p_k(.|theta) || p_k(.|theta_ref)).

    p_k is N(alpha(t_{k-1}) f(x_k, t_k), sigma(t_{k-1})^2 I).  Returns shape
    (B,).  Gradients flow through both f_theta and the states x_k unless
    ``stop_grad`` is set.
    """
    batch = traj.noise.shape[1]
    total = Tensor(np.zeros(batch))
    if spec.kind == "none" or traj.K < 2:
        return total
    times = traj.times
    for k in range(2, traj.K + 1):
        a = sched.alpha(times[k - 1])
        s = sched.sigma(times[k - 1])
        if s <= 0:
            raise ValueError(f"sigma(t_{k - 1}) = 0 inside the divergence sum")
        x_k = traj.x[k].detach() if stop_grad else traj.x[k]
        mu1 = (model(x_k, traj.omega, traj.cond, times[k]) if stop_grad else traj.x_tilde[k]) * a
        mu2 = ref_model(x_k, traj.omega, traj.cond, times[k]) * a
        pair = GaussianPair(mu1, mu2, s)
        if spec.kind == "js":
            if spec.mc_samples == 1:
                samples = mu1 + traj.noise[k - 1] * s
                samples = samples.reshape((1, *samples.shape))
            else:
                rng = rng or np.random.default_rng(traj.seed)
                z = rng.standard_normal((spec.mc_samples, *mu1.shape))
                samples = mu1.reshape((1, *mu1.shape)) + z * s
            term = js_mc(pair, samples)
        else:
            term = _CLOSED[spec.kind](pair)
        total = total + term
    return total
