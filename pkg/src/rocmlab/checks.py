"""Self-check suite: oracle optima and gradients, trainer convergence, divergence quadrature."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .diffusion import NoiseSchedule
from .divergences import (
    DivergenceSpec,
    GaussianPair,
    divergence_oracle_quadrature,
    fisher_closed,
    fisher_oracle_quadrature,
    hellinger_closed,
    js_mc,
    kl_closed,
)
from .oracle import (
    LinearPolicy,
    grid_search_optimum,
    oracle_grad,
    oracle_objective,
    oracle_optimum,
    per_sample_gradients,
    score_function_gain,
)
from .rewards import RewardModel
from .trainers import TrainConfig, train

__all__ = ["Check", "run_checks"]


@dataclass
class Check:
    name: str
    measured: float
    expected: float
    tolerance: float
    passed: bool

    def to_dict(self) -> dict:
        return asdict(self)


def _check(name, measured, expected, tol) -> Check:
    measured, expected, tol = float(measured), float(expected), float(tol)
    return Check(name, measured, expected, tol, bool(abs(measured - expected) <= tol))


def _fd_grad(fn, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fn(x + e) - fn(x - e)) / (2 * h)
    return g


def oracle_checks(K: int = 8, seed: int = 0, quick: bool = False) -> list[Check]:
    sched = NoiseSchedule(K)
    rng = np.random.default_rng(seed)
    ref = np.zeros(2)
    r = np.array([1.0, -0.5])
    rm = RewardModel("radial", target=list(r))
    out: list[Check] = []
    for kind in ("kl", "fisher", "hellinger"):
        for beta in (0.0, 0.01, 0.1):
            ts = oracle_optimum(ref, r, beta, sched, kind)
            tag = f"{kind}[beta={beta}]"
            out.append(_check(f"grad-zero-at-optimum/{tag}",
                              np.abs(oracle_grad(ts, ref, r, beta, sched, kind)).max(), 0.0,
                              1e-12 if kind != "hellinger" else 1e-9))
            theta = rng.normal(size=2)
            fd = _fd_grad(lambda th: oracle_objective(th, ref, r, beta, sched, kind), theta)
            an = oracle_grad(theta, ref, r, beta, sched, kind)
            out.append(_check(f"grad-vs-finite-diff/{tag}",
                              np.abs(an - fd).max() / max(1.0, np.abs(fd).max()), 0.0, 1e-8))
            gs = grid_search_optimum(ts + rng.uniform(-0.2, 0.2, 2), ref, r, beta, sched, kind)
            out.append(_check(f"grid-search-optimum/{tag}", np.abs(gs - ts).max(), 0.0, 1e-3))
            pol = LinearPolicy(ref.copy(), K)
            cfg = TrainConfig(iterations=300 if quick else 1000, batch_size=4, lr=0.01,
                              divergence=DivergenceSpec(kind, beta), seed=seed, K=K)
            with np.errstate(over="ignore", invalid="ignore"):  # a broken divergence may diverge
                train(pol, pol.copy(frozen=True), sched, rm, cfg)
            gate = 2e-2 if kind == "hellinger" else 1e-2
            out.append(_check(f"rocm-converges/{tag}", np.linalg.norm(pol.theta.data - ts), 0.0, gate))
    g = score_function_gain(sched)
    pol = LinearPolicy([0.3, 0.2], K, gain=g)
    exact = oracle_grad(pol.theta.data, ref, r, 0.0, sched, gain=g)
    n = 2000 if quick else 10_000
    for est in ("reparam", "reinforce"):
        G = per_sample_gradients(pol, sched, rm, n, rng, est)
        z = np.abs(G.mean(0) - exact) / (G.std(0, ddof=1) / np.sqrt(n))
        out.append(_check(f"gradient-unbiased/{est}[z-score]", z.max(), 0.0, 3.0))
    return out


def quadrature_checks(n_pairs: int = 10, seed: int = 0, js_samples: int = 100_000) -> list[Check]:
    rng = np.random.default_rng(seed)
    out: list[Check] = []
    for i in range(n_pairs):
        m1, m2 = rng.uniform(-2, 2, 2)
        s = rng.uniform(0.3, 2.0)
        pair = GaussianPair(np.array([m1]), np.array([m2]), s)
        for name, closed, quad in (
            ("kl", kl_closed, lambda p: divergence_oracle_quadrature(p, "kl")),
            ("hellinger", hellinger_closed, lambda p: divergence_oracle_quadrature(p, "hellinger")),
            ("fisher", fisher_closed, fisher_oracle_quadrature),
        ):
            q = quad(pair)
            out.append(_check(f"quadrature/{name}[pair {i}]", float(closed(pair).data), q, 1e-6))
    m1, m2, s = 0.4, -0.3, 0.8
    pair = GaussianPair(np.array([m1]), np.array([m2]), s)
    x = m1 + s * rng.standard_normal((js_samples, 1))
    per = js_mc(pair, x[None]).data  # leading axis of size 1 keeps per-sample terms
    est = float(per.mean())
    se = per.std(ddof=1) / np.sqrt(js_samples)
    q = divergence_oracle_quadrature(pair, "js")
    out.append(_check("quadrature/js-monte-carlo", est, q, 3 * se))
    return out


def run_checks(quick: bool = False, seed: int = 0) -> list[Check]:
    return oracle_checks(seed=seed, quick=quick) + quadrature_checks(3 if quick else 10, seed)
