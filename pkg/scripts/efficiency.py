"""First-order vs score-function fine-tuning on the linear-Gaussian oracle.

Counts iterations until the exact objective comes within ``--gap`` of its
optimum, for both trainers under matched seeds, and compares per-sample
gradient variances.

    python3 scripts/efficiency.py --seeds 10
"""
import argparse

import numpy as np

from rocmlab.diffusion import NoiseSchedule
from rocmlab.divergences import DivergenceSpec
from rocmlab.oracle import LinearPolicy, oracle_objective, oracle_optimum, per_sample_gradients, score_function_gain
from rocmlab.rewards import RewardModel
from rocmlab.trainers import PGState, TrainConfig, make_optimizer, pg_step, rocm_step


def iterations_to(trainer, seed, args, sched, gain, r, threshold):
    pol = LinearPolicy(np.zeros(2), K=sched.K, gain=gain)
    ref = pol.copy(frozen=True)
    rm = RewardModel("radial", target=list(r))
    cfg = TrainConfig(trainer=trainer, iterations=args.cap, batch_size=args.batch, lr=args.lr, seed=seed,
                      K=sched.K, divergence=DivergenceSpec("kl", args.beta))
    rng = np.random.default_rng(seed)
    opt = make_optimizer(pol.parameters(), cfg)
    state = PGState()
    for it in range(args.cap):
        step = rocm_step if trainer == "rocm" else pg_step
        kw = {} if trainer == "rocm" else {"state": state}
        step(pol, ref, sched, rm, cfg.divergence, cfg, rng, opt, it=it, **kw)
        if oracle_objective(pol.get_flat(), np.zeros(2), r, args.beta, sched, gain=gain) >= threshold:
            return it + 1
    return args.cap + 1


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--lr", type=float, default=5e-3)
    p.add_argument("--beta", type=float, default=0.01)
    p.add_argument("--gap", type=float, default=0.05)
    p.add_argument("--cap", type=int, default=2000)
    args = p.parse_args()

    sched = NoiseSchedule(8)
    gain = score_function_gain(sched)
    r = np.array([1.0, -0.5])
    star = oracle_optimum(np.zeros(2), r, args.beta, sched, gain=gain)
    threshold = oracle_objective(star, np.zeros(2), r, args.beta, sched, gain=gain) - args.gap
    for trainer in ("rocm", "pg"):
        its = [iterations_to(trainer, s, args, sched, gain, r, threshold) for s in range(args.seeds)]
        print(f"{trainer:5s} median {np.median(its):7.1f}  per seed {its}")
    pol = LinearPolicy([0.3, 0.2], K=8, gain=gain)
    rm = RewardModel("radial", target=list(r))
    for est in ("reparam", "reinforce"):
        g = per_sample_gradients(pol, sched, rm, 10_000, np.random.default_rng(0), est)
        print(f"{est:9s} per-coordinate variance {np.round(g.var(axis=0, ddof=1), 3)}")


if __name__ == "__main__":
    main()
