"""Reward-hacking sweep: fine-tune against a hackable reward over a beta grid.

Prints the seed-median reward and fidelity per beta and writes them to CSV.
Needs a base checkpoint, e.g. from scripts/pretrain_gmm.py.

    python3 scripts/beta_sweep.py runs/pretrain/model.ckpt --out runs/sweep.csv
"""
import argparse
import csv

import numpy as np

from rocmlab.consistency import load_checkpoint
from rocmlab.diffusion import NoiseSchedule, preset
from rocmlab.divergences import DivergenceSpec
from rocmlab.evaluation import evaluate, make_eval_set
from rocmlab.rewards import RewardModel
from rocmlab.trainers import TrainConfig, param_distance, train


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("checkpoint")
    p.add_argument("--preset", default="gmm2")
    p.add_argument("--betas", default="0.01,0.03,0.1,0.3,1")
    p.add_argument("--div", default="kl")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--iterations", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--bonus", type=float, default=0.05)
    p.add_argument("--out", default="sweep.csv")
    args = p.parse_args()

    base, _ = load_checkpoint(args.checkpoint)
    ref = base.copy(frozen=True)
    sched = NoiseSchedule(base.K)
    gm = preset(args.preset)
    rm = RewardModel("hackable", bonus=args.bonus)
    ev = make_eval_set(gm, sched, rm, n_conditions=base.n_conditions)

    rows = []
    for beta in (float(b) for b in args.betas.split(",")):
        vals = []
        for seed in range(args.seeds):
            m = base.copy()
            cfg = TrainConfig(iterations=args.iterations, lr=args.lr, seed=seed, K=base.K,
                              divergence=DivergenceSpec(args.div, beta))
            train(m, ref, sched, rm, cfg)
            e = evaluate(m, ref, sched, rm, ev, cfg.divergence)
            vals.append([e["reward"], e["fidelity"], e["divergence"], param_distance(m, ref)])
        med = np.median(np.array(vals), axis=0)
        rows.append([beta, *med])
        print(f"beta {beta:<6g} reward {med[0]:8.4f}  sliced-W2 {med[1]:7.4f}  "
              f"divergence {med[2]:9.4f}  |dtheta| {med[3]:.4f}", flush=True)

    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["beta", "reward", "fidelity", "divergence", "param_dist"])
        w.writerows(rows)


if __name__ == "__main__":
    main()
