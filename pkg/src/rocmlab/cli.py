"""Command-line front end.

    rocmlab pretrain     distill a K-step consistency model from a mixture preset
    rocmlab finetune     reward fine-tuning from a base checkpoint
    rocmlab sweep        finetune over a beta grid, with summary and plot data
    rocmlab eval         reward / divergence / fidelity of a checkpoint
    rocmlab oracle-check self-checks against exact answers

Configuration is one JSON document; flags override its fields and the fully
resolved config is written to the output directory.  Exit codes: 0 ok,
1 check failure, 2 config error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checks import run_checks
from .consistency import (
    ConsistencyModel,
    DistillConfig,
    ModelConfig,
    distill,
    generate,
    load_checkpoint,
    save_checkpoint,
)
from .diffusion import GaussianMixture, NoiseSchedule, preset, teacher_sample
from .divergences import KINDS, inject_fault
from .errors import ConfigError, NumericError
from .evaluation import evaluate, fidelity, make_eval_set
from .metrics import sliced_w2
from .rewards import RewardModel
from .tensor import no_grad
from .trainers import TrainConfig, param_distance, resolve_beta_auto, train

log = logging.getLogger("rocmlab")

COMMANDS = ("pretrain", "finetune", "sweep", "eval", "oracle-check")
W2_GATE = 0.15
FAULTS = ("hellinger-sign",)


@dataclass
class RunConfig:
    command: str = "finetune"
    data: str = "gmm2"
    K: int = 8
    seed: int = 0
    out: str = ""
    model: ModelConfig = field(default_factory=ModelConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    reward: RewardModel = field(default_factory=lambda: RewardModel("halfplane"))
    beta_auto: bool = False
    betas: list = field(default_factory=lambda: [0.01, 0.03, 0.1, 0.3, 1.0])
    checkpoint: str | None = None
    eval_samples: int = 2048
    fidelity_region: str = "auto"

    def to_dict(self) -> dict:
        out = asdict(self)
        out["model"]["hidden"] = list(self.model.hidden)
        out["train"] = self.train.to_config()
        return out


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = dict(base)
    for key, value in over.items():
        if key not in base:
            raise ConfigError(f"unknown config field {where}{key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def build_config(doc: dict) -> RunConfig:
    """Merge ``doc`` over the defaults, sync shared fields, validate."""
    merged = _merge(RunConfig().to_dict(), doc)
    K, seed = int(merged["K"]), int(merged["seed"])
    merged["model"]["K"] = merged["train"]["K"] = K
    merged["distill"]["seed"] = merged["train"]["seed"] = seed
    merged["distill"]["omega_max"] = merged["model"]["omega_max"]
    try:
        model = ModelConfig(**{**merged["model"], "hidden": tuple(merged["model"]["hidden"])})
        cfg = RunConfig(
            command=merged["command"],
            data=merged["data"],
            K=K,
            seed=seed,
            out=merged["out"] or f"runs/{merged['command']}",
            model=model,
            distill=DistillConfig(**merged["distill"]),
            train=TrainConfig(**merged["train"]),
            reward=RewardModel(**merged["reward"]),
            beta_auto=bool(merged["beta_auto"]),
            betas=[float(b) for b in merged["betas"]],
            checkpoint=merged["checkpoint"],
            eval_samples=int(merged["eval_samples"]),
            fidelity_region=merged["fidelity_region"],
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    if cfg.command not in COMMANDS:
        raise ConfigError(f"unknown command {cfg.command!r}")
    if K < 1:
        raise ConfigError("K must be >= 1")
    if cfg.eval_samples < 2:
        raise ConfigError("eval_samples must be >= 2")
    return cfg


def _parse_beta(text: str):
    if text == "auto":
        return "auto"
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"beta must be a number or 'auto', got {text!r}") from None
    if not value >= 0:
        raise argparse.ArgumentTypeError("beta must be non-negative")
    return value


def _parse_grid(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad beta grid {text!r}") from None


def overrides_from_args(args) -> dict:
    """Translate flags into a partial config document."""
    doc: dict = {"command": args.command}
    train: dict = {}
    distill_doc: dict = {}
    if args.data is not None:
        doc["data"] = args.data
    if args.k is not None:
        doc["K"] = args.k
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.out is not None:
        doc["out"] = args.out
    if args.checkpoint is not None:
        doc["checkpoint"] = args.checkpoint
    if args.betas is not None:
        doc["betas"] = args.betas
    if args.reward is not None:
        doc["reward"] = {"kind": args.reward}
    if args.trainer is not None:
        train["trainer"] = args.trainer
    if args.div is not None:
        train["divergence"] = {"kind": args.div}
    if args.beta is not None:
        if args.beta == "auto":
            doc["beta_auto"] = True
        else:
            doc["beta_auto"] = False
            train.setdefault("divergence", {})["beta"] = args.beta
    if args.omega is not None:
        train["omega"] = args.omega
    if args.truncate is not None:
        train["truncate"] = args.truncate
    if args.clip is not None:
        train["pg_clip"] = args.clip
    if args.optimizer is not None:
        train["optimizer"] = args.optimizer
    if args.reference is not None:
        train["reference"] = args.reference
    target = distill_doc if args.command == "pretrain" else train
    if args.iterations is not None:
        target["iterations"] = args.iterations
    if args.lr is not None:
        target["lr"] = args.lr
    if args.batch_size is not None:
        target["batch_size"] = args.batch_size
    if train:
        doc["train"] = train
    if distill_doc:
        doc["distill"] = distill_doc
    return doc


def _deep_update(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _deep_update(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def load_data(spec: str) -> GaussianMixture:
    try:
        return preset(spec)
    except KeyError:
        pass
    path = Path(spec)
    if not path.exists():
        raise ConfigError(f"data file not found: {path} (and no preset of that name)")
    try:
        return GaussianMixture.from_json(path)
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read mixture from {path}: {exc}") from None


def _load_model(path, what: str):
    if path is None:
        raise ConfigError(f"no {what} checkpoint given")
    if not Path(path).exists():
        raise ConfigError(f"{what} checkpoint not found: {path}")
    try:
        model, _ = load_checkpoint(path)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"bad {what} checkpoint {path}: {exc}") from None
    return model


def _prepare_out(cfg: RunConfig, extra: dict | None = None) -> Path:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from None
    doc = cfg.to_dict()
    if extra:
        doc["resolved"] = extra
    (out / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return out


def _threads() -> int:
    raw = os.environ.get("ROCMLAB_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"ROCMLAB_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("ROCMLAB_THREADS must be >= 1")
    return n


def cmd_pretrain(cfg: RunConfig) -> dict:
    gm = load_data(cfg.data)
    if gm.dim != cfg.model.dim:
        raise ConfigError(f"data dimension {gm.dim} differs from model dim {cfg.model.dim}")
    cfg.model.n_conditions = gm.n_components
    out = _prepare_out(cfg)
    sched = NoiseSchedule(cfg.K)
    model = ConsistencyModel(cfg.model, seed=cfg.seed)
    model, losses = distill(model, gm, sched, cfg.distill)
    save_checkpoint(out / "model.ckpt", model, {"data": cfg.data, "seed": cfg.seed})
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "loss"])
        w.writerows([[i, repr(v)] for i, v in losses])
    rng = np.random.default_rng(cfg.seed + 1)
    data, labels = gm.sample(4096, rng, return_labels=True)
    with no_grad():
        x0 = generate(model, sched, labels, 0.0, noise=rng.standard_normal((cfg.K + 1, 4096, gm.dim))).x0.data
    w2 = sliced_w2(x0, data) if np.all(np.isfinite(x0)) else float("inf")
    teacher = sliced_w2(teacher_sample(gm, sched, 4096, rng), data)
    return {"sliced_w2": w2, "teacher_sliced_w2": teacher, "gate": W2_GATE,
            "passed": bool(w2 < W2_GATE), "checkpoint": str(out / "model.ckpt")}


def run_finetune(cfg: RunConfig) -> dict:
    gm = load_data(cfg.data)
    base = _load_model(cfg.train.reference, "reference")
    if base.K != cfg.K:
        raise ConfigError(f"reference checkpoint has K={base.K}, config has K={cfg.K}")
    ref = base.copy(frozen=True)
    model = base.copy()
    sched = NoiseSchedule(cfg.K)
    spec = cfg.train.divergence
    resolved: dict = {}
    if cfg.beta_auto:
        beta, info = resolve_beta_auto(model, ref, sched, cfg.reward, spec, cfg.train)
        spec.beta = beta
        resolved = {"beta": beta, **info}
        log.info("beta auto -> %.6g (beta*D / mean|R| = %.3f)", beta, info["ratio"])
    out = _prepare_out(cfg, resolved or None)
    ev = make_eval_set(gm, sched, cfg.reward, cfg.eval_samples, model.n_conditions,
                       cfg.train.omega, region=cfg.fidelity_region)
    ckpt_dir = None
    if cfg.train.checkpoint_every:
        ckpt_dir = out / "checkpoints"
        ckpt_dir.mkdir(exist_ok=True)
    model, metrics = train(model, ref, sched, cfg.reward, cfg.train, metrics_path=out / "metrics.csv",
                           eval_fn=lambda m: fidelity(m, sched, ev), checkpoint_dir=ckpt_dir)
    save_checkpoint(out / "model.ckpt", model, {"reference": cfg.train.reference, "seed": cfg.seed})
    final = evaluate(model, ref, sched, cfg.reward, ev, spec)
    final.update(beta=spec.beta, divergence_kind=spec.kind, trainer=cfg.train.trainer,
                 param_dist=param_distance(model, ref), iterations=len(metrics))
    (out / "final.json").write_text(json.dumps(final, indent=2, sort_keys=True) + "\n")
    return final


def _sweep_one(doc: dict, faults: tuple) -> dict:
    with contextlib.ExitStack() as stack:
        for f in faults:
            stack.enter_context(inject_fault(f))
        cfg = build_config(doc)
        try:
            res = run_finetune(cfg)
            return {"beta": cfg.train.divergence.beta, "status": "ok", **res}
        except (ConfigError, FloatingPointError, ValueError, OSError) as exc:
            return {"beta": cfg.train.divergence.beta, "status": f"error: {exc}"}


def dedupe_betas(betas) -> list[float]:
    seen: list[float] = []
    for b in betas:
        if b in seen:
            log.warning("duplicate beta %g in sweep grid ignored", b)
        else:
            seen.append(b)
    return seen


SUMMARY_COLUMNS = ("beta", "final_reward", "final_fidelity", "final_divergence", "param_dist", "status")


def cmd_sweep(cfg: RunConfig, faults: tuple = ()) -> dict:
    if not cfg.betas:
        raise ConfigError("beta grid is empty")
    if any(not b >= 0 for b in cfg.betas):
        raise ConfigError("beta grid values must be non-negative")
    betas = dedupe_betas(cfg.betas)
    cfg.betas = betas
    out = _prepare_out(cfg)
    docs = []
    for b in betas:
        doc = cfg.to_dict()
        doc.update(command="finetune", beta_auto=False, out=str(out / f"beta_{b:g}"))
        doc["train"]["divergence"]["beta"] = b
        docs.append(doc)
    workers = min(_threads(), len(docs))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_sweep_one, docs, [faults] * len(docs)))
    else:
        results = [_sweep_one(d, faults) for d in docs]
    nan = float("nan")
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for r in results:
            w.writerow([repr(r["beta"]), repr(r.get("reward", nan)), repr(r.get("fidelity", nan)),
                        repr(r.get("divergence", nan)), repr(r.get("param_dist", nan)), r["status"]])
    with open(out / "plot_data.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["beta", "neg_log10_beta", "reward", "fidelity"])
        for r in sorted(results, key=lambda r: r["beta"]):
            if r["status"] == "ok":
                nl = 0.0 - np.log10(r["beta"]) if r["beta"] > 0 else float("inf")
                w.writerow([repr(r["beta"]), repr(float(nl)), repr(r["reward"]), repr(r["fidelity"])])
    failed = [r for r in results if r["status"] != "ok"]
    for r in failed:
        log.error("beta %g failed: %s", r["beta"], r["status"])
    return {"runs": results, "failed": len(failed), "summary": str(out / "summary.csv")}


def cmd_eval(cfg: RunConfig) -> dict:
    gm = load_data(cfg.data)
    model = _load_model(cfg.checkpoint, "model")
    ref = _load_model(cfg.train.reference, "reference") if cfg.train.reference else model.copy(frozen=True)
    sched = NoiseSchedule(model.K)
    _prepare_out(cfg)
    ev = make_eval_set(gm, sched, cfg.reward, cfg.eval_samples, model.n_conditions,
                       cfg.train.omega, region=cfg.fidelity_region)
    res = evaluate(model, ref, sched, cfg.reward, ev, cfg.train.divergence)
    res["param_dist"] = param_distance(model, ref)
    return res


def cmd_oracle_check(cfg: RunConfig, quick: bool = False, write: bool = False) -> dict:
    checks = run_checks(quick=quick, seed=cfg.seed)
    report = {"passed": all(c.passed for c in checks), "checks": [c.to_dict() for c in checks],
              "failed": [c.name for c in checks if not c.passed]}
    if write:
        out = _prepare_out(cfg)
        (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    return report


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config document")
    common.add_argument("--data", help="preset name or mixture JSON file")
    common.add_argument("--trainer", choices=("rocm", "pg"))
    common.add_argument("--div", choices=[k for k in KINDS])
    common.add_argument("--beta", type=_parse_beta, help="float or 'auto'")
    common.add_argument("--betas", type=_parse_grid, help="comma-separated sweep grid")
    common.add_argument("--k", type=int, help="generation steps K")
    common.add_argument("--omega", type=float, help="guidance scale")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--truncate", type=int, help="backprop through the last m steps")
    common.add_argument("--clip", type=float, help="clipped importance ratio for the pg trainer")
    common.add_argument("--optimizer", choices=("sgd", "adam"))
    common.add_argument("--iterations", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("--batch-size", type=int)
    common.add_argument("--reward", help="reward kind")
    common.add_argument("--reference", help="base checkpoint (frozen reference)")
    common.add_argument("--checkpoint", help="checkpoint to evaluate")
    common.add_argument("--inject-fault", choices=FAULTS, action="append", default=[],
                        help="test hook")
    common.add_argument("--quick", action="store_true", help="oracle-check: reduced sizes")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="rocmlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return p


def resolve(args) -> RunConfig:
    doc: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a JSON object")
    doc = _deep_update(doc, overrides_from_args(args))
    return build_config(doc)


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command != "oracle-check" else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    faults = tuple(args.inject_fault)
    try:
        with contextlib.ExitStack() as stack:
            for f in faults:
                stack.enter_context(inject_fault(f))
            cfg = resolve(args)
            _threads()
            if cfg.command == "pretrain":
                result = cmd_pretrain(cfg)
            elif cfg.command == "finetune":
                result = run_finetune(cfg)
            elif cfg.command == "sweep":
                result = cmd_sweep(cfg, faults)
            elif cfg.command == "eval":
                result = cmd_eval(cfg)
            else:
                result = cmd_oracle_check(cfg, quick=args.quick, write=args.out is not None)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    print(json.dumps(result, indent=2, default=float))
    if cfg.command == "oracle-check" and not result["passed"]:
        print("failed checks: " + ", ".join(result["failed"]), file=sys.stderr)
        return 1
    if cfg.command == "sweep" and result["failed"] == len(result["runs"]):
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
