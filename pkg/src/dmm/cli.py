"""Command-line entry point: ``dmm <command> ...``.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import data as D
from .autodiff import NonFiniteError
from .elbo import elbo
from .evaluation import counterfactual_rollout, nll_report, posterior_means, rmse_posterior
from .exact import NumericalError, exact_rmse, smooth_batch
from .gssm import ContractError, LinearGSSM, model_from_config, sample_sequence
from .infnet import INFERENCE_VARIANTS, InferenceNetwork
from .trainer import CheckpointError, TrainConfig, Trainer, TrainingAborted, load_models, save_models

log = logging.getLogger("dmm")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
SYSTEMS = ("linear-fig2", "nonlinear-fig3", "toy-binary", "actions")


class UsageError(Exception):
    pass


def _emit(text: str, payload: dict, json_path: str | None) -> None:
    print(text)
    line = json.dumps(payload)
    if json_path:
        Path(json_path).write_text(line + "\n")
    else:
        print(line)


def _load_data(path) -> D.SequenceBatch:
    if not Path(path).exists():
        raise UsageError(f"dataset not found: {path}")
    return D.load(path)


def _check_dims(model, net, batch: D.SequenceBatch) -> None:
    if batch.obs_dim != model.obs_dim:
        raise UsageError(f"dimension mismatch: data obs_dim={batch.obs_dim}, checkpoint obs_dim={model.obs_dim}")
    if model.action_dim and batch.action_dim != model.action_dim:
        raise UsageError(
            f"dimension mismatch: data action_dim={batch.action_dim}, checkpoint action_dim={model.action_dim}"
        )
    if net.latent_dim != model.latent_dim:
        raise UsageError(f"dimension mismatch: model latent_dim={model.latent_dim}, network latent_dim={net.latent_dim}")


# ----------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    if args.n < 1 or args.t < 1:
        raise UsageError("--n and --t must be >= 1")
    if args.system == "linear-fig2":
        batch = D.gen_linear_fig2(args.n, args.t, args.seed)
    elif args.system == "nonlinear-fig3":
        batch = D.gen_nonlinear_fig3(args.n, args.t, args.alpha, args.beta, args.seed)
    elif args.system == "toy-binary":
        batch = D.gen_toy_binary(args.n, args.t, args.d, args.seed)
    else:
        system = D.ActionSystem(D=args.d, action_dim=args.action_dim, effect=args.effect, seed=args.seed)
        batch = D.gen_action_system(args.n, args.t, args.seed, system, args.policy, args.p)
    if args.rate > 0:
        batch = D.apply_missingness(batch, args.rate, seed=args.seed)
    D.save(batch, args.out)
    summary = {
        "path": args.out, "system": args.system, "N": batch.n, "T": batch.T, "obs_dim": batch.obs_dim,
        "action_dim": batch.action_dim, "missing_rate": batch.missing_rate(),
    }
    _emit(f"wrote {batch.n} sequences of length {batch.T} (obs_dim {batch.obs_dim}, "
          f"action_dim {batch.action_dim}, missing rate {summary['missing_rate']:.3f}) to {args.out}", summary, None)
    return EXIT_OK


# ----------------------------------------------------------------------------
# train


def load_run_config(path) -> dict:
    """Read and validate a run config.

    Layout::

        {"model": {...model config...},
         "inference": {"variant": "DKS", "rnn_dim": 40, "input_hidden": [20]},
         "train": {...TrainConfig fields...},
         "data": {"train": "train.json", "valid": "valid.json"},
         "output_dir": "runs/x", "seed": 0}
    """
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config not found: {path}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    for key in ("model", "inference", "data", "output_dir"):
        if key not in cfg:
            raise UsageError(f"{path}: missing field {key!r}")
    variant = cfg["inference"].get("variant")
    if variant not in INFERENCE_VARIANTS:
        raise UsageError(f"{path}: inference variant {variant!r} is not one of {INFERENCE_VARIANTS}")
    if "train" not in cfg["data"]:
        raise UsageError(f"{path}: data.train is required")
    for role in ("train", "valid"):
        if role in cfg["data"] and not Path(cfg["data"][role]).exists():
            raise UsageError(f"dataset not found: {cfg['data'][role]}")
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(cfg.get("train", {})) - known
    if unknown:
        raise UsageError(f"{path}: unknown train fields {sorted(unknown)}")
    return cfg


def build_from_run_config(cfg: dict, seed: int):
    mcfg = dict(cfg["model"])
    mcfg.setdefault("seed", seed)
    model = model_from_config(mcfg)
    icfg = {"obs_dim": model.obs_dim, "latent_dim": model.latent_dim, "action_dim": model.action_dim}
    icfg.update(cfg["inference"])
    net = InferenceNetwork.from_config(icfg, seed=seed)
    tcfg = TrainConfig(**{**cfg.get("train", {}), "seed": seed})
    return model, net, tcfg


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    train_set = _load_data(cfg["data"]["train"])
    valid_set = _load_data(cfg["data"]["valid"]) if "valid" in cfg["data"] else None
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        tr = Trainer.load(args.resume, train_set, valid_set)
    else:
        model, net, tcfg = build_from_run_config(cfg, seed)
        _check_dims(model, net, train_set)
        try:
            tr = Trainer(model, net, train_set, valid_set, tcfg)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    try:
        tr.run(max_steps=args.max_steps)
    except TrainingAborted as exc:
        tr.save(out / "checkpoint.json")
        tr.log.write_csv(out / "log.csv")
        print(f"error: {exc}; last good state saved to {out / 'checkpoint.json'}", file=sys.stderr)
        return EXIT_NUMERIC
    tr.save(out / "checkpoint.json")
    tr.log.write_csv(out / "log.csv")
    best = Trainer.load(out / "checkpoint.json", train_set, valid_set)
    best.finish()
    save_models(best.model, best.net, out / "model.json")
    summary = {
        "updates": tr.update, "epochs": tr.epoch, "stopped_early": tr.stopped,
        "best_valid_bound": None if not np.isfinite(tr.best_valid) else tr.best_valid,
        "checkpoint": str(out / "checkpoint.json"), "model": str(out / "model.json"), "log": str(out / "log.csv"),
    }
    bv = "n/a" if summary["best_valid_bound"] is None else f"{summary['best_valid_bound']:.4f}"
    _emit(f"trained {tr.update} updates over {tr.epoch} epochs; best validation bound {bv}", summary, None)
    return EXIT_OK


# ----------------------------------------------------------------------------
# evaluation commands


def _load(args):
    if not Path(args.checkpoint).exists():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    return load_models(args.checkpoint)


def cmd_eval(args) -> int:
    model, net = _load(args)
    batch = _load_data(args.data)
    _check_dims(model, net, batch)
    if args.samples < 1:
        raise UsageError("--samples must be >= 1")
    rep = nll_report(model, net, batch, args.samples, np.random.default_rng(args.seed))
    _emit(rep.format(), asdict(rep), args.json)
    return EXIT_OK


def cmd_compare_exact(args) -> int:
    model, net = _load(args)
    if not isinstance(model, LinearGSSM):
        raise UsageError(
            f"compare-exact needs a LinearGSSM checkpoint (got {model.variant}); exact smoothing is only defined "
            "for linear-Gaussian models"
        )
    batch = _load_data(args.data)
    _check_dims(model, net, batch)
    if (batch.lengths != batch.T).any() or (batch.mask == 0).any():
        raise UsageError("compare-exact needs fully observed sequences of equal length")
    if batch.z_star is None:
        raise UsageError("compare-exact needs ground-truth latents (z_star) in the dataset")
    smoothed, ll = smooth_batch(model.to_linear_system(), batch.x)
    rm_exact = exact_rmse(smoothed.means, batch.z_star)
    rm_net = rmse_posterior(posterior_means(net, batch), batch.z_star)
    bound = elbo(model, net, batch, 1.0, args.samples, np.random.default_rng(args.seed)).value
    exact_ll = float(ll.mean())
    payload = {
        "rmse_network": rm_net, "rmse_smoother": rm_exact, "rmse_ratio": rm_net / rm_exact,
        "bound": bound, "exact_loglik": exact_ll, "bound_gap": exact_ll - bound,
        "bound_ratio": bound / exact_ll,
    }
    text = (f"RMSE network {rm_net:.4f} vs smoother {rm_exact:.4f} (ratio {rm_net / rm_exact:.4f})\n"
            f"bound {bound:.4f} vs exact log-likelihood {exact_ll:.4f} (gap {exact_ll - bound:.4f})")
    _emit(text, payload, args.json)
    return EXIT_OK


def cmd_sample(args) -> int:
    model, _ = _load(args)
    if args.n < 1 or args.t < 1:
        raise UsageError("--n and --t must be >= 1")
    rng = np.random.default_rng(args.seed)
    u = None
    if model.action_dim:
        u = (rng.uniform(size=(args.n, args.t, model.action_dim)) < args.p).astype(np.float64)
    z, x = sample_sequence(model, args.t, rng, n=args.n, u_seq=u)
    batch = D.SequenceBatch(x, np.ones_like(x), u=u, z_star=z)
    D.save(batch, args.out)
    _emit(f"wrote {args.n} sampled sequences of length {args.t} to {args.out}",
          {"path": args.out, "N": args.n, "T": args.t}, None)
    return EXIT_OK


def cmd_counterfactual(args) -> int:
    model, net = _load(args)
    if not model.action_dim:
        raise UsageError(f"counterfactual rollouts need an action-conditioned model (got {model.variant})")
    batch = _load_data(args.data)
    _check_dims(model, net, batch)
    if (batch.lengths != batch.T).any():
        raise UsageError("counterfactual needs sequences of equal length")
    if not 0 <= args.dim < model.obs_dim:
        raise UsageError(f"--dim {args.dim} outside 0..{model.obs_dim - 1}")
    rep = counterfactual_rollout(model, net, batch.x, batch.u, args.k, args.horizon, args.rollouts, args.dim,
                                 args.cut, np.random.default_rng(args.seed), mask=batch.mask)
    if args.out:
        Path(args.out).write_text(rep.to_csv())
    lines = ["step factual counterfactual"] + [
        f"{s} {f:.4f} {c:.4f}" for s, f, c in zip(rep.steps, rep.factual, rep.counterfactual)
    ]
    _emit("\n".join(lines), asdict(rep), args.json)
    return EXIT_OK


# ----------------------------------------------------------------------------


def default_threads() -> int:
    env = os.environ.get("DMM_THREADS")
    if env is None:
        return 1
    try:
        return max(1, int(env))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    common.add_argument("--threads", type=int, default=default_threads(),
                        help="worker threads (default 1, or $DMM_THREADS)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dmm", description="Deep Markov model workbench")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    g.add_argument("--system", required=True, choices=SYSTEMS)
    g.add_argument("--n", type=int, default=5000)
    g.add_argument("--t", type=int, default=25)
    g.add_argument("--out", required=True)
    g.add_argument("--alpha", type=float, default=0.5)
    g.add_argument("--beta", type=float, default=-0.1)
    g.add_argument("--d", type=int, default=6, help="observation dim (toy-binary, actions)")
    g.add_argument("--action-dim", type=int, default=2)
    g.add_argument("--effect", type=float, default=1.0, help="drug effect on the indicator latent (actions)")
    g.add_argument("--policy", choices=("bernoulli", "threshold"), default="bernoulli")
    g.add_argument("--p", type=float, default=0.5, help="Bernoulli action probability")
    g.add_argument("--rate", type=float, default=0.0, help="missingness rate")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train from a run config")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", help="trainer checkpoint to continue from")
    t.add_argument("--max-steps", type=int, default=None, help="stop after this many updates in this invocation")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help='held-out NLL report "a (b) {c}"')
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--samples", type=int, default=100)
    e.add_argument("--json")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare-exact", parents=[common], help="inference network vs exact smoother")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--samples", type=int, default=1, help="posterior paths for the bound")
    c.add_argument("--json")
    c.set_defaults(func=cmd_compare_exact)

    s = sub.add_parser("sample", parents=[common], help="ancestral samples from a checkpointed model")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--t", type=int, required=True)
    s.add_argument("--n", type=int, default=1)
    s.add_argument("--p", type=float, default=0.5, help="Bernoulli action probability for action models")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    f = sub.add_parser("counterfactual", parents=[common], help="factual vs no-action rollouts")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--k", type=int, required=True, help="intervention step (1-based)")
    f.add_argument("--horizon", type=int, required=True)
    f.add_argument("--dim", type=int, default=0, help="indicator observation")
    f.add_argument("--cut", type=float, default=0.5, help="probability threshold for 'high'")
    f.add_argument("--rollouts", type=int, default=20)
    f.add_argument("--out", help="CSV output (step, factual, counterfactual)")
    f.add_argument("--json")
    f.set_defaults(func=cmd_counterfactual)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    if args.seed is None and args.command != "train":
        args.seed = 0
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (UsageError, D.SchemaError, CheckpointError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteError, NumericalError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
