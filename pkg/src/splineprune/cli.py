"""Command-line entry point: ``python -m splineprune <command> [--config FILE] [--seed N] [--out DIR]``.

On success a JSON line describing the run is printed on stdout and the exit
code is 0.  On failure a JSON object ``{"error": <type>, "message": <text>}``
goes to stderr and the exit code is 2 (bad usage/config) or 1 (anything else).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import experiments as ex
from .config import ExperimentConfig, default_config
from .errors import ConfigError, SplinePruneError
from .pruning import prune
from .weights_io import load_weights, save_weights

# subcommand -> experiment kind it runs
COMMANDS = {
    "train": None,
    "prune": None,
    "earlybird": "earlybird",
    "kmeans": "kmeans",
    "sawtooth": "sawtooth",
    "xshape": "xshape",
    "rho-sweep": "rho_sweep",
    "slice-viz": "mnist_slice",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="splineprune", description="Spline-view pruning experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--seed", type=int, help="run this single seed instead of the config's list")
        p.add_argument("--out", help="output directory")
        if name in ("train", "prune"):
            p.add_argument("--kind", default="xshape", help="experiment kind supplying data/model defaults")
        if name == "prune":
            p.add_argument("--weights", help="prune this saved network instead of training one")
            p.add_argument("--policy", help="override the pruning policy")
            p.add_argument("--ratio", type=float, help="override the pruning ratio")
            p.add_argument("--rho", type=float, help="override the redundancy bias weight")
            p.add_argument("--compensation", choices=["none", "merge_outgoing"])
    return parser


def load_config(args) -> ExperimentConfig:
    kind = COMMANDS[args.command] or getattr(args, "kind", "xshape")
    if args.config:
        cfg = ExperimentConfig.load(args.config)
        if COMMANDS[args.command] is not None and cfg.kind != kind:
            raise ConfigError(f"config kind {cfg.kind!r} does not match command {args.command!r}")
    else:
        cfg = default_config(kind)
    return cfg.with_overrides(seed=args.seed, output_dir=args.out)


def _train(cfg: ExperimentConfig) -> dict:
    seed = int(cfg.seeds[0])
    net, tr, te, history, _ = ex.train_model(cfg, seed)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    hist_cols = [k for k in history[0] if k != "early_stop"] if history else ["epoch"]
    artifacts = [str(save_weights(net, out / "model.splw")),
                 str(ex.write_rows_csv(out / "history.csv", history, hist_cols))]
    row = {"seed": seed, "accuracy": ex.accuracy(net, te.x, te.y), "epochs": len(history)}
    summary = ex._finish(cfg, [row], ex.aggregate([row], ["accuracy"]), artifacts)
    return summary.to_dict()


def _prune(cfg: ExperimentConfig, args) -> dict:
    seed = int(cfg.seeds[0])
    if args.weights:
        net = load_weights(args.weights)
        tr, te = ex.load_data(cfg, seed)
    else:
        net, tr, te, _, _ = ex.train_model(cfg, seed)
    policy = args.policy or cfg.prune.policy
    ratio = cfg.prune.ratio if args.ratio is None else args.ratio
    before = ex.accuracy(net, te.x, te.y)
    rho = cfg.prune.rho if args.rho is None else args.rho
    compensation = args.compensation or cfg.prune.compensation
    pruned, plan = prune(net, policy, ratio, rho=rho, seed=seed, compensation=compensation, d=cfg.prune.pca_dim)
    ex.fine_tune(pruned, tr, cfg, seed)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = [str(save_weights(pruned, out / "pruned.splw")),
                 ex._write_text(out / "plan.json", plan.to_json())]
    row = {"seed": seed, "policy": policy, "ratio": ratio, "accuracy_before": before,
           "accuracy": ex.accuracy(pruned, te.x, te.y), "warnings": len(plan.warnings)}
    summary = ex._finish(cfg, [row], ex.aggregate([row], ["accuracy"]), artifacts)
    return summary.to_dict()


def run(argv=None) -> dict:
    args = build_parser().parse_args(argv)
    cfg = load_config(args)
    if args.command == "train":
        return _train(cfg)
    if args.command == "prune":
        return _prune(cfg, args)
    return ex.run_experiment(cfg).to_dict()


def main(argv=None) -> int:
    try:
        result = run(argv)
    except (UsageError, ConfigError) as exc:
        _report(exc)
        return 2
    except (SplinePruneError, OSError, ValueError) as exc:
        _report(exc)
        return 1
    print(json.dumps({"kind": result["kind"], "config_hash": result["config_hash"],
                      "aggregates": result["aggregates"], "artifacts": result["artifacts"]},
                     sort_keys=True, default=str))
    return 0


def _report(exc: Exception):
    err = "UsageError" if isinstance(exc, UsageError) else type(exc).__name__
    print(json.dumps({"error": err, "message": str(exc)}), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
