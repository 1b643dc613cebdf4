"""Command-line entry point.

Subcommands: ``simulate`` (emit a GP dataset file), ``train`` (one variant),
``eval`` (a checkpoint against the experiment's test split), ``experiment``
(full comparison table), and ``gradcheck`` (finite-difference suite).

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys

from .autodiff import ParameterStore
from .data import save_dataset, simulate_gp_dataset
from .errors import ConfigError, DataError, NumericError
from .evaluation import (
    ExperimentConfig,
    build_cell_data,
    evaluate_model,
    rmse_to_mm,
    run_experiment,
    variant_spec,
)
from .gradcheck import run_suite
from .numeric import RngState
from .training import TrainConfig, train


def _load_config(path, overrides: argparse.Namespace) -> ExperimentConfig:
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if getattr(overrides, "seed", None) is not None:
        obj["seeds"] = [overrides.seed]
        obj.pop("n_seeds", None)
    if getattr(overrides, "epochs", None) is not None:
        obj.setdefault("train", {})["epochs"] = overrides.epochs
    if getattr(overrides, "out", None) is not None:
        obj["out_dir"] = overrides.out
    if getattr(overrides, "variant", None) is not None:
        obj["variants"] = [overrides.variant]
    if getattr(overrides, "workers", None) is not None:
        obj["workers"] = overrides.workers
    return ExperimentConfig.from_json(obj)


def cmd_simulate(args) -> int:
    data = simulate_gp_dataset(
        RngState(args.seed), args.n_tasks, args.samples_per_task
    )
    save_dataset(data, args.out)
    print(f"wrote {len(data)} samples from {args.n_tasks} tasks to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config, args)
    variant = cfg.variants[0]
    seed = cfg.seeds[0]
    train_data, _ = build_cell_data(cfg, seed)
    context_dim = (
        train_data.samples[0].context.payload.shape[0]
        if cfg.context_kind == "continuous"
        else None
    )
    spec = variant_spec(cfg, variant, train_data.input_dim,
                        train_data.output_dim, context_dim)
    run_cfg = TrainConfig(
        epochs=cfg.train.epochs,
        learning_rate=cfg.train.learning_rate,
        batch_size=cfg.train.batch_size,
        seed=seed,
        lambda1=spec.lambda1,
        lambda2=spec.lambda2,
        checkpoint_every=args.checkpoint_every,
        tag=f"{variant}-s{seed}",
    )
    out_dir = cfg.out_dir or "."
    _, trace = train(spec, train_data, run_cfg, out_dir=out_dir)
    print(
        f"trained {variant} (seed {seed}) for {cfg.train.epochs} epochs; "
        f"final mean loss {trace[-1].mean_loss:.6f}; checkpoints in {out_dir}"
    )
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args.config, args)
    variant = cfg.variants[0]
    seed = cfg.seeds[0]
    _, test_data = build_cell_data(cfg, seed)
    context_dim = (
        test_data.samples[0].context.payload.shape[0]
        if cfg.context_kind == "continuous"
        else None
    )
    spec = variant_spec(cfg, variant, test_data.input_dim,
                        test_data.output_dim, context_dim)
    store = ParameterStore.load(args.checkpoint)
    err, std = evaluate_model(spec, store, test_data)
    result = {"variant": variant, "seed": seed, "rmse": err, "std": std}
    if cfg.is_push:
        result["dist_mm"] = rmse_to_mm(err)
    print(json.dumps(result))
    return 0


def cmd_experiment(args) -> int:
    cfg = _load_config(args.config, args)
    _, table = run_experiment(cfg)
    print(table, end="")
    if cfg.out_dir:
        print(f"reports written to {cfg.out_dir}")
    return 0


def cmd_gradcheck(args) -> int:
    _, ok = run_suite(n_seeds=args.seeds, verbose=True)
    if not ok:
        raise NumericError("finite-difference gradient check failed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctxmask",
        description="Context-masked Siamese regression: simulate, train, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a simulated GP dataset file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-tasks", type=int, default=200)
    p.add_argument("--samples-per-task", type=int, default=20)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a single variant from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--variant")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--variant")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experiment", help="run the full variant comparison")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("gradcheck", help="run the finite-difference suite")
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
