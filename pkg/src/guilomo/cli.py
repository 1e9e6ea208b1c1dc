"""Command-line interface.

Subcommands cover the whole workflow: ``search`` learns the selection
vectors and writes a checkpoint plus the extracted plan, ``allocate``
re-extracts a plan from a checkpoint, ``train`` materializes a plan and
fine-tunes it, ``evaluate`` scores a final model, ``analyze`` turns plans
into report tables, ``perturb`` applies a rank-conserving plan edit, and
``compare`` runs several allocation strategies end to end.

Exit codes: 0 success, 1 validation error (bad flags, bad config, bad
plan), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from .allocation import AllocationPlan, PlanError, extract_plan, materialize, plan_total_rank
from .analysis import PerturbationSpec, emit_report, perturb
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_run_config
from .experiment import (
    build_baseline_plan,
    build_data,
    build_model,
    compare_strategies,
    load_final_model,
    load_search_checkpoint,
    run_search_experiment,
    save_final_model,
    save_search_checkpoint,
    write_search_metrics,
)
from .training import evaluate_model, finetune

_VALIDATION_ERRORS = (ConfigError, PlanError, CheckpointError, ValueError,
                      FileNotFoundError)


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on usage errors, per the CLI contract."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _load_config(args) -> RunConfig:
    if args.config is None:
        raise ConfigError("this command requires --config")
    cfg = load_run_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_search(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    result, plan = run_search_experiment(cfg)
    save_search_checkpoint(out / "search_checkpoint", cfg, result.state,
                           pi_star=result.pi_star)
    plan.save(out / "plan.json")
    write_search_metrics(out / "search_metrics.csv", result.history)
    final = result.history[-1] if result.history else {"loss_sft": float("nan")}
    print(f"search: {result.state.t} steps, final task loss {final['loss_sft']:.4f}")
    print(f"search: wrote {out / 'search_checkpoint'}, {out / 'plan.json'}, "
          f"{out / 'search_metrics.csv'}")
    return 0


def cmd_allocate(args) -> int:
    _, state, _ = load_search_checkpoint(args.checkpoint)
    plan = extract_plan(state.model, source="guilomo")
    out = Path(args.out or "plan.json")
    plan.save(out)
    print(f"allocate: wrote {out} (total rank {plan_total_rank(plan)})")
    return 0


def cmd_train(args) -> int:
    plan = AllocationPlan.load(args.plan)
    if args.checkpoint:
        cfg, state, pi_star = load_search_checkpoint(args.checkpoint)
        weights = None if args.fresh_init else pi_star
        model = materialize(plan, state.model, weights=weights)
    else:
        cfg = _load_config(args)
        model = materialize(plan, build_model(cfg))
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out:
        cfg.out_dir = args.out
    out = _out_dir(cfg)
    train, eval_data = build_data(cfg)
    history = finetune(model, train, epochs=cfg.finetune.epochs, lr=cfg.finetune.lr,
                       eval_data=eval_data, batch_size=cfg.finetune.batch_size,
                       c_balance=cfg.c_balance, seed=cfg.seed,
                       schedule=cfg.finetune.schedule)
    save_final_model(out / "final_model", cfg, model, plan)
    with (out / "train_metrics.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(history[0].keys()))
        writer.writeheader()
        writer.writerows(history)
    last = history[-1]
    print(f"train: {cfg.finetune.epochs} epochs, eval accuracy "
          f"{last.get('accuracy', float('nan')):.4f}")
    print(f"train: wrote {out / 'final_model'}, {out / 'train_metrics.csv'}")
    return 0


def cmd_evaluate(args) -> int:
    cfg, _, model = load_final_model(args.checkpoint)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    _, eval_data = build_data(cfg)
    metrics = evaluate_model(model, eval_data)
    print(f"evaluate: accuracy {metrics['accuracy']:.4f}, "
          f"loss {metrics['sft_loss']:.4f}")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with out.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["accuracy", "sft_loss"])
            writer.writeheader()
            writer.writerow(metrics)
        print(f"evaluate: wrote {out}")
    return 0


def _parse_plan_arg(arg: str) -> tuple[str, Path]:
    if "=" in arg:
        label, path = arg.split("=", 1)
        return label, Path(path)
    path = Path(arg)
    return path.stem, path


def cmd_analyze(args) -> int:
    plans = {}
    for arg in args.plans:
        label, path = _parse_plan_arg(arg)
        plans[label] = AllocationPlan.load(path)
    written = emit_report(plans, None, args.out)
    for path in written:
        print(f"analyze: wrote {path}")
    return 0


def cmd_perturb(args) -> int:
    plan = AllocationPlan.load(args.plan)
    spec = PerturbationSpec(kind=args.kind, layer=args.layer, amount=args.amount,
                            seed=args.seed if args.seed is not None else 0)
    result = perturb(plan, spec)
    out = Path(args.out)
    result.save(out)
    print(f"perturb: {spec.kind} on layer {spec.layer} -> {out} "
          f"(total rank {plan_total_rank(result)})")
    return 0


def cmd_compare(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    rows = compare_strategies(cfg, strategies)
    path = out / "comparison.csv"
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    width = max(len(r["strategy"]) for r in rows)
    for row in rows:
        print(f"compare: {row['strategy']:<{width}}  accuracy "
              f"{row['accuracy']:.4f}  params {row['trainable_params']}  "
              f"total rank {row['total_rank']}")
    print(f"compare: wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="guilomo",
                     description="Expert-count and rank allocation for LoRA-MoE "
                                 "adapters on a desk-scale transformer.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add_common(p, config=True):
        if config:
            p.add_argument("--config", help="run config file (TOML or JSON)")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--out", help="override the output location")

    p = sub.add_parser("search", help="run the allocation search")
    add_common(p)
    p.set_defaults(fn=cmd_search)

    p = sub.add_parser("allocate", help="extract a plan from a search checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="plan output path (default plan.json)")
    p.set_defaults(fn=cmd_allocate)

    p = sub.add_parser("train", help="materialize a plan and fine-tune it")
    p.add_argument("--plan", required=True)
    p.add_argument("--checkpoint", help="search checkpoint for warm-start weights")
    p.add_argument("--fresh-init", action="store_true",
                   help="ignore checkpoint weights and train from initialization")
    add_common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a fine-tuned model checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--out", help="optional metrics CSV path")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("analyze", help="emit report tables from plan files")
    p.add_argument("--plans", nargs="+", required=True,
                   help="plan paths, optionally labeled as LABEL=path")
    p.add_argument("--out", default="reports")
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("perturb", help="apply a rank-conserving plan perturbation")
    p.add_argument("--plan", required=True)
    p.add_argument("--kind", required=True,
                   choices=["IEN", "DEN", "MRA_half", "MRA_random"])
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--amount", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_perturb)

    p = sub.add_parser("compare", help="run several allocation strategies end to end")
    add_common(p)
    p.add_argument("--strategies", default="guilomo,uniform",
                   help="comma-separated subset of guilomo,uniform,mola_group,normal_e_r")
    p.set_defaults(fn=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except _VALIDATION_ERRORS as exc:
        print(f"guilomo {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"guilomo {args.command}: runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
