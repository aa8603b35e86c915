"""Command-line entry point: gen, oracle, train, search, eval, baseline, report.

All randomness flows from one --seed flag, split into named substreams
(task-set, holdout, init, train), so any artifact is quotable as a single
seed.  Every subcommand exits 0 on success and nonzero with a one-line
diagnostic on failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

from . import evaluation, net, search, trainer
from .automaton import format_trace, trace_episode
from .prompts import parse_prompt
from .records import RunRecord
from .seeding import derive_seed
from .tables import generate_task_set, holdout_split, load_task_set, save_task_set


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="comprnn",
        description="Lookup-table composition experiments: task generation, "
                    "FSA oracle, training, random search, evaluation, reporting.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a task-set JSON file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--length", type=int, default=3)
    p.add_argument("--tables", type=int, default=8)
    p.add_argument("--per-task", type=int, default=2, help="held-out inputs per composed task")

    p = sub.add_parser("oracle", help="answer a prompt with the automaton oracle")
    p.add_argument("--tasks", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--trace", action="store_true", help="dump the per-step state trace")

    p = sub.add_parser("train", help="run one training run of any variant")
    p.add_argument("--tasks", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variant", default="exp2", choices=trainer.VARIANTS)
    p.add_argument("--episodes-p1", type=int, default=trainer.DESK_EPISODES_PER_PHASE)
    p.add_argument("--episodes-p2", type=int, default=trainer.DESK_EPISODES_PER_PHASE)
    p.add_argument("--out", help="results JSONL file to append the run record to")
    p.add_argument("--checkpoint", help="write final parameters here")
    p.add_argument("--log", help="training log path (NDJSON)")
    p.add_argument("--optimizer", default="adam", choices=("adam", "sgd"))
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--final-output-only", action="store_true")
    p.add_argument("--run-id", type=int, default=0)

    p = sub.add_parser("search", help="run many independent seeded training runs")
    p.add_argument("--tasks", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--runs", type=int, required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--variant", default="exp2", choices=trainer.VARIANTS)
    p.add_argument("--episodes-p1", type=int, default=50_000)
    p.add_argument("--episodes-p2", type=int, default=50_000)
    p.add_argument("--out", required=True)
    p.add_argument("--optimizer", default="adam", choices=("adam", "sgd"))
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--final-output-only", action="store_true")
    p.add_argument("--fixed-init", action="store_true",
                   help="share one initialization across all runs")
    p.add_argument("--fixed-init-seed", type=int,
                   help="explicit init seed to rerun (implies --fixed-init)")

    p = sub.add_parser("eval", help="score a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tasks", required=True)
    p.add_argument("--exhaustive", action="store_true",
                   help="score all 576 items instead of the 128 held-out ones")
    p.add_argument("--final-output-only", action="store_true")
    p.add_argument("--out", help="write the full report JSON here")

    p = sub.add_parser("baseline", help="Monte-Carlo random baselines")
    p.add_argument("--tasks", required=True)
    p.add_argument("--kind", required=True, choices=("random_output", "random_wellformed"))
    p.add_argument("--trials", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("report", help="aggregate results into CSV + SVG")
    p.add_argument("--in", dest="results", required=True)
    p.add_argument("--bins", type=float, default=5.0)
    p.add_argument("--out", required=True, help="output path prefix")
    p.add_argument("--compare", help="second results file for a side-by-side report")

    return parser


def cmd_gen(args: argparse.Namespace) -> int:
    task_set = generate_task_set(args.seed, num_tables=args.tables, length=args.length)
    split = holdout_split(task_set, per_task=args.per_task,
                          seed=derive_seed(args.seed, "holdout"))
    path = save_task_set(task_set, split, args.out)
    print(f"wrote {path} ({args.tables} tables, {split.total_items} held-out items)")
    return 0


def cmd_oracle(args: argparse.Namespace) -> int:
    task_set, _split = load_task_set(args.tasks)
    task, bits = parse_prompt(args.prompt, task_set.length)
    trace = trace_episode(task, task_set, bits)
    if args.trace:
        print(format_trace(trace), end="")
    else:
        print(trace.emitted)
    return 0


def _append_record(path: str, record: RunRecord, config: dict) -> None:
    out = Path(path)
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    config_hash = hashlib.sha256(blob.encode("utf-8")).hexdigest()
    lines = []
    if not out.exists():
        lines.append(json.dumps(search.make_header(config_hash, config), sort_keys=True))
    lines.append(json.dumps(record.to_dict(), sort_keys=True))
    with open(out, "a", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def cmd_train(args: argparse.Namespace) -> int:
    config = trainer.TrainConfig(
        variant=args.variant,
        episodes_phase1=args.episodes_p1,
        episodes_phase2=args.episodes_p2,
        init_seed=derive_seed(args.seed, "init"),
        train_seed=derive_seed(args.seed, "train"),
        task_set_path=args.tasks,
        optimizer=args.optimizer,
        lr=args.lr,
        final_output_only=args.final_output_only,
        log_path=args.log,
    )
    task_set, split = load_task_set(args.tasks)
    if args.variant == "exp1":
        params, metrics = trainer.train_exp1(config, task_set, split)
        record = trainer.exp1_run_record(config, metrics, task_set, split, args.run_id)
        print(f"exp1 exhaustive accuracy: {metrics.get('exhaustive_accuracy'):.2f}% "
              f"(atomic {metrics.get('atomic_accuracy'):.2f}%, "
              f"composed {metrics.get('composed_accuracy'):.2f}%)")
    else:
        params, record = trainer.train_exp2(config, task_set, split, args.run_id)
        gen = record.generalization_performance
        print(f"{args.variant}: status={record.status} "
              f"generalization={'n/a' if gen is None else f'{gen:.2f}%'}")
    if args.checkpoint:
        opt = config.make_optimizer(params.config)
        net.save_checkpoint(params, opt, {"run_record": record.to_dict()}, args.checkpoint)
        print(f"checkpoint written to {args.checkpoint}")
    if args.out:
        _append_record(args.out, record, asdict(config))
        print(f"run record appended to {args.out}")
    return 0 if record.status == "ok" else 1


def cmd_search(args: argparse.Namespace) -> int:
    config = search.SearchConfig(
        n_runs=args.runs,
        task_set_path=args.tasks,
        master_seed=args.seed,
        workers=args.workers,
        variant=args.variant,
        episodes_phase1=args.episodes_p1,
        episodes_phase2=args.episodes_p2,
        optimizer=args.optimizer,
        lr=args.lr,
        final_output_only=args.final_output_only,
        seed_policy="fixed_init" if (args.fixed_init or args.fixed_init_seed is not None)
                    else "fresh",
        fixed_init_seed=args.fixed_init_seed,
    )
    out = search.run_search(config, args.out)
    agg = search.aggregate(out, bin_width=5.0)
    print(f"{agg.n_scored} runs scored ({agg.n_failed} failed): "
          f"mean {agg.mean:.2f}%, max {agg.max_score:.2f}%, "
          f">80%: {agg.count_above_80}, >90%: {agg.count_above_90}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    params, _opt, _meta = net.load_checkpoint(args.checkpoint)
    task_set, split = load_task_set(args.tasks)
    if args.exhaustive:
        report = evaluation.evaluate_exhaustive(params, task_set, args.final_output_only)
        label = "exhaustive accuracy"
    else:
        report = evaluation.evaluate_zero_shot(
            params, task_set, split, final_output_only=args.final_output_only)
        label = "generalization performance"
    print(f"{label}: {report.generalization_performance:.2f}% "
          f"({report.n_correct}/{len(report.items)})")
    if args.out:
        report.save(args.out)
        print(f"report written to {args.out}")
    return 0


def cmd_baseline(args: argparse.Namespace) -> int:
    task_set, split = load_task_set(args.tasks)
    seed = derive_seed(args.seed, f"baseline/{args.kind}")
    if args.kind == "random_output":
        result = evaluation.baseline_random_output(task_set, split, args.trials, seed)
    else:
        result = evaluation.baseline_random_wellformed(task_set, split, args.trials, seed)
    print(f"{args.kind}: mean generalization {result.mean_performance:.4f}% "
          f"over {result.trials} trials of {result.items_per_trial} items")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    prefix = Path(args.out)
    if args.compare:
        comparison = search.compare_inits(args.results, args.compare, args.bins)
        json_path = comparison.write_json(prefix.with_suffix(".json"))
        svg_path = comparison.write_svg(prefix.with_suffix(".svg"))
        print(f"comparison written to {json_path} and {svg_path}")
        for label, summary in comparison.to_dict().items():
            print(f"  {label}: mean {summary['mean']:.2f}%, "
                  f">80%: {summary['count_above_80']}, >90%: {summary['count_above_90']}")
        return 0
    agg = search.aggregate(args.results, bin_width=args.bins)
    csv_path = agg.write_csv(prefix.with_suffix(".csv"))
    svg_path = agg.write_svg(prefix.with_suffix(".svg"))
    print(f"histogram written to {csv_path} and {svg_path}")
    print(f"mean {agg.mean:.2f}%, median {agg.median:.2f}%, max {agg.max_score:.2f}%, "
          f">80%: {agg.count_above_80}, >90%: {agg.count_above_90}")
    return 0


_COMMANDS = {
    "gen": cmd_gen,
    "oracle": cmd_oracle,
    "train": cmd_train,
    "search": cmd_search,
    "eval": cmd_eval,
    "baseline": cmd_baseline,
    "report": cmd_report,
}


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - one-line diagnostic, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
