"""``ehtune`` command line: pretrain, run, sweep, report.

Exit codes: 0 success, 1 usage or configuration error, 2 training or
runtime failure. Timestamps and wall-clock timings go to ``.meta.json``
sidecars so that every other output is byte-identical across reruns.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError, ContractError, EhtuneError, TrainingError
from .experiment import (
    ExperimentConfig,
    atomic_write,
    dump_json,
    load_backbone,
    load_config,
    pretrain_backbone,
    save_checkpoint,
)
from .optim import split_budget
from .report import RESULT_COLUMNS, aggregate_rows, csv_text, load_records, projection_csv, result_rows, task_charts
from .tasks import TASK_NAMES, make_task
from .trainer import STRATEGIES, aggregate, run_many

logger = logging.getLogger("ehtune")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
SWEEP_AXES = ("stage1_fraction", "lora_rank")
SWEEP_MODES = ("fixed-total", "fixed-stage2")


class UsageError(EhtuneError):
    pass


def _meta(path: Path, **info) -> None:
    info["written_at"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    atomic_write(path.with_name(path.name + ".meta.json"), dump_json(info))


def _record_name(strategy: str, task: str, seed: int) -> str:
    return f"{strategy}__{task}__seed{seed}.json"


def _parse_seeds(text: str | None, cfg: ExperimentConfig) -> list[int]:
    """``N`` means seeds 0..N-1; a comma list names seeds explicitly."""
    if text is None:
        return list(cfg.seeds)
    try:
        if "," in text:
            seeds = [int(s) for s in text.split(",") if s.strip()]
        else:
            seeds = list(range(int(text)))
    except ValueError:
        raise UsageError(f"--seeds must be a count or a comma-separated list, got {text!r}") from None
    if not seeds:
        raise UsageError("--seeds selects no seeds")
    return seeds


def _parse_values(text: str, cast) -> list:
    values = [v.strip() for v in text.split(",") if v.strip()]
    if not values:
        raise UsageError("--values is empty")
    try:
        return [cast(v) for v in values]
    except ValueError:
        raise UsageError(f"--values holds a non-numeric entry: {text!r}") from None


def _backbone_for(args, cfg: ExperimentConfig):
    if args.backbone is None:
        logger.info("no --backbone given; pretraining from the config")
        return pretrain_backbone(cfg).backbone
    return load_backbone(args.backbone, cfg.backbone)


# ---------------------------------------------------------------- commands


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    t0 = time.perf_counter()
    outcome = pretrain_backbone(cfg)
    out = Path(args.out)
    echo = {"backbone": cfg.backbone.to_dict(), "pretrain": cfg.to_dict()["pretrain"], **outcome.summary()}
    save_checkpoint(out, outcome.backbone.params.snapshot(), echo)
    curve = [{"step": i, "loss": float(v)} for i, v in enumerate(outcome.losses)]
    atomic_write(out.with_name(out.name + ".losses.csv"), csv_text(curve, ("step", "loss")))
    _meta(out, seconds=time.perf_counter() - t0)
    print(
        f"pretrained {cfg.pretrain.steps} steps; held-out masked-token loss "
        f"{outcome.heldout_before:.4f} -> {outcome.heldout_after:.4f}; wrote {out}"
    )
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.strategy not in STRATEGIES:
        raise UsageError(f"unknown strategy {args.strategy!r}; valid: {', '.join(STRATEGIES)}")
    if args.task not in TASK_NAMES:
        raise UsageError(f"unknown task {args.task!r}; built-ins: {', '.join(TASK_NAMES)}")
    seeds = _parse_seeds(args.seeds, cfg)
    bb = _backbone_for(args, cfg)
    task = make_task(args.task, cfg.task_seed)
    jobs = [(cfg.plan(args.strategy, args.task, seed=s), bb, task) for s in seeds]
    out = Path(args.out or cfg.output_dir)
    records = run_many(jobs)
    timings = {}
    for rec in records:
        path = out / _record_name(rec.strategy, rec.task, rec.seed)
        atomic_write(path, dump_json({"config": cfg.to_dict(), **rec.to_dict()}))
        timings[str(rec.seed)] = rec.wall_clock
    row = aggregate(records)[0]
    agg_path = out / f"aggregate__{args.strategy}__{args.task}.csv"
    atomic_write(agg_path, csv_text([row | {"seeds": " ".join(map(str, row["seeds"]))}]))
    _meta(agg_path, seconds_per_seed=timings)
    print(f"{args.strategy} on {args.task}: {row['metric_name']} mean {row['mean']:.4f} sd {row['sd']:.4f} over {row['n_seeds']} seeds")
    return EXIT_OK


def sweep_plans(cfg: ExperimentConfig, axis: str, values: list, strategy: str, task: str, mode: str, seeds):
    """Plans for every (value, seed); rows come back in value order."""
    total = cfg.steps_for(task)
    plans = []
    for v in values:
        for s in seeds:
            if axis == "stage1_fraction":
                if not 0 <= v < 1:
                    raise UsageError(f"stage1_fraction values must lie in [0, 1), got {v}")
                if mode == "fixed-total":
                    plan = cfg.plan(strategy, task, seed=s, stage1_fraction=v)
                else:
                    stage2 = split_budget(total, cfg.stage1_fraction)[1]
                    stage1 = split_budget(total, v)[0]
                    plan = cfg.plan(
                        strategy, task, seed=s, total_steps=stage1 + stage2, stage1_fraction=v,
                        stage1_steps_override=stage1,
                    )
            else:
                if int(v) != v or v < 1:
                    raise UsageError(f"lora_rank values must be positive integers, got {v}")
                plan = cfg.plan(strategy, task, seed=s, pet=replace(cfg.pet, lora_rank=int(v)))
            plans.append((v, plan))
    return plans


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    if args.axis not in SWEEP_AXES:
        raise UsageError(f"unknown axis {args.axis!r}; valid: {', '.join(SWEEP_AXES)}")
    values = _parse_values(args.values, float if args.axis == "stage1_fraction" else int)
    strategy = args.strategy or ("eh-ft-lora" if args.axis == "lora_rank" else "eh-ft-bitfit")
    if strategy not in STRATEGIES:
        raise UsageError(f"unknown strategy {strategy!r}; valid: {', '.join(STRATEGIES)}")
    task_name = args.task or cfg.tasks[0]
    if task_name not in TASK_NAMES:
        raise UsageError(f"unknown task {task_name!r}; built-ins: {', '.join(TASK_NAMES)}")
    seeds = _parse_seeds(args.seeds, cfg)
    plans = sweep_plans(cfg, args.axis, values, strategy, task_name, args.mode, seeds)
    bb = _backbone_for(args, cfg)
    task = make_task(task_name, cfg.task_seed)
    records = run_many([(p, bb, task) for _, p in plans])
    out = Path(args.out or cfg.output_dir)
    rows = []
    for v in values:
        recs = [r for (pv, _), r in zip(plans, records) if pv == v]
        metric = np.array([r.final_metric for r in recs], dtype=np.float64)
        rows.append(
            {
                "axis": args.axis,
                "value": v,
                "mode": args.mode if args.axis == "stage1_fraction" else "",
                "strategy": strategy,
                "task": task_name,
                "metric_name": recs[0].metric_name,
                "n_seeds": len(recs),
                "mean": float(metric.mean()),
                "sd": float(metric.std(ddof=1)) if len(metric) > 1 else 0.0,
                "stage1_steps": recs[0].stage1_steps,
                "stage2_steps": recs[0].stage2_steps,
                "trainable_fraction_stage1": recs[0].trainable_fraction.get("stage1"),
            }
        )
        if args.keep_records:
            for r in recs:
                tag = f"{args.axis}={v}"
                atomic_write(out / "records" / tag / _record_name(r.strategy, r.task, r.seed), dump_json(r.to_dict()))
    mode_tag = f"_{args.mode}" if args.axis == "stage1_fraction" else ""
    path = out / f"sweep_{args.axis}{mode_tag}__{strategy}__{task_name}.csv"
    atomic_write(path, csv_text(rows))
    _meta(path, seconds=sum(r.wall_clock for r in records))
    for row in rows:
        print(f"{args.axis}={row['value']}: mean {row['mean']:.4f} sd {row['sd']:.4f}")
    return EXIT_OK


def cmd_report(args) -> int:
    runs = Path(args.runs)
    if not runs.is_dir():
        raise UsageError(f"runs directory not found: {runs}")
    records = load_records(runs)
    if not records:
        raise UsageError(f"no run records under {runs}")
    out = Path(args.out)
    rows = result_rows(records)

    atomic_write(out / "results.csv", csv_text(rows, RESULT_COLUMNS))
    atomic_write(out / "aggregate.csv", csv_text(aggregate_rows(rows)))
    for rec in records:
        text = projection_csv(rec)
        if text is not None:
            atomic_write(out / "projections" / _record_name(rec.strategy, rec.task, rec.seed).replace(".json", ".csv"), text)
    for name, svg in task_charts(records).items():
        atomic_write(out / "charts" / name, svg)
    print(f"{len(records)} records -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ehtune", description="Two-stage head finetuning experiments at desk scale.")
    p.add_argument("--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("pretrain", help="masked-token pretraining; writes a backbone checkpoint")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("run", help="run one strategy on one task over several seeds")
    sp.add_argument("--config", required=True)
    sp.add_argument("--backbone", help="checkpoint from `ehtune pretrain` (pretrains from the config if omitted)")
    sp.add_argument("--strategy", required=True)
    sp.add_argument("--task", required=True)
    sp.add_argument("--seeds", help="seed count N (seeds 0..N-1) or comma list; default from config")
    sp.add_argument("--out", help="output directory (default: config output_dir)")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="ablation over stage-1 fraction or LoRA rank")
    sp.add_argument("--config", required=True)
    sp.add_argument("--axis", required=True, help="|".join(SWEEP_AXES))
    sp.add_argument("--values", required=True, help="comma-separated values")
    sp.add_argument("--backbone")
    sp.add_argument("--strategy", help="default eh-ft-bitfit (fraction) or eh-ft-lora (rank)")
    sp.add_argument("--task", help="default: first task in the config")
    sp.add_argument("--mode", choices=SWEEP_MODES, default="fixed-total")
    sp.add_argument("--seeds")
    sp.add_argument("--out")
    sp.add_argument("--keep-records", action="store_true", help="also write every run record")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("report", help="tables, projections and charts from run records")
    sp.add_argument("--runs", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse exits 2 on usage errors; our contract says 1
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, CheckpointError) as e:
        print(f"ehtune {args.command}: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, ContractError, EhtuneError, FloatingPointError) as e:
        print(f"ehtune {args.command}: training failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
