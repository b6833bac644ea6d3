"""Command-line entry points.

    taskmix generate  --out data/bench --set data.num_tasks=20
    taskmix train     --data data/bench --out runs/full --seeds 0,1,2
    taskmix baseline  --data data/bench --all --out runs/base
    taskmix ablate    --data data/bench --out runs/ablation --seeds 0,1
    taskmix finetune  --data data/bench --task 19 --checkpoint runs/full/seed0/model.npz
    taskmix report    --run runs/full/seed0
    taskmix report    --compare runs/full/seed0 runs/base/seed0

Exit codes: 0 success, 2 configuration problems, 3 data problems,
4 training diverged. Runs write metrics.jsonl, report.json, model.npz,
and the resolved config; `report` turns those into CSV and PNG files.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .config import ExperimentConfig, dataset_fingerprint
from .data import export, generate, ingest
from .errors import (
    CheckpointError,
    ConfigurationError,
    DataError,
    IngestionError,
    TaskmixError,
)
from .evaluation import MetricReport, compare
from .reporting import (
    read_metrics,
    render_run_dir,
    save_schedule_curves,
    save_size_histogram,
    save_training_curves,
    write_comparison_files,
)
from .training import finetune, make_run, train, train_baseline

REPORT_NAME = "report.json"


def out_root() -> str:
    return os.environ.get("TASKMIX_OUT_ROOT", "runs")


def _load_config(args) -> ExperimentConfig:
    cfg = (ExperimentConfig.from_file(args.config) if args.config
           else ExperimentConfig())
    return cfg.apply_overrides(args.set or [])


def _load_dataset(args, cfg: ExperimentConfig):
    if getattr(args, "data", None):
        return ingest(args.data)
    return generate(cfg.resolve().gen)


def _seed_list(text: str):
    try:
        return [int(s) for s in text.split(",") if s.strip() != ""]
    except ValueError:
        raise ConfigurationError(f"bad seed list {text!r}") from None


def _write_report(out_dir: str, result, cfg_fingerprint: str, label: str, seed: int):
    payload = {
        "fingerprint": cfg_fingerprint,
        "label": label,
        "seed": seed,
        "status": result.status,
        "report": dataclasses.asdict(result.report) if result.report else None,
    }
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, REPORT_NAME), "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
        f.write("\n")
    return payload


def _read_report(run_dir: str):
    path = os.path.join(run_dir, REPORT_NAME)
    if not os.path.exists(path):
        raise DataError(f"{run_dir} has no {REPORT_NAME}; train there first")
    with open(path) as f:
        payload = json.load(f)
    if payload.get("report") is None:
        raise DataError(f"{run_dir} recorded a diverged run; nothing to compare")
    return payload


def _print_result(label: str, seed: int, result):
    if result.report is None:
        print(f"{label} seed {seed}: {result.status}")
        return
    r = result.report
    print(f"{label} seed {seed}: {result.status}  "
          f"mean {r.mean_acc:.4f}  t10 {r.t10_acc:.4f}  b10 {r.b10_acc:.4f}")


def _print_aggregate(label: str, reports):
    if len(reports) < 2:
        return
    for key in ("mean_acc", "t10_acc", "b10_acc"):
        vals = [getattr(r, key) for r in reports]
        print(f"{label} {key}: {np.mean(vals):.4f} +/- {np.std(vals):.4f} "
              f"over {len(vals)} seeds")


def _train_job(values, seed, dataset_dir, out_dir, fingerprint):
    """One seeded run; top level so process pools can pick it up."""
    cfg = ExperimentConfig(values)
    cfg.values["run"]["seed"] = seed
    resolved = cfg.resolve()
    dataset = ingest(dataset_dir) if dataset_dir else generate(resolved.gen)
    result = train(make_run(dataset, resolved.settings, out_dir=out_dir,
                            fingerprint=fingerprint))
    _write_report(out_dir, result, fingerprint, resolved.label, seed)
    cfg.save(os.path.join(out_dir, "config.ini"))
    return result


def _run_seeds(cfg, args, arm_overrides=None, label=None):
    """Train each seed (parallel when --jobs > 1); returns results by seed."""
    work = ExperimentConfig(cfg.values)
    if arm_overrides:
        work.apply_overrides(arm_overrides)
    label = label or work.values["run"]["label"]
    seeds = _seed_list(args.seeds)
    base_out = args.out or os.path.join(out_root(), label)
    fingerprint = work.fingerprint(args.data if args.data else None)
    jobs = []
    for seed in seeds:
        out_dir = os.path.join(base_out, f"seed{seed}")
        jobs.append((work.values, seed, args.data, out_dir, fingerprint))

    results = {}
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(_train_job, *job) for job in jobs]
            for seed, fut in zip(seeds, futures):
                results[seed] = fut.result()
    else:
        for job in jobs:
            results[job[1]] = _train_job(*job)
    for seed in seeds:
        _print_result(label, seed, results[seed])
    _print_aggregate(label, [r.report for r in results.values() if r.report])
    return results, base_out


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    dataset = generate(cfg.resolve().gen)
    export(dataset, args.out)
    fp = dataset_fingerprint(args.out)
    sizes = dataset.train_sizes()
    print(f"wrote {dataset.num_tasks} tasks to {args.out} (fingerprint {fp})")
    print(f"train examples: total {int(sizes.sum())}, "
          f"median {int(np.median(sizes))}, min {int(sizes.min())}, "
          f"max {int(sizes.max())}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    results, _ = _run_seeds(cfg, args)
    return 4 if any(r.status == "diverged" for r in results.values()) else 0


def cmd_baseline(args) -> int:
    cfg = _load_config(args)
    dataset = _load_dataset(args, cfg)
    resolved = cfg.resolve()
    if args.task is None and not args.all:
        raise ConfigurationError("baseline needs --task N or --all")
    task_ids = ([t.task_id for t in dataset.tasks] if args.all else [args.task])
    base_out = args.out or os.path.join(out_root(), f"{resolved.label}-baseline")
    fingerprint = cfg.fingerprint(args.data if args.data else None)
    diverged = False
    for seed in _seed_list(args.seeds):
        per_task = {}
        for tid in task_ids:
            single = dataclasses.replace(resolved.settings, seed=seed, dypa=None)
            out_dir = os.path.join(base_out, f"seed{seed}", f"task{tid:03d}")
            result = train_baseline(dataset, tid, single, out_dir=out_dir)
            _write_report(out_dir, result, fingerprint,
                          f"{resolved.label}-task{tid}", seed)
            if result.report is None:
                diverged = True
                print(f"task {tid} seed {seed}: {result.status}")
                continue
            name, cell = next(iter(result.report.per_task.items()))
            per_task[name] = cell["accuracy"]
            print(f"task {tid} seed {seed}: acc {cell['accuracy']:.4f} "
                  f"(n={cell['train_count']})")
        if per_task:
            print(f"seed {seed} baseline mean over {len(per_task)} tasks: "
                  f"{np.mean(list(per_task.values())):.4f}")
    return 4 if diverged else 0


# vanilla keeps the conventional mix-everything default: data-size sampling,
# one fixed head width. The other arms add decay, then quartile sizing.
ABLATION_ARMS = (
    ("vanilla", ["sampler.kind=constant", "sampler.alpha_start=1.0",
                 "sampler.alpha_end=1.0", "dypa.enabled=false"]),
    ("decay", ["dypa.enabled=false"]),
    ("full", []),
)


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    base_out = args.out or os.path.join(out_root(),
                                        cfg.values["run"]["label"] + "-ablation")
    rows_by_arm = {}
    diverged = False
    for arm, overrides in ABLATION_ARMS:
        arm_args = argparse.Namespace(**vars(args))
        arm_args.out = os.path.join(base_out, arm)
        results, _ = _run_seeds(cfg, arm_args, arm_overrides=overrides, label=arm)
        reports = [r.report for r in results.values() if r.report]
        diverged = diverged or any(r.status == "diverged" for r in results.values())
        if reports:
            rows_by_arm[arm] = _mean_report(reports)
    if len(rows_by_arm) >= 2:
        comp = compare(list(rows_by_arm.values()), labels=list(rows_by_arm))
        print()
        print(comp.to_text())
        paths = write_comparison_files(comp, base_out, stem="ablation")
        print("wrote " + ", ".join(paths))
    return 4 if diverged else 0


def _mean_report(reports) -> MetricReport:
    """Average per-task accuracies across seeds into one report."""
    first = reports[0]
    per_task = {}
    for name, cell in first.per_task.items():
        accs = [r.per_task[name]["accuracy"] for r in reports]
        per_task[name] = {**cell, "accuracy": float(np.mean(accs))}
    agg = {
        key: float(np.mean([getattr(r, key) for r in reports]))
        for key in ("mean_acc", "t10_acc", "b10_acc")
    }
    return MetricReport(per_task=per_task, t10_names=first.t10_names,
                        b10_names=first.b10_names, n10=first.n10,
                        fingerprint=first.fingerprint, **agg)


def cmd_finetune(args) -> int:
    cfg = _load_config(args)
    dataset = _load_dataset(args, cfg)
    resolved = cfg.resolve()
    diverged = False
    for seed in _seed_list(args.seeds):
        settings = dataclasses.replace(resolved.settings, seed=seed)
        out_dir = None
        if args.out:
            out_dir = os.path.join(args.out, f"seed{seed}")
        result = finetune(dataset, args.task, settings,
                          checkpoint_path=args.checkpoint,
                          epochs=args.epochs, out_dir=out_dir)
        origin = "warm" if args.checkpoint else "cold"
        _print_result(f"finetune task {args.task} ({origin})", seed, result)
        diverged = diverged or result.status == "diverged"
    return 4 if diverged else 0


def cmd_report(args) -> int:
    written = []
    if args.compare:
        payloads = [_read_report(d) for d in args.compare]
        reports = [MetricReport(**p["report"]) for p in payloads]
        labels = []
        for p in payloads:
            label = f"{p['label']}-seed{p['seed']}"
            labels.append(label if label not in labels else f"{label}b")
        comp = compare(reports, labels=labels)
        print(comp.to_text())
        written += write_comparison_files(comp, args.out or args.compare[0])
    if args.run:
        written += render_run_dir(args.run)
        metrics_path = os.path.join(args.run, "metrics.jsonl")
        if os.path.exists(metrics_path):
            rows = read_metrics(metrics_path)
            csv_path = os.path.join(args.run, "metrics.csv")
            keys = ["iteration", "epoch_fraction", "alpha", "lr", "loss",
                    "mean_acc", "t10_acc", "b10_acc"]
            with open(csv_path, "w") as f:
                f.write(",".join(keys) + "\n")
                for row in rows:
                    f.write(",".join("" if row.get(k) is None else repr(row[k])
                                     for k in keys) + "\n")
            written.append(csv_path)
    if args.dataset:
        ds = ingest(args.dataset)
        out = args.out or args.dataset
        os.makedirs(out, exist_ok=True)
        written.append(save_size_histogram(ds, os.path.join(out, "sizes.png")))
    if args.schedules:
        out = args.out or "."
        os.makedirs(out, exist_ok=True)
        written.append(save_schedule_curves(os.path.join(out, "schedules.png")))
    if not written:
        raise ConfigurationError(
            "report needs at least one of --run/--compare/--dataset/--schedules"
        )
    for path in written:
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="taskmix",
        description="Many-task training engine with proportional task "
                    "sampling, alpha decay, and per-task heads.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, seeds=True):
        p.add_argument("--config", help="INI config file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")
        p.add_argument("--out", help="output directory")
        if data:
            p.add_argument("--data", help="dataset directory (else generated "
                                          "from config)")
        if seeds:
            p.add_argument("--seeds", default="0", help="comma-separated")
            p.add_argument("--jobs", type=int, default=1,
                           help="parallel seed workers")

    p = sub.add_parser("generate", help="write a dataset to disk")
    common(p, data=False, seeds=False)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="joint training over all tasks")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("baseline", help="per-task single-task runs")
    common(p)
    p.add_argument("--task", type=int)
    p.add_argument("--all", action="store_true", help="every task in turn")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("ablate", help="vanilla / decay / full grid")
    common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("finetune", help="adapt one task from a checkpoint")
    common(p)
    p.add_argument("--task", type=int, required=True)
    p.add_argument("--checkpoint", help="warm start; omit for random init")
    p.add_argument("--epochs", type=int, default=10)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("report", help="figures and CSV from finished runs")
    p.add_argument("--run", help="run directory with metrics.jsonl")
    p.add_argument("--compare", nargs="+", metavar="RUN_DIR",
                   help="run directories to tabulate against each other")
    p.add_argument("--dataset", help="dataset directory for a size histogram")
    p.add_argument("--schedules", action="store_true",
                   help="draw the alpha schedule shapes")
    p.add_argument("--out", help="where to put the files")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "generate" and not args.out:
        print("error: generate needs --out", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, IngestionError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except TaskmixError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
