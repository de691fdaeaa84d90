"""Command-line experiment runner.

    aflora train <config>
    aflora compare <config>
    aflora ablate {score-variant,placement,pairing} <config>
    aflora heatmap <run-dir>

Exit codes: 0 success, 2 bad config or usage, 3 infeasible freezing schedule,
4 runtime failure. ``AFLORA_OUTPUT_ROOT`` relocates relative output directories.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import accounting, reporting
from .adapters import MATRICES, SITES, AdapterMode, site_group
from .config import ExperimentConfig, load
from .errors import ConfigError, ScheduleError
from .freezing import Pairing, ScoreVariant
from .model import build_model
from .tasks import Dataset, generate_task, load_csv_dataset
from .tensor import SeededRng
from .trainer import ExperimentReport, build_schedule, train

log = logging.getLogger("aflora")

EXIT_OK, EXIT_CONFIG, EXIT_SCHEDULE, EXIT_RUNTIME = 0, 2, 3, 4
OUTPUT_ROOT_ENV = "AFLORA_OUTPUT_ROOT"
RUN_ARTIFACTS = ("report.json", "steps.csv", "freeze_events.csv", "heatmap.csv", "checkpoint.json")

ABLATIONS = {
    "score-variant": [(v.value, {"train": {"score_variant": v}}) for v in ScoreVariant],
    "placement": [
        ("ffn", {"model": {"pm_trainable_sites": ("ffn",)}}),
        ("attn", {"model": {"pm_trainable_sites": ("attention",)}}),
        ("both", {"model": {"pm_trainable_sites": ("attention", "ffn")}}),
    ],
    "pairing": [(p.value, {"train": {"pairing": p}}) for p in Pairing],
}


class UsageError(ConfigError):
    pass


def resolve_output(config: ExperimentConfig) -> Path:
    out = Path(config.output_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


def load_datasets(config: ExperimentConfig, base: Path | None = None) -> tuple[Dataset, Dataset | None]:
    if config.task == "csv":
        base = base or Path.cwd()
        vocab, seq = config.model.vocab_size, config.seq_len
        train_set = load_csv_dataset(base / config.train_csv, vocab, seq)
        eval_set = load_csv_dataset(base / config.eval_csv, vocab, seq) if config.eval_csv else None
        return train_set, eval_set
    return generate_task(config.synthetic_task())


def with_overrides(config: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    model = dataclasses.replace(config.model, **overrides.get("model", {}))
    train_cfg = dataclasses.replace(config.train, **overrides.get("train", {}))
    return dataclasses.replace(config, model=model, train=train_cfg, **overrides.get("run", {}))


def check_schedule(config: ExperimentConfig, n_train: int) -> None:
    """Raise :class:`ScheduleError` when an AFLoRA run has no freezing window."""
    if config.model.mode is not AdapterMode.AFLORA or not config.model.pm_trainable_sites:
        return
    steps_per_epoch = math.ceil(n_train / config.train.batch_size)
    build_schedule(config.train, steps_per_epoch)


def heatmap_for(mode: AdapterMode, pm_sites, n_blocks: int, events) -> tuple[list[str], list[list[int]]]:
    """Rebuild the freeze-step grid from a run's mode and freeze events."""
    steps: dict = {}
    for block in range(n_blocks):
        for site in SITES:
            eligible = mode is AdapterMode.AFLORA and site_group(site) in pm_sites
            for matrix in MATRICES:
                if mode is AdapterMode.ELORA or (mode is AdapterMode.AFLORA and not eligible):
                    steps[(block, site, matrix)] = 0
    for e in events:
        steps[(e.block, e.site, e.matrix)] = e.step
    rows = accounting.heatmap_rows(pm_sites if mode is AdapterMode.AFLORA else ())
    return accounting.freeze_heatmap(steps, n_blocks, rows)


def execute_run(config: ExperimentConfig, out_dir: Path, seed: int, base: Path | None = None) -> ExperimentReport:
    """Train one seed and write the five run artifacts into ``out_dir``."""
    train_set, eval_set = load_datasets(config, base)
    check_schedule(config, len(train_set))
    train_cfg = dataclasses.replace(config.train, seed=seed)
    model = build_model(config.model, SeededRng(seed))
    report = train(model, train_set, train_cfg, eval_set)
    digest = config.config_hash()
    report.config_hash = digest

    out_dir.mkdir(parents=True, exist_ok=True)
    extra = {
        "model_config": config.model.to_dict(),
        "train_config": train_cfg.to_dict(),
        "task": config.task,
        "artifacts": list(RUN_ARTIFACTS),
    }
    reporting.write_report(out_dir / "report.json", report, extra)
    reporting.write_steps(out_dir / "steps.csv", report.records, digest)
    reporting.write_freeze_events(out_dir / "freeze_events.csv", report.freeze_events, digest)
    labels, grid = accounting.freeze_heatmap(
        accounting.model_freeze_steps(model),
        config.model.n_blocks,
        accounting.heatmap_rows(config.model.pm_trainable_sites if config.model.mode is AdapterMode.AFLORA else ()),
    )
    reporting.write_heatmap(out_dir / "heatmap.csv", labels, grid, digest)
    reporting.save_checkpoint(out_dir / "checkpoint.json", model, digest)
    return report


def _timed_run(args) -> tuple[ExperimentReport, float]:
    config, out_dir, seed, base = args
    start = time.perf_counter()
    report = execute_run(config, out_dir, seed, base)
    return report, time.perf_counter() - start


def _run_arms(arms, jobs: int):
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_timed_run, arms))
    return [_timed_run(a) for a in arms]


def run_train(config: ExperimentConfig, base: Path | None = None) -> list[ExperimentReport]:
    out = resolve_output(config)
    reports = []
    for seed in config.seeds:
        target = out if len(config.seeds) == 1 else out / f"seed-{seed}"
        report = execute_run(config, target, seed, base)
        log.info("seed %d: train acc %.4f, avg trainable %.1f -> %s", seed, report.train_accuracy,
                 report.avg_trainable_params, target)
        reports.append(report)
    return reports


def run_compare(config: ExperimentConfig, base: Path | None = None, jobs: int = 1) -> list[dict]:
    if len(config.compare) < 2:
        raise UsageError("compare needs at least two mode:rank arms in the 'compare' key")
    out = resolve_output(config)
    arms, labels = [], []
    for mode, rank in config.compare:
        label = f"{mode}-r{rank}"
        arm_cfg = with_overrides(config, {"model": {"mode": AdapterMode(mode), "rank": rank}})
        train_set, _ = load_datasets(arm_cfg, base)
        check_schedule(arm_cfg, len(train_set))
        arms.append((arm_cfg, out / "compare" / label, config.seeds[0], base))
        labels.append(label)
    rows = []
    for label, (report, seconds) in zip(labels, _run_arms(arms, jobs)):
        rows.append(
            {
                "method": label,
                "avg_params": report.avg_trainable_params,
                "total_flops": report.total_adapter_flops,
                "wall_seconds": seconds,
            }
        )
    rows = accounting.normalize(rows)
    out.mkdir(parents=True, exist_ok=True)
    reporting.write_table(out / "compare.csv", reporting.COMPARE_COLUMNS, rows, config.config_hash())
    return rows


ABLATION_COLUMNS = ["arm", "train_accuracy", "eval_accuracy", "avg_params", "total_flops", "n_freeze_events"]


def run_ablation(kind: str, config: ExperimentConfig, base: Path | None = None, jobs: int = 1) -> dict:
    if kind not in ABLATIONS:
        raise UsageError(f"unknown ablation {kind!r}; expected one of {', '.join(ABLATIONS)}")
    out = resolve_output(config) / f"ablate-{kind}"
    arms, labels = [], []
    for label, overrides in ABLATIONS[kind]:
        overrides = {**overrides, "model": {"mode": AdapterMode.AFLORA, **overrides.get("model", {})}}
        arm_cfg = with_overrides(config, overrides)
        train_set, _ = load_datasets(arm_cfg, base)
        check_schedule(arm_cfg, len(train_set))
        arms.append((arm_cfg, out / label, config.seeds[0], base))
        labels.append(label)
    results = dict(zip(labels, (r for r, _ in _run_arms(arms, jobs))))
    rows = [
        {
            "arm": label,
            "train_accuracy": r.train_accuracy,
            "eval_accuracy": r.eval_accuracy,
            "avg_params": r.avg_trainable_params,
            "total_flops": r.total_adapter_flops,
            "n_freeze_events": len(r.freeze_events),
        }
        for label, r in results.items()
    ]
    out.mkdir(parents=True, exist_ok=True)
    reporting.write_table(out / "ablation.csv", ABLATION_COLUMNS, rows, config.config_hash())
    return results


def run_heatmap(run_dir: Path) -> tuple[list[str], list[list[int]]]:
    summary = json.loads((run_dir / "report.json").read_text(encoding="utf-8"))
    model_cfg = summary["model_config"]
    events = reporting.read_freeze_events(run_dir / "freeze_events.csv")
    labels, grid = heatmap_for(
        AdapterMode(model_cfg["mode"]), tuple(model_cfg["pm_trainable_sites"]), model_cfg["n_blocks"], events
    )
    reporting.write_heatmap(run_dir / "heatmap.csv", labels, grid, summary.get("config_hash"))
    return labels, grid


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aflora", description="Adaptive-freezing low-rank adapter experiments")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("config", type=Path)

    p = sub.add_parser("compare", help="run each mode:rank arm and write compare.csv")
    p.add_argument("config", type=Path)
    p.add_argument("--jobs", type=int, default=1, help="run arms in parallel processes")

    p = sub.add_parser("ablate", help="run an ablation study")
    p.add_argument("kind", choices=sorted(ABLATIONS))
    p.add_argument("config", type=Path)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("heatmap", help="rebuild heatmap.csv of a finished run")
    p.add_argument("run_dir", type=Path)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "heatmap":
            labels, grid = run_heatmap(args.run_dir)
            for label, row in zip(labels, grid):
                print(label, *row, sep="\t")
            return EXIT_OK
        config = load(args.config)
        base = args.config.parent
        if args.command == "train":
            run_train(config, base)
        elif args.command == "compare":
            for row in run_compare(config, base, args.jobs):
                print(f"{row['method']:>12}  params {row['avg_params']:>10.1f}  "
                      f"flops x{row['normalized_flops']:.3f}  params x{row['normalized_params']:.3f}")
        else:
            run_ablation(args.kind, config, base, args.jobs)
    except ScheduleError as exc:
        print(f"aflora: infeasible schedule: {exc}", file=sys.stderr)
        return EXIT_SCHEDULE
    except ConfigError as exc:
        where = f"{args.config}: " if hasattr(args, "config") else ""
        print(f"aflora: {where}{exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"aflora: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - exit-code taxonomy
        log.debug("runtime failure", exc_info=True)
        print(f"aflora: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
