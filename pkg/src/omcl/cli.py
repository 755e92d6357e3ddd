"""Command-line entry point: ``omcl <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import fields, replace
from pathlib import Path

from . import data as D
from .metrics import EvalReport, aggregate_trials, curve_csv, format_table, oscr_curve
from .model import CheckpointError, NumericalError, load_checkpoint, loss_gradcheck_suite
from .trainer import (
    SWEEP_AXES,
    TrainConfig,
    evaluate_model,
    export_embeddings,
    load_config,
    load_parts,
    load_splits,
    run_trials,
    selected_splits,
    sweep,
    sweep_csv,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _csv_ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML or JSON file mirroring the training config")
    for f in fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("bool",):
            p.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        elif f.name == "widths":
            p.add_argument(flag, dest=f.name, type=_csv_ints, default=None)
        elif f.type in ("int", "int | None"):
            p.add_argument(flag, dest=f.name, type=int, default=None)
        elif f.type == "float":
            p.add_argument(flag, dest=f.name, type=float, default=None)
        else:
            p.add_argument(flag, dest=f.name, default=None)


def resolve_config(args) -> TrainConfig:
    if args.config:
        if not Path(args.config).is_file():
            raise UsageError(f"config file not found: {args.config}")
        try:
            config = load_config(args.config)
        except ValueError as exc:
            raise UsageError(f"bad config {args.config}: {exc}") from None
    else:
        config = TrainConfig()
    overrides = {f.name: getattr(args, f.name) for f in fields(TrainConfig)
                 if getattr(args, f.name, None) is not None}
    try:
        return replace(config, **overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


class Outputs:
    """Writes artifacts under ``--out`` and keeps a hashed manifest."""

    def __init__(self, out: str | None):
        self.root = Path(out or ".")
        self.root.mkdir(parents=True, exist_ok=True)
        self.files: dict[str, str] = {}

    def path(self, name: str) -> Path:
        return self.root / name

    def write(self, name: str, text: str) -> Path:
        path = self.path(name)
        path.write_text(text)
        return self.record(name)

    def record(self, name: str) -> Path:
        path = self.path(name)
        self.files[name] = hashlib.sha256(path.read_bytes()).hexdigest()
        return path

    def finish(self, command: str) -> None:
        manifest = {"command": command, "files": dict(sorted(self.files.items()))}
        self.path("manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _print_digest(config: TrainConfig) -> None:
    print(f"config-digest: {config.digest()}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_split(args) -> int:
    splits = D.make_splits(args.classes, args.k, args.seed, pinned=args.pin or (), n_known=args.n_known)
    out = Outputs(args.out)
    out.write(args.name, D.splits_to_json(splits, args.dataset or ""))
    out.finish("split")
    for s in splits:
        print(f"trial {s.k}: known={s.known} unknown={s.unknown}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = resolve_config(args)
    _print_digest(config)
    out = Outputs(args.out)
    out.write("config.json", json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    log_lines = []
    results = run_trials(config, out_dir=out.root, on_epoch=lambda e: log_lines.append(json.dumps(e, sort_keys=True)))
    out.write("train_log.jsonl", "\n".join(log_lines) + "\n")
    reports = []
    for record, report in results:
        out.record(f"trial{report.trial}.omcl")
        out.write(f"report_trial{report.trial}.json", report.to_json() + "\n")
        reports.append(report)
    summary = aggregate_trials(reports)
    out.write("summary.json", json.dumps({"mean": summary.mean, "std": summary.std,
                                          "n_trials": summary.n_trials,
                                          "config_digest": summary.config_digest}, indent=2, sort_keys=True) + "\n")
    out.finish("train")
    print(format_table({args.label or "run": summary}))
    return EXIT_OK


def _trial_for(config: TrainConfig, k: int):
    parts = load_parts(config)
    splits = load_splits(config, parts["train"].n_classes)
    split = selected_splits(replace(config, trial=str(k)), splits)[0]
    return parts, split, D.select_trial(parts["train"], parts["test"], split)


def _checkpoint_config(header, args) -> TrainConfig:
    base = header["metadata"].get("config")
    config = TrainConfig.from_dict({k: tuple(v) if k == "widths" else v for k, v in base.items()}) \
        if base else TrainConfig()
    overrides = {f.name: getattr(args, f.name) for f in fields(TrainConfig)
                 if getattr(args, f.name, None) is not None}
    return replace(config, **overrides)


def cmd_eval(args) -> int:
    model, header = load_checkpoint(args.checkpoint)
    config = _checkpoint_config(header, args)
    _print_digest(config)
    _, _, trial = _trial_for(config, header["metadata"].get("trial", 0) if args.k is None else args.k)
    report = evaluate_model(model, trial, config)
    out = Outputs(args.out)
    out.write("report.json", report.to_json() + "\n")
    pred, ks = model.predict(trial.stats.apply(trial.x_known), config.scoring)
    _, us = model.predict(trial.stats.apply(trial.x_unknown), config.scoring)
    out.write("oscr_curve.csv", curve_csv(*oscr_curve(ks, pred == trial.y_known, us)))
    out.finish("eval")
    print(report.to_json())
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = resolve_config(args)
    _print_digest(config)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [None]
    rows = sweep(config, args.axis, args.values.split(","), seeds=seeds, jobs=args.jobs)
    out = Outputs(args.out)
    out.write("sweep.csv", sweep_csv(rows))
    out.finish("sweep")
    print(sweep_csv(rows), end="")
    return EXIT_OK


def cmd_export(args) -> int:
    model, header = load_checkpoint(args.checkpoint)
    config = _checkpoint_config(header, args)
    _print_digest(config)
    parts, split, trial = _trial_for(config, header["metadata"].get("trial", 0))
    out = Outputs(args.out)
    out.write("embeddings.csv", export_embeddings(model, parts["test"], split, trial.stats, args.cap))
    out.finish("export-embeddings")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    worst = loss_gradcheck_suite(args.configs, args.seed, step=args.step, tolerance=args.tolerance)
    for name, err in worst.items():
        print(f"{name:5s} max relative error {err:.3e}")
    return EXIT_OK if all(e < args.tolerance for e in worst.values()) else EXIT_NUMERIC


def cmd_report(args) -> int:
    rows = {}
    for spec in args.runs:
        label, _, pattern = spec.partition("=")
        if not pattern:
            label, pattern = Path(spec).name, spec
        paths = sorted(Path(pattern).glob("report_trial*.json")) if Path(pattern).is_dir() else [Path(pattern)]
        if not paths:
            raise D.DataError(f"no reports under {pattern}")
        rows[label] = aggregate_trials(EvalReport.from_json(p.read_text()) for p in paths)
    table = format_table(rows)
    if args.out:
        out = Outputs(args.out)
        out.write("report.txt", table + "\n")
        out.finish("report")
    print(table)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="omcl", description="Open-set recognition with the open margin cosine loss.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("split", help="generate the K-trial known/unknown split file")
    p.add_argument("--dataset", help="dataset tag stored in the split file")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--seed", type=int, default=2023)
    p.add_argument("--pin", type=int, action="append", help="class id that is always known")
    p.add_argument("--n-known", type=int)
    p.add_argument("--name", default="splits.json")
    p.add_argument("--out")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train every selected trial and evaluate it")
    _add_config_flags(p)
    p.add_argument("--label")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on its trial")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="grid over one hyperparameter")
    _add_config_flags(p)
    p.add_argument("--axis", choices=SWEEP_AXES, required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--seeds", help="comma-separated seeds averaged per value")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-embeddings", help="write test embeddings for external visualization")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cap", type=int, default=200)
    p.add_argument("--out")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss term")
    p.add_argument("--configs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="tabulate stored evaluation reports")
    p.add_argument("runs", nargs="+", help="LABEL=DIR (or a report JSON file)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (D.DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
