"""Command-line entry point: prepare, train, predict, evaluate, report.

Exit codes: 0 success, 2 input error, 3 runtime/training failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

from .augment import augment_dataset
from .balance import UnbalanceableClassError, balance_dataset
from .config import PRESETS, ConfigError, TrainConfig, default_config, derive_seed, preset_config
from .evaluate import (
    PUBLISHED_RUNS,
    CoverageError,
    MetricsReport,
    decode,
    predictions_from_scores,
    read_predictions,
    render_report_table,
    render_runs_table,
    weighted_f1,
    write_predictions,
)
from .manifest import (
    TASK3_PLACEHOLDER,
    TASK_IDS,
    ManifestError,
    builtin_task_spec,
    label_counts,
    load_manifest,
    write_manifest,
)
from .model import BACKBONES, ModelConfig, WeightsUnavailableError

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 2, 3


class InputError(ValueError):
    pass


class VocabularyMismatchError(InputError):
    pass


@dataclass
class RunManifestEntry:
    run_name: str
    task_id: str
    backbone: str
    config_path: str
    checkpoint_path: str
    created_at: str


GLOBAL_DEFAULTS = {"task": None, "task3_label": TASK3_PLACEHOLDER, "seed": None, "workspace": Path("."), "verbose": False}


def _common(suppress: bool) -> argparse.ArgumentParser:
    # the subcommand copies use SUPPRESS so they don't clobber values given before the subcommand
    common = argparse.ArgumentParser(add_help=False)
    d = (lambda key: argparse.SUPPRESS) if suppress else GLOBAL_DEFAULTS.get
    common.add_argument("--task", choices=TASK_IDS, default=d("task"), help="task id")
    common.add_argument("--task3-label", default=d("task3_label"), help="name of the eleventh task3 label")
    common.add_argument("--seed", type=int, default=d("seed"), help="master seed (derives all random streams)")
    common.add_argument("--workspace", type=Path, default=d("workspace"), help="workspace directory")
    common.add_argument("-v", "--verbose", action="store_true", default=d("verbose"))
    return common


def _pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--balance", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--balance-seed", type=int)
    p.add_argument("--balance-cap", type=float, help="max copies per original record")
    p.add_argument("--balance-target", choices=["match_max", "match_median"])
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--aug-copies", type=int)
    p.add_argument("--aug-seed", type=int)
    p.add_argument("--dev-fraction", type=float)


def build_parser() -> argparse.ArgumentParser:
    common = _common(suppress=True)
    parser = argparse.ArgumentParser(prog="disaster-vsa", description=__doc__, parents=[_common(suppress=False)])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[common], help="summarize balancing/augmentation for a manifest")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--dev-manifest", type=Path)
    p.add_argument("--dry-run", action="store_true", help="print the summary without writing anything")
    p.add_argument("--out", type=Path, help="output directory (default WORKSPACE/prepared/TASK)")
    _pipeline_flags(p)

    p = sub.add_parser("train", parents=[common], help="fine-tune a model")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--config", type=Path, help="JSON training config")
    src.add_argument("--preset", choices=sorted(PRESETS), help="run1 = inception_v3, run2 = vgg19")
    p.add_argument("--train-manifest", type=Path)
    p.add_argument("--dev-manifest", type=Path)
    p.add_argument("--name", help="run name (default derived from preset/backbone and task)")
    p.add_argument("--backbone", choices=sorted(BACKBONES))
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--pretrained", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--freeze-backbone", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--config-only", action="store_true", help="write config.json and stop")
    _pipeline_flags(p)

    p = sub.add_parser("predict", parents=[common], help="score a manifest with a checkpoint")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--threshold", type=float, help="multi-label decision threshold (default from checkpoint)")
    p.add_argument("--fallback-top1", action="store_true", help="force the top label into empty predictions")
    p.add_argument("--batch-size", type=int)

    p = sub.add_parser("evaluate", parents=[common], help="weighted F1 of a predictions file")
    p.add_argument("--truth", required=True, type=Path)
    p.add_argument("--predictions", required=True, type=Path)
    p.add_argument("--out", type=Path, help="metrics JSON path (default next to the predictions)")
    p.add_argument("--run-name", default="run")
    p.add_argument("--threshold", type=float, help="re-decode multi-label scores at this threshold")

    p = sub.add_parser("report", parents=[common], help="render a runs x tasks weighted-F1 table")
    p.add_argument("--published", choices=sorted(PUBLISHED_RUNS), help="render the published dev/test numbers")
    p.add_argument("--runs", type=Path, help='JSON file {"runs": [{run, task, weighted_f1}, ...]}')
    p.add_argument("--metrics", action="append", default=[], metavar="RUN=PATH", help="metrics report to include")
    p.add_argument("--out", type=Path, help="write the collected runs JSON here")
    return parser


def _task_spec(args: argparse.Namespace, required: bool = True):
    if args.task is None:
        if required:
            raise InputError("--task is required for this command")
        return None
    return builtin_task_spec(args.task, args.task3_label)


def _apply_pipeline_flags(cfg: TrainConfig, args: argparse.Namespace) -> TrainConfig:
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    bal, aug = cfg.balance, cfg.augment
    if args.balance is not None:
        bal = replace(bal, enabled=args.balance)
    if args.balance_seed is not None:
        bal = replace(bal, seed=args.balance_seed)
    if args.balance_cap is not None:
        bal = replace(bal, max_replication_factor=args.balance_cap)
    if args.balance_target is not None:
        bal = replace(bal, target=args.balance_target)
    if args.augment is not None:
        aug = replace(aug, enabled=args.augment)
    if args.aug_copies is not None:
        aug = replace(aug, copies_per_record=args.aug_copies)
    if args.aug_seed is not None:
        aug = replace(aug, seed=args.aug_seed)
    cfg = replace(cfg, balance=bal, augment=aug)
    if args.dev_fraction is not None:
        cfg = replace(cfg, dev_fraction=args.dev_fraction)
    return cfg


def cmd_prepare(args: argparse.Namespace) -> int:
    spec = _task_spec(args)
    cfg = _apply_pipeline_flags(default_config(spec, "toy", seed=0), args)
    from .train import stratified_split

    loaded = load_manifest(args.manifest, spec, "train")
    train_ds, dev = loaded, None
    if args.dev_manifest is not None:
        dev = load_manifest(args.dev_manifest, spec, "dev")
    elif cfg.dev_fraction > 0:
        train_ds, dev = stratified_split(loaded, cfg.dev_fraction, derive_seed(cfg.seed, "split"))
    balanced = balance_dataset(train_ds, cfg.balance)
    report = augment_dataset(balanced, cfg.augment)
    summary = {
        "task": spec.task_id,
        "manifest": str(args.manifest),
        "split_sizes": {"train": len(train_ds), "dev": len(dev) if dev is not None else 0},
        "counts_before": label_counts(train_ds),
        "counts_after_balance": label_counts(balanced),
        "balance": asdict(cfg.balance),
        "augmentation": {
            **asdict(cfg.augment),
            "rotation_degrees": list(cfg.augment.rotation_degrees),
            "planned_variants": len(report.dataset) - len(balanced),
            "records_after_augment": len(report.dataset),
        },
        "counts_after_augment": label_counts(report.dataset),
        "skipped": [asdict(s) for s in report.skipped],
    }
    print(json.dumps(summary, indent=2))
    if not args.dry_run:
        out = args.out or args.workspace / "prepared" / spec.task_id
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
        write_manifest(balanced, out / "train_balanced.csv")
        if dev is not None:
            write_manifest(dev, out / "dev.csv")
    return EXIT_OK


def _unique_run_name(workspace: Path, base: str, explicit: bool) -> str:
    runs = workspace / "run"
    if not (runs / base).exists():
        return base
    if explicit:
        raise InputError(f"run name {base!r} already exists in {runs}")
    i = 2
    while (runs / f"{base}-{i}").exists():
        i += 1
    return f"{base}-{i}"


def _register_run(workspace: Path, entry: RunManifestEntry) -> None:
    registry = workspace / "runs.jsonl"
    with registry.open("a", encoding="utf-8") as fh:
        fh.write(json.dumps(asdict(entry)) + "\n")


def _train_config(args: argparse.Namespace) -> TrainConfig:
    if args.config is not None:
        cfg = TrainConfig.load(args.config)
        if args.task is not None and args.task != cfg.task.task_id:
            raise InputError(f"--task {args.task} conflicts with config task {cfg.task.task_id}")
    else:
        spec = _task_spec(args)
        if args.preset is not None:
            cfg = preset_config(args.preset, spec.task_id, seed=0, extra_label=args.task3_label)
        else:
            cfg = default_config(spec, args.backbone or "inception_v3", seed=0)
    if args.backbone is not None and args.backbone != cfg.model.backbone:
        cfg = replace(cfg, model=ModelConfig.for_task(cfg.task, args.backbone, freeze_backbone=cfg.model.freeze_backbone))
    model = cfg.model
    if args.pretrained is not None:
        model = replace(model, pretrained=args.pretrained)
    if args.freeze_backbone is not None:
        model = replace(model, freeze_backbone=args.freeze_backbone)
    cfg = replace(cfg, model=model)
    for flag, attr in (("epochs", "epochs"), ("lr", "learning_rate"), ("batch_size", "batch_size"),
                       ("threshold", "threshold"), ("deterministic", "deterministic")):
        value = getattr(args, flag)
        if value is not None:
            cfg = replace(cfg, **{attr: value})
    return _apply_pipeline_flags(cfg, args)


def cmd_train(args: argparse.Namespace) -> int:
    from .train import train

    cfg = _train_config(args)
    base = args.name or f"{args.preset or cfg.model.backbone}-{cfg.task.task_id}"
    name = _unique_run_name(args.workspace, base, explicit=args.name is not None)
    run_dir = args.workspace / "run" / name
    if args.config_only:
        cfg.save(run_dir / "config.json")
        print(run_dir)
        return EXIT_OK
    if args.train_manifest is None:
        raise InputError("--train-manifest is required unless --config-only is given")
    artifacts = train(cfg, args.train_manifest, args.dev_manifest, run_dir)
    _register_run(
        args.workspace,
        RunManifestEntry(
            run_name=name,
            task_id=cfg.task.task_id,
            backbone=cfg.model.backbone,
            config_path=str(run_dir / "config.json"),
            checkpoint_path=str(artifacts.best_checkpoint),
            created_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
        ),
    )
    print(f"run: {run_dir}")
    print(f"best epoch: {artifacts.best_epoch}; final train weighted F1: {artifacts.train_report.weighted_f1:.3f}")
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    from .train import checkpoint_task, dataset_for, load_checkpoint, predict_scores

    model, meta = load_checkpoint(args.checkpoint)
    spec = checkpoint_task(meta)
    requested = _task_spec(args, required=False)
    if requested is not None and requested != spec:
        raise VocabularyMismatchError(f"checkpoint is for {spec.task_id} {list(spec.labels)}, not {args.task}")
    if not args.manifest.is_file():
        raise ManifestError(f"manifest not found: {args.manifest}")
    try:
        ds = load_manifest(args.manifest, spec, "test", labeled=False)
    except ManifestError as exc:
        raise VocabularyMismatchError(f"manifest does not match the {spec.task_id} checkpoint vocabulary: {exc}") from exc
    threshold = args.threshold if args.threshold is not None else meta["threshold"]
    scores = predict_scores(model, dataset_for(ds, meta), args.batch_size or meta["batch_size"])
    preds = predictions_from_scores(
        [r.image_path for r in ds.records], scores.tolist(), spec, threshold, args.fallback_top1
    )
    write_predictions(preds, spec, args.out)
    print(f"wrote {len(preds)} predictions to {args.out}")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    spec = _task_spec(args)
    truth = load_manifest(args.truth, spec, "test")
    preds = read_predictions(args.predictions, spec)
    threshold = None
    if args.threshold is not None and spec.is_multi_label:
        threshold = args.threshold
        preds = [replace(p, decoded=decode(p.scores, spec, threshold)) for p in preds]
    report = weighted_f1(truth, preds, threshold)
    out = args.out or args.predictions.with_suffix(".metrics.json")
    report.save(out)
    print(render_report_table(report, args.run_name))
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    runs: list[dict] = []
    if args.published:
        runs.extend(PUBLISHED_RUNS[args.published])
    if args.runs:
        payload = json.loads(args.runs.read_text(encoding="utf-8"))
        runs.extend(payload["runs"])
    for item in args.metrics:
        name, sep, path = item.partition("=")
        if not sep:
            raise InputError(f"--metrics expects RUN=PATH, got {item!r}")
        report = MetricsReport.load(path)
        runs.append({"run": name, "task": report.task_id, "weighted_f1": report.weighted_f1})
    if not runs:
        raise InputError("nothing to report: pass --published, --runs or --metrics")
    print(render_runs_table(runs))
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps({"runs": runs}, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    from .train import ImageDecodeError, TrainingError

    try:
        return COMMANDS[args.command](args)
    except (TrainingError, WeightsUnavailableError, ImageDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ManifestError, ConfigError, CoverageError, InputError, UnbalanceableClassError,
            FileNotFoundError, json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
