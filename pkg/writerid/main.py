"""
Command-line entry point for the writer identification toolkit.
Run as `python -m writerid.main <subcommand> ...`.
"""

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import structlog

from .config import RunConfig, load_run_config, settings, setup_logging
from .core.curation import find_duplicate_candidates, merge_labels, read_merge_mapping, write_candidates_csv
from .core.data_model import (
    build_manifest,
    filter_manifest_with_report,
    manifest_stats,
    read_manifest_csv,
    write_manifest_csv,
)
from .core.errors import ConfigError, DataError, VerificationFailed, WriterIdError
from .core.preprocess import make_loader
from .core.splits import (
    Protocol,
    Role,
    read_split_csv,
    role_sizes,
    split_line_level,
    split_page_disjoint,
    verify_split,
    write_split_csv,
)
from .models.backbones import BackboneName
from .models.pipeline import load_checkpoint
from .services.evaluation import (
    aggregate_runs,
    classification_report,
    emit_distribution_plots,
    evaluate_predictions,
    read_predictions_csv,
    write_predictions_csv,
    write_report_csv,
)
from .services.report_renderer import RunReportRenderer
from .services.synth_corpus import SynthSpec, generate
from .services.trainer import FinetunePolicy, predict, train_seeds

logger = structlog.get_logger()

POLICIES = ["frozen", "last1", "last5", "last10", "last25", "full", "scratch"]


def _emit(payload: Dict[str, Any]) -> None:
    print(json.dumps(payload, default=str))


def _manifest_path(args: argparse.Namespace, config: Optional[RunConfig] = None) -> Path:
    path = args.manifest or (config.paths.manifest if config else None)
    if path is None:
        raise ConfigError("a manifest path is required (--manifest or paths.manifest)")
    return Path(path)


def cmd_ingest(args: argparse.Namespace) -> None:
    root = args.root or settings.data_root
    if root is None:
        raise ConfigError("dataset root missing: pass --root or set WID_DATA_ROOT")
    manifest = build_manifest(Path(root), Path(args.labels))
    write_manifest_csv(manifest, Path(args.out))
    _emit({"manifest": args.out, **manifest_stats(manifest).model_dump(exclude={"per_writer"})})


def cmd_filter(args: argparse.Namespace) -> None:
    manifest = read_manifest_csv(Path(args.manifest))
    filtered, report = filter_manifest_with_report(manifest, exclude_ottoman=args.exclude_ottoman)
    write_manifest_csv(filtered, Path(args.out))
    stats = manifest_stats(filtered)
    _emit({
        "manifest": args.out,
        "kept": report.kept,
        "dropped": {reason.value: len(ids) for reason, ids in report.dropped.items()},
        "classes": stats.num_classes,
        "pages": stats.total_pages,
        "lines_per_writer": stats.lines_per_writer.model_dump(),
        "pages_per_writer": stats.pages_per_writer.model_dump(),
    })


def cmd_dedupe(args: argparse.Namespace) -> None:
    manifest = read_manifest_csv(Path(args.manifest))
    names = sorted({name for cls in manifest.classes for name in cls.names})
    candidates = find_duplicate_candidates(names, args.threshold)
    write_candidates_csv(candidates, Path(args.out))
    _emit({"candidates": len(candidates), "threshold": args.threshold, "out": args.out})


def cmd_merge(args: argparse.Namespace) -> None:
    manifest = read_manifest_csv(Path(args.manifest))
    merged = merge_labels(manifest, read_merge_mapping(Path(args.mapping)))
    write_manifest_csv(merged, Path(args.out))
    _emit({"classes_before": manifest.num_classes, "classes_after": merged.num_classes, "out": args.out})


def _build_split(manifest, protocol: Protocol, seed: int, min_pages: int):
    if protocol == Protocol.LINE_LEVEL:
        return split_line_level(manifest, seed)
    return split_page_disjoint(manifest, seed, min_pages=min_pages)


def cmd_split(args: argparse.Namespace) -> None:
    config = load_run_config(args.config, _split_overrides(args))
    manifest = read_manifest_csv(_manifest_path(args, config))
    split = _build_split(manifest, config.protocol.name, config.protocol.split_seed, config.protocol.min_pages)
    write_split_csv(split, Path(args.out))
    _emit({"protocol": split.protocol.value, "classes": split.num_classes, **role_sizes(split), "out": args.out})


def cmd_verify_split(args: argparse.Namespace) -> None:
    manifest = read_manifest_csv(Path(args.manifest))
    split = read_split_csv(Path(args.split), manifest)
    report = verify_split(split, manifest)
    if not report.passed:
        raise VerificationFailed(
            f"split failed {sum(not ok for ok in report.checks.values())} check(s): {'; '.join(report.offenders[:5])}",
            offenders=report.offenders,
        )
    _emit({"passed": True, "protocol": split.protocol.value, "classes": split.num_classes, **role_sizes(split)})


def cmd_synth(args: argparse.Namespace) -> None:
    spec = SynthSpec(
        num_writers=args.writers,
        pages_per_writer=args.pages,
        lines_per_page=args.lines,
        nuisance_level=args.nuisance,
        target_protocol=Protocol(args.target),
        seed=args.seed,
    )
    out_dir, manifest = generate(spec, Path(args.out))
    _emit({"out": str(out_dir), "manifest": str(out_dir / "manifest.csv"), "lines": len(manifest.lines),
           "pages": len(manifest.pages), "classes": manifest.num_classes})


def _split_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    if getattr(args, "protocol", None):
        overrides["protocol.name"] = args.protocol
    if getattr(args, "min_pages", None) is not None:
        overrides["protocol.min_pages"] = args.min_pages
    if getattr(args, "split_seed", None) is not None:
        overrides["protocol.split_seed"] = args.split_seed
    return overrides


def _train_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides = _split_overrides(args)
    if args.backbone:
        overrides["model.backbone"] = args.backbone
    if args.attention:
        overrides["model.attention"] = args.attention == "on"
    if args.policy:
        policy = FinetunePolicy.from_name(args.policy)
        overrides["train.finetune.mode"] = policy.mode.value
        overrides["train.finetune.k"] = policy.k
    if args.seed is not None:
        overrides["seeds"] = [args.seed]
    if args.epochs is not None:
        overrides["train.max_epochs"] = args.epochs
    if args.batch is not None:
        overrides["train.batch_size"] = args.batch
    if args.out:
        overrides["paths.output_dir"] = args.out
    return overrides


def cmd_train(args: argparse.Namespace) -> None:
    config = load_run_config(args.config, _train_overrides(args))
    manifest = read_manifest_csv(_manifest_path(args, config))
    split_path = args.split or config.paths.split
    if split_path:
        split = read_split_csv(Path(split_path), manifest)
        if split.protocol != config.protocol.name:
            raise ConfigError(f"split file is protocol {split.protocol.value}, config asks for {config.protocol.name.value}")
    else:
        split = _build_split(manifest, config.protocol.name, config.protocol.split_seed, config.protocol.min_pages)
    report = verify_split(split, manifest)
    if not report.passed:
        raise VerificationFailed("refusing to train on a split that fails verification", offenders=report.offenders)

    train_cfg = config.train.model_copy(update={"num_workers": settings.num_workers}) if settings.num_workers else config.train
    artifacts = train_seeds(
        manifest, split, config.model, train_cfg, config.seeds,
        Path(config.paths.output_dir or settings.output_root),
        augment=config.augment, device=settings.device,
    )
    for run in artifacts:
        _emit({"run_dir": str(run.run_dir), "seed": run.seed, "best_epoch": run.best_epoch,
               "top1": run.report.top1, "top5": run.report.top5, "macro_f1": run.report.macro_f1})


def cmd_evaluate(args: argparse.Namespace) -> None:
    manifest = read_manifest_csv(Path(args.manifest))
    split = read_split_csv(Path(args.split), manifest)
    model = load_checkpoint(Path(args.checkpoint)).to(settings.device)
    if model.cfg.num_classes != split.num_classes:
        raise DataError(f"checkpoint has {model.cfg.num_classes} classes, split has {split.num_classes}")
    loader = make_loader(split, manifest, Role(args.role), args.batch, num_workers=settings.num_workers)
    predictions = predict(model, loader, [c.label for c in split.classes], settings.device)
    out = Path(args.out)
    write_predictions_csv(predictions, out / "predictions.csv")
    aggregate = aggregate_runs([evaluate_predictions(predictions)])
    write_report_csv(aggregate, out / "test_report.csv")
    (out / "test_report.txt").write_text(classification_report(aggregate))
    _emit({"out": str(out), "lines": len(predictions),
           **{name: value.mean for name, value in aggregate.metrics.items()}})


def _prediction_files(paths: List[str]) -> List[Path]:
    files = []
    for path in map(Path, paths):
        if path.is_file():
            files.append(path)
        elif (path / "predictions.csv").exists():
            files.append(path / "predictions.csv")
        else:
            files.extend(sorted(path.glob("*/predictions.csv")))
    if not files:
        raise DataError(f"no predictions.csv found under {', '.join(paths)}")
    return files


def cmd_report(args: argparse.Namespace) -> None:
    files = _prediction_files(args.runs)
    reports = [evaluate_predictions(read_predictions_csv(path)) for path in files]
    try:
        aggregate = aggregate_runs(reports)
    except ValueError as e:
        raise DataError(str(e))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text = classification_report(aggregate)
    (out / "report.txt").write_text(text)
    write_report_csv(aggregate, out / "report.csv")
    RunReportRenderer().write(out / "report.md", aggregate, title=args.title)
    print(text, end="")


def cmd_plot(args: argparse.Namespace) -> None:
    manifest = read_manifest_csv(Path(args.manifest))
    protocols = [Protocol(p) for p in args.protocol] if args.protocol else list(Protocol)
    paths = emit_distribution_plots(manifest, Path(args.out), protocols)
    _emit({"plots": [str(p) for p in paths]})


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="writerid", description="Writer identification on handwritten line images")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="build a manifest from a dataset root and a label table")
    p.add_argument("--root", type=Path, help="dataset root (defaults to WID_DATA_ROOT)")
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_ingest)

    p = sub.add_parser("filter", help="keep labeled handwritten lines")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--exclude-ottoman", action="store_true")
    p.set_defaults(handler=cmd_filter)

    p = sub.add_parser("dedupe", help="list likely duplicate writer names")
    p.add_argument("--manifest", required=True)
    p.add_argument("--threshold", type=int, default=90)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_dedupe)

    p = sub.add_parser("merge", help="apply a reviewed name mapping")
    p.add_argument("--manifest", required=True)
    p.add_argument("--mapping", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_merge)

    p = sub.add_parser("split", help="build a Protocol A or B split")
    p.add_argument("--config", type=Path)
    p.add_argument("--manifest")
    p.add_argument("--protocol", choices=[p.value for p in Protocol])
    p.add_argument("--seed", dest="split_seed", type=int)
    p.add_argument("--min-pages", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_split)

    p = sub.add_parser("verify-split", help="check a split for leakage and coverage")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", required=True)
    p.set_defaults(handler=cmd_verify_split)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--writers", type=int, default=10)
    p.add_argument("--pages", type=int, default=6)
    p.add_argument("--lines", type=int, default=10)
    p.add_argument("--nuisance", type=float, default=0.5)
    p.add_argument("--target", choices=[p.value for p in Protocol], default=Protocol.PAGE_DISJOINT.value)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("train", help="train one run per seed")
    p.add_argument("--config", type=Path)
    p.add_argument("--manifest")
    p.add_argument("--split")
    p.add_argument("--protocol", choices=[p.value for p in Protocol])
    p.add_argument("--split-seed", type=int)
    p.add_argument("--min-pages", type=int)
    p.add_argument("--backbone", choices=[b.value for b in BackboneName])
    p.add_argument("--attention", choices=["on", "off"])
    p.add_argument("--policy", choices=POLICIES)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--out")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a split role")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--role", choices=[r.value for r in Role], default=Role.TEST.value)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("report", help="aggregate seed runs into a classification report")
    p.add_argument("--runs", nargs="+", required=True, help="run directories, their parent, or predictions.csv files")
    p.add_argument("--out", required=True)
    p.add_argument("--title", default="seed aggregate")
    p.set_defaults(handler=cmd_report)

    p = sub.add_parser("plot", help="per-writer distribution charts")
    p.add_argument("--manifest", required=True)
    p.add_argument("--protocol", nargs="*", choices=[p.value for p in Protocol])
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_plot)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    setup_logging()
    args = build_parser().parse_args(argv)
    try:
        args.handler(args)
    except WriterIdError as e:
        logger.error("command_failed", command=args.command, kind=type(e).__name__, offenders=e.offenders[:20])
        print(e.one_line(), file=sys.stderr)
        return e.exit_code
    except ValueError as e:
        error = ConfigError(str(e))
        logger.error("command_failed", command=args.command, kind="ValueError")
        print(error.one_line(), file=sys.stderr)
        return error.exit_code
    except Exception as e:
        logger.exception("command_crashed", command=args.command)
        print(WriterIdError(f"{type(e).__name__}: {e}").one_line(), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
