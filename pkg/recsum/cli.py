from __future__ import annotations

import argparse
import json
import logging
from pathlib import Path
import sys
from typing import Callable, Optional, Sequence

from .config import RunConfig, load_config, write_snapshot
from .dataio import Dataset, FoldSpec, Reduction, load_dataset, load_folds, validate_dataset
from .evaluation import best_user_summary, evaluate_dataset
from .exception import RecsumError, ValidateFailed
from .model import GeneratorModel, SummarizerModel, load_checkpoint, restore_model, save_checkpoint
from .pretrain import pretrain, write_history
from .report import build_trace, render_trace, write_trace_csv
from .rltrain import train_summarizer
from .segmentation import ShotTable, kts_segment, read_shots, write_shots
from .summarize import read_scores, read_summary, score_video, summarize_video, write_scores, write_summary
from .synth import write_synthetic_dataset

logger = logging.getLogger("recsum")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class UsageError(Exception):
    """bad invocation; reported with exit code 2"""


def _config(args: argparse.Namespace) -> RunConfig:
    return load_config(args.config, args.set or ())


def _out(args: argparse.Namespace, config: RunConfig) -> Path:
    out = Path(args.out) if args.out else config.run.output
    out.mkdir(parents=True, exist_ok=True)
    write_snapshot(out, config)
    return out


def _dataset(args: argparse.Namespace, config: RunConfig) -> Dataset:
    manifest = Path(args.manifest)
    if not manifest.is_file():
        raise UsageError(f"manifest {manifest} does not exist")
    return load_dataset(manifest, config.run.workers)


def _folds(dataset: Dataset) -> Optional[FoldSpec]:
    if dataset.manifest.folds is None:
        return None
    return load_folds(dataset.manifest.folds, dataset.ids)


def _split(dataset: Dataset, fold: Optional[int]) -> list[str]:
    if fold is None:
        return dataset.ids
    folds = _folds(dataset)
    if folds is None or not 0 <= fold < len(folds):
        raise UsageError(f"fold {fold} is not defined for dataset {dataset.name}")
    return list(folds.folds[fold].train_ids)


def _shots(
    dataset: Dataset, config: RunConfig, ids: Sequence[str], path: Optional[Path]
) -> dict[str, ShotTable]:
    shots = read_shots(path) if path is not None and path.is_file() else {}
    for video_id in ids:
        if video_id not in shots:
            shots[video_id] = kts_segment(
                dataset[video_id].embeddings,
                config.kts.max_change_points,
                config.kts.penalty_weight,
                config.kts.normalize,
            )
    return shots


# ---------------------------------------------------------------- commands


def cmd_dataset(args: argparse.Namespace) -> int:
    config = _config(args)
    dataset = _dataset(args, config)
    report = validate_dataset(dataset)
    if args.action == "inspect":
        for entry in report.entries:
            print(
                f"{entry.video_id}\tT={entry.T}\td={entry.d}\tusers={entry.n_annotations}"
                f"\trank_metrics={'yes' if entry.rank_metrics_available else 'no'}"
            )
        folds = _folds(dataset)
        print(
            f"{dataset.name}: {len(dataset)} videos, reduction={dataset.reduction.value}, "
            f"folds={len(folds or ())}"
        )
        return EXIT_OK
    out = _out(args, config)
    path = out / "validation.json"
    path.write_text(json.dumps(report.to_dict(), indent=2), encoding="utf-8")
    if not report.ok:
        for v in report.violations:
            logger.error("%s: %s", v.video_id, v.message)
        logger.error("%d violations; report written to %s", len(report.violations), path)
        return EXIT_FAILURE
    _folds(dataset)
    logger.info("dataset %s is valid (%d videos)", dataset.name, len(dataset))
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    config = _config(args)
    out = _out(args, config)
    manifest, _ = write_synthetic_dataset(
        out,
        n_videos=args.videos,
        T=args.frames,
        d=args.dim,
        anchor_ratio=args.anchor_ratio,
        seed=config.run.seed,
    )
    print(manifest)
    return EXIT_OK


def cmd_pretrain(args: argparse.Namespace) -> int:
    config = _config(args)
    dataset = _dataset(args, config)
    out = _out(args, config)
    ids = _split(dataset, args.fold)
    shots = _shots(dataset, config, ids, args.shots)
    write_shots(out / "shots.json", shots)
    result = pretrain(
        dataset.select(ids), config.pretrain, config.model, shots, config.dtype, config.run.workers
    )
    write_history(out / "pretrain_log.csv", result.history, ["epoch", "ce", "l1", "rec", "end_rec", "lr"])
    save_checkpoint(out / "generator.ckpt", result.checkpoint)
    logger.info("generator checkpoint written to %s", out / "generator.ckpt")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = _config(args)
    dataset = _dataset(args, config)
    generator = restore_model(load_checkpoint(args.generator))
    if not isinstance(generator, GeneratorModel):
        raise UsageError(f"{args.generator} is not a generator checkpoint")
    out = _out(args, config)
    generator = generator.to(config.dtype)
    result = train_summarizer(dataset.select(_split(dataset, args.fold)), generator, config.rl)
    write_history(
        out / "rl_log.csv", result.history, ["epoch", "reward", "baseline", "l_reg", "selection_rec"]
    )
    save_checkpoint(out / "summarizer.ckpt", result.checkpoint)
    logger.info("summarizer checkpoint written to %s", out / "summarizer.ckpt")
    return EXIT_OK


def cmd_score(args: argparse.Namespace) -> int:
    config = _config(args)
    dataset = _dataset(args, config)
    summarizer = restore_model(load_checkpoint(args.summarizer))
    if not isinstance(summarizer, SummarizerModel):
        raise UsageError(f"{args.summarizer} is not a summarizer checkpoint")
    summarizer = summarizer.to(config.dtype)
    out = _out(args, config)
    shots = _shots(dataset, config, dataset.ids, args.shots)
    write_shots(out / "shots.json", shots)
    for video_id in dataset.ids:
        scores = score_video(
            summarizer,
            dataset[video_id].embeddings,
            sequential_only=config.inference.sequential_only,
            batch_size=config.inference.batch_size,
        )
        selection = summarize_video(scores, shots[video_id], config.inference.budget_ratio)
        write_scores(out / "scores" / f"{video_id}.csv", scores, shots[video_id], selection)
        write_summary(out / "summaries" / f"{video_id}.json", selection)
        logger.info(
            "%s: %d shots selected, %d/%d frames",
            video_id,
            len(selection.selected_shots),
            int(selection.A.sum()),
            scores.T,
        )
    return EXIT_OK


def cmd_summarize(args: argparse.Namespace) -> int:
    config = _config(args)
    dataset = _dataset(args, config)
    out = _out(args, config)
    source = Path(args.outputs)
    for video_id in dataset.ids:
        table = read_scores(source / "scores" / f"{video_id}.csv", video_id)
        selection = summarize_video(table.scores, table.shots, config.inference.budget_ratio)
        write_scores(out / "scores" / f"{video_id}.csv", table.scores, table.shots, selection)
        write_summary(out / "summaries" / f"{video_id}.json", selection)
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    config = _config(args)
    dataset = _dataset(args, config)
    out = _out(args, config)
    folds = _folds(dataset)
    if folds is None:
        raise UsageError(f"dataset {dataset.name} defines no folds")
    source = Path(args.outputs)
    outputs = {}
    for video_id in dataset.ids:
        summary = source / "summaries" / f"{video_id}.json"
        if not summary.is_file():
            continue
        scores_path = source / "scores" / f"{video_id}.csv"
        scores = read_scores(scores_path, video_id).scores if scores_path.is_file() else None
        outputs[video_id] = (read_summary(summary), scores)
    report = evaluate_dataset(outputs, dataset, folds, Reduction(args.reduction) if args.reduction else None)
    report.write_json(out / "evaluation.json")
    report.write_csv(out / "evaluation.csv")
    tau = "n/a" if report.tau is None else f"{report.tau:.4f}"
    rho = "n/a" if report.rho is None else f"{report.rho:.4f}"
    print(f"{dataset.name}: F={report.f:.2f} tau={tau} rho={rho}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    config = _config(args)
    dataset = _dataset(args, config)
    out = _out(args, config)
    source = Path(args.outputs)
    for video_id in dataset.ids:
        table = read_scores(source / "scores" / f"{video_id}.csv", video_id)
        annotation = dataset[video_id].annotation
        importances = human = None
        if annotation is not None:
            importances = annotation.frame_importances
            if annotation.n_users:
                _, human = best_user_summary(annotation)
        trace = build_trace(video_id, table.scores.O, table.shots, table.selected, importances, human)
        render_trace(out / f"{video_id}.svg", trace)
        write_trace_csv(out / f"{video_id}.csv", trace)
    logger.info("wrote %d score traces to %s", len(dataset), out)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _common(parser: argparse.ArgumentParser, manifest: bool = True) -> None:
    if manifest:
        parser.add_argument("manifest", help="dataset manifest (JSON)")
    parser.add_argument("--config", type=Path, help="config file of 'section.key = value' lines")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config value")
    parser.add_argument("--out", type=Path, help="output directory (default: run.output)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="recsum", description="reconstruction-reward video summarization")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset", help="validate or inspect a dataset")
    p.add_argument("action", choices=["validate", "inspect"])
    _common(p)
    p.set_defaults(handler=cmd_dataset)

    p = sub.add_parser("synth", help="write the synthetic dataset")
    _common(p, manifest=False)
    p.add_argument("--videos", type=int, default=8)
    p.add_argument("--frames", type=int, default=256)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--anchor-ratio", type=float, default=0.2)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("pretrain", help="self-supervised generator training")
    _common(p)
    p.add_argument("--fold", type=int, help="train on this fold's train split (default: every video)")
    p.add_argument("--shots", type=Path, help="shot table JSON to reuse")
    p.set_defaults(handler=cmd_pretrain)

    p = sub.add_parser("train", help="REINFORCE summarizer training")
    _common(p)
    p.add_argument("--generator", type=Path, required=True)
    p.add_argument("--fold", type=int)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("score", help="frame scores and keyshot summaries")
    _common(p)
    p.add_argument("--summarizer", type=Path, required=True)
    p.add_argument("--shots", type=Path)
    p.set_defaults(handler=cmd_score)

    p = sub.add_parser("summarize", help="re-select keyshots from score CSVs")
    _common(p)
    p.add_argument("--outputs", type=Path, required=True, help="directory holding scores/")
    p.set_defaults(handler=cmd_summarize)

    p = sub.add_parser("evaluate", help="F-score and rank correlations over folds")
    _common(p)
    p.add_argument("--outputs", type=Path, required=True, help="directory holding summaries/ and scores/")
    p.add_argument("--reduction", choices=[r.value for r in Reduction])
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("report", help="SVG score traces")
    _common(p)
    p.add_argument("--outputs", type=Path, required=True, help="directory holding scores/")
    p.set_defaults(handler=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format=LOG_FORMAT, force=True)
    handler: Callable[[argparse.Namespace], int] = args.handler
    try:
        return handler(args)
    except (UsageError, ValidateFailed) as e:
        print(f"recsum: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except RecsumError as e:
        logger.error("%s", e)
        return EXIT_FAILURE


__all__ = ["build_parser", "main"]
