"""Command-line entry point for EA-GCL experiments."""

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, NoReturn, Optional, Sequence

from src.config import Config, ConfigError, ConfigLoader
from src.dataio import DataError, make_examples, synthesize, write_dataset
from src.diffcore import NumericError, grad_check
from src.evaluation import (
    evaluate_model,
    evaluate_popularity,
    format_report_table,
    popularity_baseline,
    write_report_csv,
)
from src.model import ModelParams, forward_batch, gradcheck_config, toy_batch
from src.monitoring import TrainingMetricsCollector
from src.training import (
    ablate,
    load_checkpoint,
    prepare_data,
    run_experiment,
    save_checkpoint,
    sweep,
    timing_study,
    write_loss_trace,
)
from src.utils import write_manifest, write_yaml

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3
TEXT_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


class UsageError(Exception):
    """Raised for invalid command-line usage."""


class JsonFormatter(logging.Formatter):
    """Custom JSON formatter for structured logging."""

    def format(self, record: logging.LogRecord) -> str:
        """Format log record as JSON."""
        log_data = {
            "timestamp": self.formatTime(record, self.datefmt),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
        }
        if record.exc_info:
            log_data["exception"] = self.formatException(record.exc_info)
        return json.dumps(log_data)


def setup_logging(log_level: str, log_format: str) -> None:
    """
    Setup logging configuration.

    Args:
        log_level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        log_format: Format type ('json' or 'text')
    """
    level = getattr(logging, log_level.upper())

    if log_format == "json":
        handler = logging.StreamHandler()
        handler.setFormatter(JsonFormatter())
        logging.root.handlers = [handler]
    else:
        logging.basicConfig(
            level=level,
            format=TEXT_FORMAT,
            datefmt="%Y-%m-%d %H:%M:%S",
        )

    logging.root.setLevel(level)


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="eagcl", description="EA-GCL cross-domain sequential recommender")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML configuration file")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="Override one configuration value (repeatable, last write wins)",
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = sub.add_parser("gen-data", parents=[common], help="Write a synthetic TSV dataset")
    gen.add_argument("--out", help="Dataset path (default: <output.dir>/dataset.tsv)")
    sub.add_parser("train", parents=[common], help="Train and write a checkpoint")
    ev = sub.add_parser("eval", parents=[common], help="Evaluate a checkpoint")
    ev.add_argument("--checkpoint", help="Checkpoint directory (default: <output.dir>/checkpoint)")
    grad = sub.add_parser("gradcheck", parents=[common], help="Verify gradients on a toy batch")
    grad.add_argument("--tol", type=float, default=1e-4)
    grad.add_argument("--step", type=float, default=1e-5)
    sub.add_parser("ablate", parents=[common], help="Train every ablation variant")
    sub.add_parser("timing", parents=[common], help="Time epochs against training fraction")
    sw = sub.add_parser("sweep", parents=[common], help="Sweep alpha or beta")
    sw.add_argument("--param", choices=["alpha", "beta"], default="alpha")
    return parser


def _write_rows(path: Path, rows: List[Dict[str, str]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]) if rows else [])
        writer.writeheader()
        writer.writerows(rows)


def cmd_gen_data(config: Config, args: argparse.Namespace, out_dir: Path) -> int:
    path = Path(args.out) if args.out else out_dir / "dataset.tsv"
    path.parent.mkdir(parents=True, exist_ok=True)
    sequences = synthesize(config.data.synth)
    write_dataset(path, sequences, num_items_a=config.data.synth.num_items_a)
    write_manifest(
        out_dir, "gen-data", config.to_dict(), config.data.synth.seed, {"dataset": str(path)}
    )
    return EXIT_OK


def cmd_train(
    config: Config, out_dir: Path, collector: Optional[TrainingMetricsCollector]
) -> int:
    split = prepare_data(config.data, sidecar_dir=out_dir)
    result = run_experiment(config, split, collector=collector, output_dir=out_dir)
    save_checkpoint(result.trainer, out_dir / "checkpoint")
    write_loss_trace(result.fit.trace, out_dir / "loss_trace.csv")
    write_report_csv([result.report], out_dir / "metrics.csv")
    print(format_report_table([result.report]))
    write_manifest(
        out_dir,
        "train",
        config.to_dict(),
        config.train.seed,
        {"epochs_run": result.fit.epochs_run, "checksum": result.trainer.params.checksum()},
    )
    return EXIT_OK


def cmd_eval(config: Config, args: argparse.Namespace, out_dir: Path) -> int:
    checkpoint = Path(args.checkpoint) if args.checkpoint else out_dir / "checkpoint"
    if not checkpoint.exists():
        raise FileNotFoundError(f"Checkpoint not found: {checkpoint}")
    trainer = load_checkpoint(checkpoint)
    split = prepare_data(config.data)
    examples = make_examples(split.test)
    report = evaluate_model(
        trainer.params,
        examples,
        trainer.cfg,
        k=config.evaluation.k,
        workers=config.evaluation.workers,
        variant=trainer.variant,
        seed=trainer.cfg.seed,
    )
    baseline = evaluate_popularity(
        popularity_baseline(split.train, split.num_items_a, split.num_items_b),
        examples,
        k=config.evaluation.k,
    )
    write_report_csv([report, baseline], out_dir / "eval_metrics.csv")
    table = format_report_table([report, baseline])
    (out_dir / "eval_metrics.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    write_manifest(
        out_dir, "eval", config.to_dict(), trainer.cfg.seed, {"checkpoint": str(checkpoint)}
    )
    return EXIT_OK


def cmd_gradcheck(config: Config, args: argparse.Namespace, out_dir: Path) -> int:
    cfg = gradcheck_config()
    examples = toy_batch()
    params = ModelParams.initialize(5, 3, 3, cfg.embedding_size, cfg.layers, cfg.seed)
    report = grad_check(
        lambda: forward_batch(params, examples, cfg, cfg.seed, train=True).objective,
        params.named_tensors(),
        h=args.step,
        tol=args.tol,
    )
    passed = report.passed and not report.dead_parameters
    if report.dead_parameters:
        logger.error("Parameters without gradient on the toy batch: %s", report.dead_parameters)
    write_yaml(out_dir / "gradcheck.yaml", report.to_dict())
    write_manifest(
        out_dir,
        "gradcheck",
        config.to_dict(),
        cfg.seed,
        {"passed": passed, "gradcheck_train": dataclasses.asdict(cfg)},
    )
    print(
        f"gradcheck {'passed' if passed else 'FAILED'}: "
        f"max relative error {report.max_rel_error:.3e} over {report.checked} coordinates"
    )
    return EXIT_OK if passed else EXIT_NUMERIC


def cmd_ablate(
    config: Config, out_dir: Path, collector: Optional[TrainingMetricsCollector]
) -> int:
    split = prepare_data(config.data)
    report = ablate(config, split, collector=collector)
    write_report_csv(report.reports, out_dir / "ablation.csv")
    table = format_report_table(report.summary())
    (out_dir / "ablation.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    write_manifest(
        out_dir, "ablate", config.to_dict(), config.train.seed, {"runs": len(report.reports)}
    )
    return EXIT_OK


def cmd_timing(config: Config, out_dir: Path) -> int:
    split = prepare_data(config.data)
    report = timing_study(config, split)
    _write_rows(out_dir / "timing.csv", report.rows())
    r2 = "n/a" if report.r_squared is None else f"{report.r_squared:.4f}"
    for point in report.points:
        print(f"fraction {point.fraction:.1f}: {point.seconds:.3f}s")
    print(f"R^2 of linear fit: {r2}")
    write_manifest(out_dir, "timing", config.to_dict(), config.train.seed, {"r_squared": r2})
    return EXIT_OK


def cmd_sweep(config: Config, args: argparse.Namespace, out_dir: Path) -> int:
    split = prepare_data(config.data)
    reports = sweep(config, split, args.param)
    write_report_csv(reports, out_dir / f"sweep_{args.param}.csv")
    print(format_report_table(reports))
    write_manifest(
        out_dir, "sweep", config.to_dict(), config.train.seed, {"parameter": args.param}
    )
    return EXIT_OK


def _dispatch(
    config: Config, args: argparse.Namespace, collector: Optional[TrainingMetricsCollector]
) -> int:
    out_dir = Path(config.output.dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    handlers: Dict[str, Callable[[], int]] = {
        "gen-data": lambda: cmd_gen_data(config, args, out_dir),
        "train": lambda: cmd_train(config, out_dir, collector),
        "eval": lambda: cmd_eval(config, args, out_dir),
        "gradcheck": lambda: cmd_gradcheck(config, args, out_dir),
        "ablate": lambda: cmd_ablate(config, out_dir, collector),
        "timing": lambda: cmd_timing(config, out_dir),
        "sweep": lambda: cmd_sweep(config, args, out_dir),
    }
    status = handlers[args.command]()
    if collector is not None:
        collector.write_textfile(out_dir / config.metrics.textfile)
    return status


def run(argv: Sequence[str]) -> int:
    """
    Parse arguments, load configuration and run one command.

    Returns:
        Exit status: 0 success, 1 usage or configuration error, 2 data error,
        3 numeric failure
    """
    try:
        args = build_parser().parse_args(list(argv))
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE

    try:
        config = ConfigLoader.load(args.config, args.overrides)
    except (ConfigError, ValueError, FileNotFoundError) as e:
        logging.error("Configuration error: %s", e)
        return EXIT_USAGE

    setup_logging(config.logging.level, config.logging.format)
    logger.info("Running '%s' with output directory %s", args.command, config.output.dir)
    collector = TrainingMetricsCollector() if config.metrics.enabled else None

    try:
        return _dispatch(config, args, collector)
    except (DataError, FileNotFoundError) as e:
        logger.error("Data error: %s", e)
        return EXIT_DATA
    except NumericError as e:
        logger.error("Numeric failure: %s", e, exc_info=True)
        return EXIT_NUMERIC
    except ValueError as e:
        logger.error("Invalid argument: %s", e)
        return EXIT_USAGE
    except Exception as e:  # pylint: disable=broad-except
        logger.error("Fatal error: %s", e, exc_info=True)
        return EXIT_USAGE


def main() -> NoReturn:
    """Main application entry point."""
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
