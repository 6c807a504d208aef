"""Command Line Interface for the lesion classification pipeline."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import NoReturn

from lesionstack.config import load_config
from lesionstack.constants import ERROR_LOG_FILENAME
from lesionstack.exceptions import (
    ConfigurationError,
    LesionStackError,
    NumericError,
)
from lesionstack.pipeline import Pipeline
from lesionstack.report import format_metric
from lesionstack.volstore import Cohort

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

_error_file_logger: logging.Logger | None = None


def _get_error_file_logger(log_dir: Path | None = None) -> logging.Logger:
    """Initialize and return the dedicated error file logger."""
    global _error_file_logger  # noqa: PLW0603
    if _error_file_logger is None:
        _error_file_logger = logging.getLogger("lesionstack.errorfile")
        _error_file_logger.setLevel(logging.ERROR)
        _error_file_logger.propagate = False
    if log_dir is None and _error_file_logger.handlers:
        return _error_file_logger
    log_path = (log_dir or Path.cwd()) / ERROR_LOG_FILENAME
    if not any(
        isinstance(h, logging.FileHandler)
        and Path(getattr(h, "baseFilename", "")) == log_path.resolve()
        for h in _error_file_logger.handlers
    ):
        try:
            log_path.parent.mkdir(parents=True, exist_ok=True)
            file_handler = logging.FileHandler(
                log_path,
                mode="a",
                encoding="utf-8",
            )
            file_handler.setFormatter(
                logging.Formatter(
                    "[%(asctime)s] %(message)s",
                    datefmt="%Y-%m-%d %H:%M:%S",
                ),
            )
            for handler in list(_error_file_logger.handlers):
                _error_file_logger.removeHandler(handler)
                handler.close()
            _error_file_logger.addHandler(file_handler)
        except OSError as e:
            print(
                f"CRITICAL: cannot open error log '{log_path}': {e!s}",
                file=sys.stderr,
            )
    return _error_file_logger


def exit_code_for(err: BaseException) -> int:
    """Exit code of an exception: 1 usage, 2 data, 3 numeric failure."""
    if isinstance(err, ConfigurationError):
        return EXIT_USAGE
    if isinstance(err, NumericError):
        return EXIT_NUMERIC
    return EXIT_DATA


def log_error_and_exit(
    message: str,
    original_err: Exception | None = None,
    exit_code: int = EXIT_DATA,
) -> NoReturn:
    """Log an error message to console and file, then exit."""
    error_logger = _get_error_file_logger()

    log_message_to_file_parts = [message]
    if original_err:
        log_message_to_file_parts.append(
            f"\n  Details: {type(original_err).__name__}: {original_err!s}",
        )
    full_log_message = "".join(log_message_to_file_parts)

    print("-----------------------------------------", file=sys.stderr)
    print(f"ERROR: {message}", file=sys.stderr)
    if original_err:
        print(f"  Details: {original_err!s}", file=sys.stderr)
    try:
        error_logger.error(full_log_message.strip())
        handlers = [
            h for h in error_logger.handlers if isinstance(h, logging.FileHandler)
        ]
        if handlers:
            print(
                f"  Details were saved to: {handlers[0].baseFilename}",
                file=sys.stderr,
            )
    except Exception as e_log:  # noqa: BLE001
        print(
            f"  CRITICAL: cannot write to the error log: {e_log!s}",
            file=sys.stderr,
        )
    print("-----------------------------------------", file=sys.stderr)
    sys.exit(exit_code)


class _ArgumentParser(argparse.ArgumentParser):
    """Argument parser whose usage errors exit with code 1."""

    def error(self, message: str) -> NoReturn:
        """Print usage and exit with the usage error code."""
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    """Parser with one subcommand per pipeline stage."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config",
        type=Path,
        help="pipeline config JSON; omitted fields keep their defaults",
    )
    common.add_argument("--seed", type=int, help="master seed override")
    common.add_argument("--workers", type=int, help="worker processes")
    common.add_argument(
        "--output-dir",
        type=Path,
        help="output directory override",
    )
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true")
    verbosity.add_argument("-q", "--quiet", action="store_true")

    parser = _ArgumentParser(
        prog="lesionstack",
        description=(
            "Multi-stream 3D DenseNet ensembles for lesion classification "
            "on multi-modal MRI volumes."
        ),
    )
    commands = parser.add_subparsers(
        dest="command",
        required=True,
        parser_class=_ArgumentParser,
    )
    commands.add_parser(
        "gen-phantom",
        parents=[common],
        help="write a synthetic cohort",
    )
    commands.add_parser(
        "preprocess",
        parents=[common],
        help="unify grids and standardize intensities",
    )
    commands.add_parser(
        "extract",
        parents=[common],
        help="sample patch sets and split the folds",
    )
    train = commands.add_parser(
        "train",
        parents=[common],
        help="train the stream matrix",
    )
    train.add_argument(
        "--only",
        help="job filter such as 'geometry=96,fold=2' or 'family=solo'",
    )
    train.add_argument(
        "--grid-search",
        action="store_true",
        help="rank focal-loss settings on the first matching job",
    )
    commands.add_parser(
        "ensemble",
        parents=[common],
        help="meta-train the stacked ensembles",
    )
    predict = commands.add_parser(
        "predict",
        parents=[common],
        help="score findings with every ensemble",
    )
    predict.add_argument(
        "--cohort",
        choices=["test", "train", "all"],
        default="test",
    )
    evaluate = commands.add_parser(
        "evaluate",
        parents=[common],
        help="score predictions against known labels",
    )
    evaluate.add_argument(
        "--labels",
        type=Path,
        help="findings CSV with the true classes",
    )
    report = commands.add_parser(
        "report",
        parents=[common],
        help="render tables and figures from stored metrics",
    )
    report.add_argument(
        "--format",
        default="md",
        help="'md' or any pandoc output format such as 'html'",
    )
    return parser


def _configure_logging(args: argparse.Namespace) -> int:
    level = logging.INFO
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        datefmt="%H:%M:%S",
    )
    return level


def _run(pipeline: Pipeline, args: argparse.Namespace) -> None:
    command = args.command
    if command == "gen-phantom":
        print(f"Cohort manifest: {pipeline.gen_phantom()}")
    elif command == "preprocess":
        print(f"Standardized manifest: {pipeline.preprocess()}")
    elif command == "extract":
        print(f"Patch archives: {pipeline.extract()}")
    elif command == "train":
        rows = pipeline.train(args.only, grid_search=args.grid_search)
        for row in rows:
            print(
                f"{row.family}/{row.geometry}/fold{row.fold}: "
                f"val AUC {format_metric(row.validation.auc)}, "
                f"val accuracy {format_metric(row.validation.accuracy)}",
            )
        if args.grid_search:
            print(f"Focal grid: {pipeline.stage_dir('train')}/focal_grid.csv")
    elif command == "ensemble":
        for row in pipeline.ensemble():
            print(
                f"{row['channels']} ({row['inputs']} inputs): "
                f"val AUC {format_metric(row['val_auc'])}",
            )
    elif command == "predict":
        cohort = None if args.cohort == "all" else Cohort(args.cohort)
        for path in pipeline.predict(cohort):
            print(f"Predictions: {path}")
    elif command == "evaluate":
        for result in pipeline.evaluate(args.labels):
            metrics = result.metrics
            print(
                f"{result.selection}: {metrics.count} findings, "
                f"AUC {format_metric(metrics.auc)}, "
                f"sensitivity {format_metric(metrics.sensitivity)}, "
                f"specificity {format_metric(metrics.specificity)}",
            )
    elif command == "report":
        print(f"Report: {pipeline.report(args.format)}")


def main(argv: list[str] | None = None) -> int:
    """Run one subcommand and return its exit code."""
    args = build_parser().parse_args(argv)
    level = _configure_logging(args)
    try:
        config = load_config(args.config).with_overrides(
            seed=args.seed,
            workers=args.workers,
            output_dir=args.output_dir,
        )
    except ConfigurationError as err:
        log_error_and_exit("Invalid configuration", err, EXIT_USAGE)

    _get_error_file_logger(config.output_dir)
    pipeline = Pipeline(config, show_progress=level <= logging.INFO)
    try:
        pipeline.write_config()
        _run(pipeline, args)
    except LesionStackError as err:
        log_error_and_exit(
            f"Stage '{args.command}' failed",
            err,
            exit_code_for(err),
        )
    except (OSError, ValueError) as err:
        log_error_and_exit(
            f"Unexpected error in stage '{args.command}'",
            err,
            EXIT_DATA,
        )
    return EXIT_OK


def main_cli() -> None:
    """Console entry point."""
    sys.exit(main())


if __name__ == "__main__":
    main_cli()
