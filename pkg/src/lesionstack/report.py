"""Result tables, ROC point files, SVG figures and the Markdown summary.

Training stages store their metrics with :func:`write_table_csv` and
:func:`write_roc_points`; :func:`report_tables` later renders every figure
and the summary from those files alone.
"""

from __future__ import annotations

import csv
import logging
import math
from pathlib import Path
from typing import TYPE_CHECKING, Any

from lesionstack import svg_utils
from lesionstack.exceptions import (
    PandocConversionError,
    PandocNotInstalledError,
    ReportError,
)
from lesionstack.metrics import RocCurve, RocPoint
from lesionstack.trainer import read_history
from lesionstack.volstore import natural_key

if TYPE_CHECKING:
    from collections.abc import Iterable, Mapping, Sequence

logger = logging.getLogger(__name__)

STREAM_COLUMNS = (
    "family",
    "geometry",
    "fold",
    "train_accuracy",
    "train_auc",
    "val_accuracy",
    "val_auc",
    "val_sensitivity",
    "val_specificity",
    "findings_accuracy",
    "findings_auc",
    "epochs",
    "best_epoch",
)
ENSEMBLE_COLUMNS = (
    "channels",
    "inputs",
    "train_accuracy",
    "train_auc",
    "val_accuracy",
    "val_auc",
    "val_sensitivity",
    "val_specificity",
    "findings_accuracy",
    "findings_auc",
)
EVALUATION_COLUMNS = (
    "channels",
    "findings",
    "accuracy",
    "auc",
    "sensitivity",
    "specificity",
)
ROC_HEADER = ("threshold", "sensitivity", "false_positive_rate")


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def write_table_csv(
    rows: Iterable[Mapping[str, Any]],
    columns: Sequence[str],
    path: str | Path,
) -> Path:
    """Write rows with fixed columns; undefined values become empty cells."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row.get(c)) for c in columns])
    return target


def read_table_csv(path: str | Path) -> list[dict[str, str]]:
    """Read a table CSV as string cells.

    Raises:
        ReportError: If the file cannot be read.
    """
    try:
        with Path(path).open(newline="", encoding="utf-8") as handle:
            return list(csv.DictReader(handle))
    except OSError as exc:
        raise ReportError(f"cannot read table {path}: {exc}") from exc


def write_roc_points(curve: RocCurve, path: str | Path) -> Path:
    """Write the operating points of a curve."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(ROC_HEADER)
        for point in curve.points:
            writer.writerow(
                [repr(point.threshold), repr(point.tpr), repr(point.fpr)],
            )
    return target


def read_roc_points(path: str | Path) -> RocCurve:
    """Read points written by :func:`write_roc_points` and re-integrate."""
    rows = read_table_csv(path)
    points = tuple(
        RocPoint(
            threshold=float(row["threshold"]),
            tpr=float(row["sensitivity"]),
            fpr=float(row["false_positive_rate"]),
        )
        for row in rows
    )
    area = sum(
        (b.fpr - a.fpr) * (a.tpr + b.tpr) / 2
        for a, b in zip(points, points[1:], strict=False)
    )
    return RocCurve(points=points, auc=area)


def roc_figure(curves: Mapping[str, RocCurve], title: str) -> Any:
    """ROC chart over the unit square with one curve per name."""
    return svg_utils.line_chart(
        {
            f"{name} (AUC {curve.auc:.3f})": [
                (p.fpr, p.tpr) for p in curve.points
            ]
            for name, curve in curves.items()
        },
        title=title,
        x_label="1 - specificity",
        y_label="sensitivity",
        x_range=(0.0, 1.0),
        y_range=(0.0, 1.0),
        diagonal=True,
    )


def loss_figure(history_path: str | Path, title: str) -> Any:
    """Training and validation loss per epoch."""
    history = read_history(history_path)
    return svg_utils.line_chart(
        {
            "training": [(r.epoch, r.train_loss) for r in history],
            "validation": [(r.epoch, r.val_loss) for r in history],
        },
        title=title,
        x_label="epoch",
        y_label="focal loss",
    )


def _markdown_table(
    rows: Sequence[Mapping[str, str]],
    columns: Sequence[str],
) -> str:
    lines = [
        "| " + " | ".join(columns) + " |",
        "|" + "|".join("---" for _ in columns) + "|",
    ]
    for row in rows:
        cells = []
        for column in columns:
            value = row.get(column, "")
            try:
                number = float(value)
                cells.append(
                    value if number.is_integer() and "." not in value
                    else f"{number:.3f}",
                )
            except ValueError:
                cells.append(value or "n/a")
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines)


def _mean(rows: Sequence[Mapping[str, str]], column: str) -> float | None:
    values = [float(r[column]) for r in rows if r.get(column)]
    return sum(values) / len(values) if values else None


def _roc_files(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        return {}
    return {
        path.stem: path
        for path in sorted(
            directory.glob("*.csv"),
            key=lambda p: natural_key(p.stem),
        )
    }


def report_tables(
    streams_dir: str | Path,
    ensemble_dir: str | Path | None,
    out_dir: str | Path,
    *,
    evaluation_dir: str | Path | None = None,
) -> Path:
    """Render tables, ROC and loss figures and ``report.md``.

    Expects ``streams_<family>.csv``, ``roc/`` point files and
    ``*.history.csv`` loss curves below ``streams_dir`` and, when given,
    ``ensembles.csv`` plus ``roc/`` below ``ensemble_dir`` and
    ``metrics.csv`` plus ``roc/`` below ``evaluation_dir``.

    Returns:
        Path of the Markdown summary.

    Raises:
        ReportError: If no stream table exists.
    """
    streams = Path(streams_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tables = sorted(streams.glob("streams_*.csv"))
    if not tables:
        raise ReportError(f"no stream tables in {streams}")

    sections = ["# Lesion classification report", ""]
    stream_rocs = _roc_files(streams / "roc")
    for table in tables:
        family = table.stem.removeprefix("streams_")
        rows = read_table_csv(table)
        write_table_csv(rows, STREAM_COLUMNS, out / table.name)
        sections += [
            f"## Streams, {family} channels",
            "",
            _markdown_table(rows, STREAM_COLUMNS),
            "",
        ]
        for geometry in dict.fromkeys(r["geometry"] for r in rows):
            subset = [r for r in rows if r["geometry"] == geometry]
            mean_auc = _mean(subset, "val_auc")
            if mean_auc is not None:
                sections.append(
                    f"- {geometry}: mean validation AUC {mean_auc:.3f} over "
                    f"{len(subset)} folds",
                )
            curves = {
                f"fold {r['fold']}": read_roc_points(
                    stream_rocs[f"{family}_{geometry}_fold{r['fold']}"],
                )
                for r in subset
                if f"{family}_{geometry}_fold{r['fold']}" in stream_rocs
            }
            if curves:
                name = f"roc_{family}_{geometry}.svg"
                svg_utils.write_svg(
                    roc_figure(curves, f"{family} {geometry} validation ROC"),
                    out / name,
                )
                sections.append(f"  ![{family} {geometry} ROC]({name})")
        sections.append("")

    histories = sorted(streams.rglob("*.history.csv"))
    for history in histories:
        relative = history.relative_to(streams)
        family, geometry = relative.parts[0], relative.parts[1]
        fold = history.name.removesuffix(".history.csv")
        svg_utils.write_svg(
            loss_figure(history, f"{family} {geometry} {fold} loss"),
            out / "loss" / f"{family}_{geometry}_{fold}.svg",
        )
    if histories:
        sections += [
            f"Loss curves of {len(histories)} streams are in `loss/`.",
            "",
        ]

    ensembles = None if ensemble_dir is None else Path(ensemble_dir)
    if ensembles is not None and (ensembles / "ensembles.csv").exists():
        rows = read_table_csv(ensembles / "ensembles.csv")
        write_table_csv(rows, ENSEMBLE_COLUMNS, out / "ensembles.csv")
        sections += [
            "## Stacked generalization",
            "",
            _markdown_table(rows, ENSEMBLE_COLUMNS),
            "",
        ]
        curves = {
            stem: read_roc_points(path)
            for stem, path in _roc_files(ensembles / "roc").items()
        }
        if curves:
            svg_utils.write_svg(
                roc_figure(curves, "Ensemble validation ROC"),
                out / "roc_ensembles.svg",
            )
            sections += ["![Ensemble ROC](roc_ensembles.svg)", ""]
    else:
        logger.info("No ensemble results; the report covers streams only")

    evaluation = None if evaluation_dir is None else Path(evaluation_dir)
    if evaluation is not None and (evaluation / "metrics.csv").exists():
        rows = read_table_csv(evaluation / "metrics.csv")
        write_table_csv(rows, EVALUATION_COLUMNS, out / "evaluation.csv")
        sections += [
            "## Held-out findings",
            "",
            _markdown_table(rows, EVALUATION_COLUMNS),
            "",
        ]
        curves = {
            stem: read_roc_points(path)
            for stem, path in _roc_files(evaluation / "roc").items()
        }
        if curves:
            svg_utils.write_svg(
                roc_figure(curves, "Held-out findings ROC"),
                out / "roc_evaluation.svg",
            )
            sections += ["![Held-out ROC](roc_evaluation.svg)", ""]

    report_path = out / "report.md"
    report_path.write_text("\n".join(sections) + "\n", encoding="utf-8")
    return report_path


def format_metric(value: float | None) -> str:
    """Three decimals, or ``n/a`` when undefined."""
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "n/a"
    return f"{value:.3f}"


def convert_report(report_path: str | Path, output_format: str) -> Path:
    """Convert the Markdown summary with pandoc, next to the source.

    Figures stay as relative links, so the converted file must live in the
    same directory as the SVGs.

    Raises:
        ReportError: If the summary does not exist.
        PandocNotInstalledError: If pypandoc cannot be imported.
        PandocConversionError: If pandoc rejects the format or fails.
    """
    source = Path(report_path)
    if not source.is_file():
        raise ReportError(f"no report to convert at {source}")
    try:
        import pypandoc  # noqa: PLC0415
    except ImportError:
        raise PandocNotInstalledError(
            "converting the report needs pypandoc: pip install pypandoc",
        ) from None

    target = source.with_suffix(f".{output_format}")
    logger.info("Converting %s to %s", source.name, output_format)
    try:
        pypandoc.convert_file(
            str(source),
            output_format,
            format="gfm",
            outputfile=str(target),
            extra_args=[
                "--standalone",
                f"--resource-path={source.parent}",
                "--metadata=title:Lesion classification report",
            ],
        )
    except (OSError, RuntimeError) as e:
        raise PandocConversionError(
            f"cannot convert {source.name} to {output_format!r}: {e}",
        ) from e
    return target
