"""Pipeline stages: each reads its upstream outputs and publishes its own.

Every stage works inside a :class:`StageWorkspace`, so a failed run leaves
the previous outputs untouched, and finishes by writing a stage manifest
with the digests of the inputs it consumed. Downstream stages verify those
digests before they start.
"""

from __future__ import annotations

import json
import logging
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import TYPE_CHECKING, Any

from tqdm import tqdm

from lesionstack.artifact_io import (
    StageWorkspace,
    check_upstream,
    combined_digest,
    file_digest,
    stage_digest,
    write_stage_manifest,
)
from lesionstack.config import CONFIG_FILENAME, PipelineConfig, write_config
from lesionstack.ensemble import (
    archive_features,
    build_ensemble,
    expected_ordering,
    load_ensemble,
    predict_findings,
    save_ensemble,
    train_ensemble,
)
from lesionstack.exceptions import (
    ConfigurationError,
    DataError,
    ManifestError,
    MissingArtifactError,
)
from lesionstack.metrics import BinaryMetrics, summarize
from lesionstack.patchgen import (
    PatchArchive,
    extract_study,
    load_patch_bank,
    write_patch_archive,
)
from lesionstack.phantom import iter_cohort, write_cohort
from lesionstack.preprocess import (
    fit_stats,
    standardize_study,
    unify_grid,
    write_stats,
)
from lesionstack.report import (
    ENSEMBLE_COLUMNS,
    EVALUATION_COLUMNS,
    STREAM_COLUMNS,
    convert_report,
    read_table_csv,
    report_tables,
    write_roc_points,
    write_table_csv,
)
from lesionstack.seeding import derive_seed
from lesionstack.trainer import (
    FoldSplit,
    JobFilter,
    grid_search_focal,
    make_folds,
    plan_stream_jobs,
    run_all_streams,
    stream_config_for,
    write_focal_grid,
)
from lesionstack.volstore import (
    ClinSig,
    Cohort,
    CohortManifest,
    Modality,
    StudyEntry,
    iter_studies,
    load_manifest,
    load_study,
    natural_key,
    read_findings_csv,
    read_predictions_csv,
    write_findings_csv,
    write_manifest,
    write_predictions_csv,
    write_volume,
)

if TYPE_CHECKING:
    from collections.abc import Iterator, Mapping, Sequence

    from lesionstack.patchgen import PatchSpec
    from lesionstack.trainer import StreamReportRow
    from lesionstack.volstore import Study

logger = logging.getLogger(__name__)

STAGE_DIRS = {
    "gen-phantom": "phantom",
    "preprocess": "preprocessed",
    "extract": "patches",
    "train": "streams",
    "ensemble": "ensemble",
    "predict": "predictions",
    "evaluate": "evaluation",
    "report": "report",
}
HIDDEN_LABELS = "hidden_labels.csv"
FOLDS_FILENAME = "folds.json"


@dataclass(frozen=True)
class EvaluationRow:
    """Metrics of one ensemble's predictions against known labels."""

    selection: str
    metrics: BinaryMetrics

    def to_row(self) -> dict[str, Any]:
        """Flat CSV row."""
        return {
            "channels": self.selection,
            "findings": self.metrics.count,
            "accuracy": self.metrics.accuracy,
            "auc": self.metrics.auc,
            "sensitivity": self.metrics.sensitivity,
            "specificity": self.metrics.specificity,
        }


def _write_study(study: Study, directory: Path) -> StudyEntry:
    study_dir = directory / study.subject_id
    volumes = {
        modality: write_volume(
            study.volume(modality),
            study_dir / modality.manifest_key,
        )
        for modality in Modality
    }
    findings_path = study_dir / "findings.csv"
    write_findings_csv(study.findings, findings_path)
    return StudyEntry(study.subject_id, volumes, findings_path, study.cohort)


def cohort_digest(manifest: CohortManifest) -> str:
    """Digest over every file of the non-excluded studies of a manifest."""
    digests = {}
    for subject_id in manifest.subject_ids():
        entry = manifest.studies[subject_id]
        paths = [entry.findings]
        for path in entry.volumes.values():
            base = path.with_suffix("") if path.suffix else path
            paths += sorted(base.parent.glob(f"{base.name}.*"))
        for path in paths:
            key = f"{subject_id}/{path.name}"
            digests[key] = file_digest(path)
    return combined_digest(digests)


def _extract_subject(
    manifest_path: str,
    subject_id: str,
    spec: PatchSpec,
    seed: int,
    out_dir: str,
) -> tuple[str, bool]:
    study = load_study(load_manifest(manifest_path), subject_id)
    patch_sets = extract_study(study, spec, derive_seed(seed, subject_id))
    write_patch_archive(subject_id, patch_sets, spec, out_dir)
    return subject_id, study.has_positive


def read_folds(patches_dir: str | Path) -> list[FoldSplit]:
    """Fold splits written by the extract stage."""
    path = Path(patches_dir) / FOLDS_FILENAME
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read folds {path}: {exc}") from exc
    return [FoldSplit.from_dict(entry) for entry in document]


def _merge_stream_rows(
    path: Path,
    rows: Sequence[Mapping[str, Any]],
    geometry_order: Sequence[str],
) -> list[dict[str, Any]]:
    merged: dict[tuple[str, str], dict[str, Any]] = {}
    if path.exists():
        for row in read_table_csv(path):
            merged[row["geometry"], str(row["fold"])] = dict(row)
    for row in rows:
        merged[row["geometry"], str(row["fold"])] = dict(row)

    def order(key: tuple[str, str]) -> tuple[int, int]:
        geometry, fold = key
        rank = (
            geometry_order.index(geometry)
            if geometry in geometry_order
            else len(geometry_order)
        )
        return rank, int(fold)

    return [merged[key] for key in sorted(merged, key=order)]


class Pipeline:
    """Runs the stages of one configuration inside its output directory."""

    def __init__(
        self,
        config: PipelineConfig,
        *,
        show_progress: bool = False,
    ) -> None:
        """Initialize with a resolved config.

        Args:
            config: The pipeline configuration.
            show_progress: Show progress bars for long loops.
        """
        self.config = config
        self.show_progress = show_progress
        self.output_dir = Path(config.output_dir)

    def stage_dir(self, stage: str) -> Path:
        """Output directory of a stage."""
        return self.output_dir / STAGE_DIRS[stage]

    def write_config(self) -> Path:
        """Snapshot the resolved config into the output directory."""
        return write_config(self.config, self.output_dir / CONFIG_FILENAME)

    def _digest(self, stage: str) -> str:
        return stage_digest(self.stage_dir(stage), stage)

    def _finish(
        self,
        work: Path,
        stage: str,
        inputs: Mapping[str, str],
        sections: Sequence[str],
    ) -> None:
        write_stage_manifest(
            work,
            stage=stage,
            inputs=inputs,
            config=self.config.stage_dict(*sections),
            seed=self.config.seed,
        )
        logger.info("Stage %s finished", stage)

    def gen_phantom(self) -> Path:
        """Write a synthetic cohort and its manifest.

        Returns:
            The manifest path.
        """
        config = self.config
        spec = replace(
            config.phantom,
            seed=derive_seed(config.seed, "phantom", config.phantom.seed),
        )
        with StageWorkspace(self.stage_dir("gen-phantom")) as work:
            write_cohort(
                iter_cohort(spec, show_progress=self.show_progress),
                work,
            )
            self._finish(work, "gen-phantom", {}, ("phantom",))
        return self.stage_dir("gen-phantom") / "manifest.json"

    def _source_manifest(self) -> CohortManifest:
        path = self.config.manifest_path
        if self.config.manifest is None and not path.exists():
            raise MissingArtifactError(
                f"no phantom cohort at {path}",
                "gen-phantom",
            )
        if self.config.manifest is None:
            self._digest("gen-phantom")
        return load_manifest(path)

    def preprocess(self) -> Path:
        """Unify grids and standardize intensities with training stats.

        Unified volumes are staged on disk and the statistics are fitted by
        streaming over them, so the cohort is never held in memory.

        Returns:
            The manifest of the standardized cohort.
        """
        source = self._source_manifest()
        inputs = {"cohort": cohort_digest(source)}
        grid = self.config.grid
        with StageWorkspace(self.stage_dir("preprocess")) as work:
            staging = work / "unified"
            entries = {}
            for study in tqdm(
                iter_studies(source),
                total=len(source.subject_ids()),
                desc="unify",
                disable=not self.show_progress,
            ):
                unified = unify_grid(study, grid)
                entries[study.subject_id] = _write_study(unified, staging)
            unified_manifest = CohortManifest(root=staging, studies=entries)
            if not unified_manifest.subject_ids(Cohort.TRAIN):
                raise DataError("the cohort has no training subject")

            def studies() -> Iterator[Study]:
                return iter_studies(unified_manifest, Cohort.TRAIN)

            stats = {m: fit_stats(studies, m) for m in Modality}
            for modality, entry in stats.items():
                logger.info(
                    "%s: mean %.6g, std %.6g over %d voxels",
                    modality,
                    entry.mean,
                    entry.std,
                    entry.count,
                )
            standardized = {}
            for study in iter_studies(unified_manifest):
                standardized[study.subject_id] = _write_study(
                    standardize_study(study, stats),
                    work,
                )
            shutil.rmtree(staging)
            write_stats(stats, work / "stats.json")
            write_manifest(
                CohortManifest(root=work, studies=standardized),
                work / "manifest.json",
            )
            self._finish(work, "preprocess", inputs, ("grid",))
        return self.stage_dir("preprocess") / "manifest.json"

    def extract(self) -> Path:
        """Sample patch sets per training subject and split the folds.

        Returns:
            The patches directory.
        """
        config = self.config
        inputs = {"preprocess": self._digest("preprocess")}
        manifest_path = self.stage_dir("preprocess") / "manifest.json"
        manifest = load_manifest(manifest_path)
        subjects = manifest.subject_ids(Cohort.TRAIN)
        seed = derive_seed(config.seed, "extract")
        with StageWorkspace(self.stage_dir("extract")) as work:
            archives = work / "archives"
            archives.mkdir()
            jobs = [
                (str(manifest_path), sid, config.patches, seed, str(archives))
                for sid in subjects
            ]
            if config.workers <= 1:
                results = [
                    _extract_subject(*job)
                    for job in tqdm(
                        jobs,
                        desc="extract",
                        disable=not self.show_progress,
                    )
                ]
            else:
                with ProcessPoolExecutor(max_workers=config.workers) as pool:
                    futures = [pool.submit(_extract_subject, *j) for j in jobs]
                    results = [future.result() for future in futures]
            strata = dict(results)
            folds = make_folds(
                strata,
                config.train.folds,
                derive_seed(config.seed, "folds"),
            )
            (work / FOLDS_FILENAME).write_text(
                json.dumps([f.to_dict() for f in folds], indent=2),
                encoding="utf-8",
            )
            self._finish(work, "extract", inputs, ("patches", "train"))
        return self.stage_dir("extract")

    def archive_paths(self) -> list[Path]:
        """Patch archive headers in subject order."""
        return sorted(
            (self.stage_dir("extract") / "archives").glob("*.patches.json"),
            key=lambda p: natural_key(p.name),
        )

    def train(
        self,
        only: str | None = None,
        *,
        grid_search: bool = False,
    ) -> list[StreamReportRow]:
        """Train the stream matrix, or run the focal-parameter grid search.

        Existing checkpoints whose job definition is unchanged are reused,
        so ``only`` runs accumulate into the same stage.
        """
        config = self.config
        inputs = {"extract": self._digest("extract")}
        folds = read_folds(self.stage_dir("extract"))
        archives = self.archive_paths()
        job_filter = JobFilter.parse(only)
        with StageWorkspace(self.stage_dir("train"), keep_existing=True) as work:
            if grid_search:
                self._grid_search(work, folds, archives, job_filter)
                rows = []
            else:
                rows = run_all_streams(
                    archives,
                    folds,
                    families=config.families,
                    geometries=config.patches.geometries,
                    train_config=config.train,
                    focal=config.focal,
                    out_dir=work,
                    seed=derive_seed(config.seed, "train"),
                    stream_overrides=config.streams,
                    inputs_digest=inputs["extract"],
                    only=job_filter,
                    workers=config.workers,
                    show_progress=self.show_progress,
                )
                self._write_stream_tables(work, rows)
            self._finish(
                work,
                "train",
                inputs,
                ("patches", "streams", "train", "focal"),
            )
        return rows

    def _write_stream_tables(
        self,
        work: Path,
        rows: Sequence[StreamReportRow],
    ) -> None:
        labels = [g.label for g in self.config.patches.geometries]
        for family in self.config.families:
            family_rows = [r.to_row() for r in rows if r.family == family]
            if not family_rows:
                continue
            path = work / f"streams_{family}.csv"
            write_table_csv(
                _merge_stream_rows(path, family_rows, labels),
                STREAM_COLUMNS,
                path,
            )
        for row in rows:
            if row.validation.curve is not None:
                write_roc_points(
                    row.validation.curve,
                    work
                    / "roc"
                    / f"{row.family}_{row.geometry}_fold{row.fold}.csv",
                )

    def _grid_search(
        self,
        work: Path,
        folds: Sequence[FoldSplit],
        archives: Sequence[Path],
        job_filter: JobFilter,
    ) -> None:
        config = self.config
        jobs = plan_stream_jobs(
            config.families,
            config.patches.geometries,
            folds,
            job_filter,
        )
        if not jobs:
            raise ConfigurationError(f"no stream job matches {job_filter}")
        job = jobs[0]
        logger.info(
            "Focal grid search over %d settings on %s",
            len(config.focal_grid),
            job.name,
        )
        bank = load_patch_bank(
            [PatchArchive(p) for p in archives],
            job.family,
            job.geometry,
        )
        results = grid_search_focal(
            stream_config_for(job.family, job.geometry, config.streams),
            {f.fold: f for f in folds}[job.fold],
            bank,
            config.focal_grid,
            config.train,
            derive_seed(config.seed, "grid", job.name),
        )
        write_focal_grid(results, work / "focal_grid.csv")

    def ensemble(self) -> list[dict[str, Any]]:
        """Meta-train one ensemble per configured family selection."""
        config = self.config
        streams_dir = self.stage_dir("train").resolve()
        inputs = {
            "extract": self._digest("extract"),
            "train": self._digest("train"),
        }
        check_upstream(streams_dir, "train", {"extract": inputs["extract"]})
        folds = read_folds(self.stage_dir("extract"))
        fold_numbers = [f.fold for f in folds]
        validation_ids = {
            f.fold: f for f in folds
        }[config.ensemble_validation_fold].val_ids
        archives = [PatchArchive(p) for p in self.archive_paths()]
        rows = []
        with StageWorkspace(self.stage_dir("ensemble")) as work:
            for selection in config.ensembles:
                model = build_ensemble(
                    selection,
                    streams_dir,
                    config.patches.geometries,
                    fold_numbers,
                    derive_seed(config.seed, "ensemble"),
                    hidden_width=config.meta_hidden_width,
                    validation_fold=config.ensemble_validation_fold,
                )
                table = archive_features(
                    model,
                    archives,
                    validation_ids,
                    show_progress=self.show_progress,
                )
                row = train_ensemble(
                    model,
                    table,
                    validation_ids,
                    config.focal,
                    config.meta,
                    derive_seed(config.seed, "meta", selection.value),
                    config.threshold,
                )
                save_ensemble(model, work / f"{selection.value}.json")
                if row.validation.curve is not None:
                    write_roc_points(
                        row.validation.curve,
                        work / "roc" / f"{selection.value}.csv",
                    )
                logger.info(
                    "Ensemble %s: %d inputs, validation AUC %s",
                    selection,
                    row.inputs,
                    row.validation.auc,
                )
                rows.append(row.to_row())
            write_table_csv(rows, ENSEMBLE_COLUMNS, work / "ensembles.csv")
            self._finish(
                work,
                "ensemble",
                inputs,
                (
                    "ensembles",
                    "ensemble_validation_fold",
                    "meta_hidden_width",
                    "meta_train",
                    "train",
                    "focal",
                    "threshold",
                ),
            )
        return rows

    def predict(self, cohort: Cohort | None = Cohort.TEST) -> list[Path]:
        """Score every finding of a cohort with each ensemble.

        Args:
            cohort: Cohort to score; ``None`` scores every study.

        Returns:
            One predictions CSV per ensemble.
        """
        config = self.config
        inputs = {
            "preprocess": self._digest("preprocess"),
            "ensemble": self._digest("ensemble"),
        }
        manifest = load_manifest(self.stage_dir("preprocess") / "manifest.json")
        if not manifest.subject_ids(cohort):
            raise DataError(f"no studies in cohort {cohort or 'all'}")
        folds = [f.fold for f in read_folds(self.stage_dir("extract"))]
        written = []
        with StageWorkspace(self.stage_dir("predict")) as work:
            for selection in config.ensembles:
                model = load_ensemble(
                    self.stage_dir("ensemble") / f"{selection.value}.json",
                    expected_ordering(
                        selection,
                        config.patches.geometries,
                        folds,
                    ),
                )
                probabilities, failures = predict_findings(
                    model,
                    iter_studies(manifest, cohort),
                    config.patches,
                )
                if failures:
                    logger.warning(
                        "%s: %d findings could not be scored",
                        selection,
                        len(failures),
                    )
                    write_table_csv(
                        [
                            {"subject_id": s, "finding_id": f, "error": e}
                            for (s, f), e in failures.items()
                        ],
                        ("subject_id", "finding_id", "error"),
                        work / f"{selection.value}.failures.csv",
                    )
                path = work / f"{selection.value}.csv"
                write_predictions_csv(
                    [(s, f, p) for (s, f), p in probabilities.items()],
                    path,
                )
                written.append(self.stage_dir("predict") / path.name)
            self._finish(
                work,
                "predict",
                inputs,
                ("ensembles", "patches"),
            )
        return written

    def _truth(self, labels: Path | None) -> dict[tuple[str, str], int]:
        manifest = load_manifest(self.stage_dir("preprocess") / "manifest.json")
        findings = [
            f
            for sid in manifest.subject_ids()
            for f in read_findings_csv(manifest.studies[sid].findings)
        ]
        hidden = labels or self.config.manifest_path.parent / HIDDEN_LABELS
        if labels is not None or hidden.exists():
            findings += read_findings_csv(hidden)
        return {
            f.key: 1 if f.clin_sig is ClinSig.POSITIVE else 0
            for f in findings
            if f.is_labelled
        }

    def evaluate(self, labels: str | Path | None = None) -> list[EvaluationRow]:
        """Score stored predictions against known or withheld labels.

        Args:
            labels: Findings CSV with the true classes; defaults to the
                cohort's ``hidden_labels.csv`` plus the labelled findings.

        Raises:
            DataError: If no prediction has a known label.
        """
        config = self.config
        inputs = {"predict": self._digest("predict")}
        truth = self._truth(None if labels is None else Path(labels))
        rows = []
        with StageWorkspace(self.stage_dir("evaluate")) as work:
            for selection in config.ensembles:
                predictions = read_predictions_csv(
                    self.stage_dir("predict") / f"{selection.value}.csv",
                )
                keys = [k for k in predictions if k in truth]
                if len(keys) < len(predictions):
                    logger.warning(
                        "%s: %d predictions have no known label",
                        selection,
                        len(predictions) - len(keys),
                    )
                if not keys:
                    raise DataError(
                        f"no prediction of {selection} has a known label",
                    )
                metrics = summarize(
                    [predictions[k] for k in keys],
                    [truth[k] for k in keys],
                    config.threshold,
                )
                if metrics.curve is not None:
                    write_roc_points(
                        metrics.curve,
                        work / "roc" / f"{selection.value}.csv",
                    )
                rows.append(EvaluationRow(selection.value, metrics))
            write_table_csv(
                [r.to_row() for r in rows],
                EVALUATION_COLUMNS,
                work / "metrics.csv",
            )
            self._finish(work, "evaluate", inputs, ("threshold",))
        return rows

    def report(self, output_format: str = "md") -> Path:
        """Render tables and figures from stored metrics.

        Args:
            output_format: ``md`` or any pandoc output format.

        Returns:
            Path of the report in the requested format.
        """
        inputs = {"train": self._digest("train")}
        optional = {}
        for stage in ("ensemble", "evaluate"):
            if (self.stage_dir(stage) / "stage.json").exists():
                inputs[stage] = self._digest(stage)
                optional[stage] = self.stage_dir(stage)
        with StageWorkspace(self.stage_dir("report")) as work:
            report_path = report_tables(
                self.stage_dir("train"),
                optional.get("ensemble"),
                work,
                evaluation_dir=optional.get("evaluate"),
            )
            if output_format != "md":
                report_path = convert_report(report_path, output_format)
            self._finish(work, "report", inputs, ())
        return self.stage_dir("report") / report_path.name
