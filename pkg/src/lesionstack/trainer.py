"""Cross-validation folds, the Nesterov optimizer and stream training."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np
from tqdm import tqdm

from lesionstack import autodiff as ad
from lesionstack.channels import FAMILIES
from lesionstack.constants import (
    BATCH_SIZE,
    DECISION_THRESHOLD,
    FOLDS,
    LEARNING_RATE,
    MAX_EPOCHS,
    NESTEROV_MOMENTUM,
    PATIENCE,
    WEIGHT_DECAY,
)
from lesionstack.densenet import (
    StreamConfig,
    StreamModel,
    build_stream,
    load_checkpoint,
    read_checkpoint_manifest,
    save_checkpoint,
)
from lesionstack.exceptions import (
    CheckpointError,
    ConfigurationError,
    DataError,
    NumericError,
    PatchGeometryError,
)
from lesionstack.losses import (
    FocalParams,
    batch_loss,
    focal_loss_tensor,
    labels_to_signed,
)
from lesionstack.metrics import BinaryMetrics, summarize
from lesionstack.patchgen import (
    PatchArchive,
    PatchBank,
    PatchGeometry,
    load_patch_bank,
)
from lesionstack.seeding import derive_seed
from lesionstack.volstore import natural_key

if TYPE_CHECKING:
    from collections.abc import Callable, Iterable, Mapping, Sequence

    from numpy.typing import NDArray

    from lesionstack.volstore import Study

logger = logging.getLogger(__name__)

HISTORY_HEADER = ("epoch", "train_loss", "val_loss")


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer, batching and early-stopping settings."""

    learning_rate: float = LEARNING_RATE
    momentum: float = NESTEROV_MOMENTUM
    weight_decay: float = WEIGHT_DECAY
    max_epochs: int = MAX_EPOCHS
    batch_size: int = BATCH_SIZE
    patience: int = PATIENCE
    folds: int = FOLDS
    seed: int = 0

    def __post_init__(self) -> None:
        """Validate ranges."""
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigurationError(
                "learning_rate and weight_decay must be >= 0",
            )
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(
                f"momentum must be in [0, 1), got {self.momentum}",
            )
        if self.max_epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ConfigurationError(
                "max_epochs, batch_size and patience must be >= 1",
            )
        if self.patience >= self.max_epochs:
            raise ConfigurationError(
                f"patience {self.patience} must be below max_epochs "
                f"{self.max_epochs}",
            )
        if self.folds < 2:
            raise ConfigurationError(f"folds must be >= 2, got {self.folds}")

    def to_dict(self) -> dict[str, Any]:
        """JSON-ready representation."""
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> TrainConfig:
        """Build from a JSON document; omitted fields keep defaults."""
        return cls(**data)


@dataclass(frozen=True)
class FoldSplit:
    """Subject ids on both sides of one cross-validation fold."""

    fold: int
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]

    def to_dict(self) -> dict[str, Any]:
        """JSON-ready representation."""
        return {
            "fold": self.fold,
            "train_ids": list(self.train_ids),
            "val_ids": list(self.val_ids),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> FoldSplit:
        """Build from :meth:`to_dict` output."""
        return cls(
            fold=int(data["fold"]),
            train_ids=tuple(data["train_ids"]),
            val_ids=tuple(data["val_ids"]),
        )


def subject_strata(studies: Iterable[Study]) -> dict[str, bool]:
    """Subject id -> whether the study holds a significant finding."""
    return {study.subject_id: study.has_positive for study in studies}


def make_folds(
    strata: Mapping[str, bool],
    k: int,
    seed: int,
) -> list[FoldSplit]:
    """Stratified subject-level k-fold partition.

    Each stratum is shuffled and dealt round-robin; the negative stratum
    continues where the positive one stopped, so fold sizes differ by at
    most one.

    Args:
        strata: Subject id -> carries a significant finding.
        k: Number of folds.
        seed: Shuffle seed.

    Raises:
        DataError: If there are fewer subjects than folds.
    """
    if k < 2:
        raise ConfigurationError(f"need at least 2 folds, got {k}")
    if len(strata) < k:
        raise DataError(f"cannot split {len(strata)} subjects into {k} folds")
    rng = np.random.default_rng(seed)
    assigned: list[list[str]] = [[] for _ in range(k)]
    cursor = 0
    for positive in (True, False):
        members = sorted(
            (s for s, p in strata.items() if p is positive),
            key=natural_key,
        )
        if 0 < len(members) < k:
            logger.warning(
                "Only %d %s subjects for %d folds; some validation folds "
                "will lack that class",
                len(members),
                "positive" if positive else "negative",
                k,
            )
        for subject in (members[i] for i in rng.permutation(len(members))):
            assigned[cursor % k].append(subject)
            cursor += 1
    everyone = set(strata)
    return [
        FoldSplit(
            fold=fold,
            train_ids=tuple(sorted(everyone - set(ids), key=natural_key)),
            val_ids=tuple(sorted(ids, key=natural_key)),
        )
        for fold, ids in enumerate(assigned)
    ]


def sgd_nesterov_step(
    parameters: Iterable[ad.Parameter],
    config: TrainConfig,
) -> None:
    """One Nesterov SGD update with coupled L2 decay.

    ``g' = g + wd * w``; ``v <- mu * v - lr * g'``;
    ``w <- w + mu * v - lr * g'``. Frozen parameters are skipped.

    Raises:
        NumericError: If a trainable parameter has no gradient.
    """
    lr, mu, wd = config.learning_rate, config.momentum, config.weight_decay
    for parameter in parameters:
        if not parameter.requires_grad:
            continue
        if parameter.grad is None:
            raise NumericError(f"parameter {parameter.name} has no gradient")
        grad = parameter.grad + wd * parameter.data
        parameter.velocity = (mu * parameter.velocity - lr * grad).astype(
            parameter.data.dtype,
        )
        parameter.data = (
            parameter.data + mu * parameter.velocity - lr * grad
        ).astype(parameter.data.dtype)


@dataclass
class EarlyStopping:
    """Tracks the best validation loss and the epochs since it."""

    patience: int
    best_loss: float = math.inf
    best_epoch: int | None = None
    bad_epochs: int = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record an epoch; True if it strictly improved the best loss."""
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        """Whether patience is exhausted."""
        return self.bad_epochs >= self.patience


@dataclass(frozen=True)
class EpochRecord:
    """Losses of one epoch."""

    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class TrainingResult:
    """A trained stream with its loss curves."""

    model: StreamModel
    history: list[EpochRecord] = field(default_factory=list)
    stopped_early: bool = False


def write_history(history: Sequence[EpochRecord], path: str | Path) -> None:
    """Write ``epoch,train_loss,val_loss`` rows."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(HISTORY_HEADER)
        for record in history:
            writer.writerow(
                [record.epoch, repr(record.train_loss), repr(record.val_loss)],
            )


def read_history(path: str | Path) -> list[EpochRecord]:
    """Read a history CSV written by :func:`write_history`."""
    with Path(path).open(newline="", encoding="utf-8") as handle:
        return [
            EpochRecord(
                epoch=int(row["epoch"]),
                train_loss=float(row["train_loss"]),
                val_loss=float(row["val_loss"]),
            )
            for row in csv.DictReader(handle)
        ]


def _labelled(bank: PatchBank) -> PatchBank:
    return bank.select(bank.labels >= 0)


def eval_logits(
    model: StreamModel,
    patches: NDArray[np.floating],
    batch_size: int,
) -> NDArray[np.float64]:
    """Eval-mode logits without recording a graph."""
    out = np.empty(len(patches), dtype=np.float64)
    with ad.no_grad():
        for start in range(0, len(patches), batch_size):
            chunk = patches[start : start + batch_size]
            out[start : start + len(chunk)] = model.logits(chunk, "eval").data
    return out


def train_stream(
    model: StreamModel,
    fold: FoldSplit,
    bank: PatchBank,
    focal: FocalParams,
    config: TrainConfig,
    seed: int,
    *,
    show_progress: bool = False,
) -> TrainingResult:
    """Train one stream on a fold and keep its best-validation state.

    Only labelled patches are used. Each epoch shuffles the training
    patches into mini-batches (the last one may be smaller), accumulates
    the training loss while updating, then measures the validation loss in
    eval mode.

    Args:
        model: Freshly built stream whose geometry matches the bank.
        fold: Subject split.
        bank: Patches of at least every fold subject.
        focal: Loss parameters.
        config: Optimizer settings.
        seed: Seed of the shuffle and dropout generators.
        show_progress: Show a per-epoch progress bar.

    Raises:
        PatchGeometryError: If the bank does not fit the model.
        DataError: If a side of the fold is empty or the validation side
            holds a single class.
    """
    if tuple(bank.x.shape[1:]) != model.config.input_shape:
        raise PatchGeometryError(
            f"patches of shape {bank.x.shape[1:]} do not fit the "
            f"{model.config.input_shape} stream",
        )
    train = _labelled(bank.for_subjects(fold.train_ids))
    val = _labelled(bank.for_subjects(fold.val_ids))
    if len(train) == 0 or len(val) == 0:
        raise DataError(
            f"fold {fold.fold} has {len(train)} training and {len(val)} "
            "validation patches",
        )
    if set(train.subject_ids.tolist()) & set(val.subject_ids.tolist()):
        raise DataError(f"fold {fold.fold} shares subjects across its sides")
    if len(np.unique(val.labels)) < 2:
        raise DataError(
            f"validation side of fold {fold.fold} holds a single class; "
            "its AUC is undefined",
        )

    y_train = labels_to_signed(train.labels)
    y_val = labels_to_signed(val.labels)
    shuffle_rng = np.random.default_rng(derive_seed(seed, "shuffle"))
    dropout_rng = np.random.default_rng(derive_seed(seed, "dropout"))
    stopper = EarlyStopping(config.patience)
    best_state = model.snapshot()
    result = TrainingResult(model=model)
    trainable = [p for p in model.parameters.values() if p.requires_grad]

    epochs = tqdm(
        range(1, config.max_epochs + 1),
        desc=f"{model.config.geometry.label} fold {fold.fold}",
        disable=not show_progress,
        leave=False,
    )
    for epoch in epochs:
        order = shuffle_rng.permutation(len(train))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            index = order[start : start + config.batch_size]
            model.zero_grad()
            loss = focal_loss_tensor(
                model.logits(train.x[index], "train", dropout_rng),
                y_train[index],
                focal,
            )
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(
                    f"training loss diverged at epoch {epoch}: {value}",
                )
            loss.backward()
            sgd_nesterov_step(trainable, config)
            total += value * len(index)
        train_loss = total / len(order)
        val_loss = batch_loss(
            eval_logits(model, val.x, config.batch_size),
            y_val,
            focal,
        )
        result.history.append(EpochRecord(epoch, train_loss, val_loss))
        if stopper.update(epoch, val_loss):
            best_state = model.snapshot()
        logger.debug(
            "%s fold %d epoch %d: train %.5f val %.5f",
            model.config.geometry.label,
            fold.fold,
            epoch,
            train_loss,
            val_loss,
        )
        epochs.set_postfix(train=f"{train_loss:.4f}", val=f"{val_loss:.4f}")
        if stopper.should_stop:
            result.stopped_early = True
            logger.info(
                "Early stop of %s fold %d at epoch %d (best %d)",
                model.config.geometry.label,
                fold.fold,
                epoch,
                stopper.best_epoch,
            )
            break

    model.restore(best_state)
    model.zero_grad()
    model.metadata.epochs_seen = len(result.history)
    model.metadata.best_epoch = stopper.best_epoch
    model.metadata.best_val_loss = stopper.best_loss
    return result


def evaluate_bank(
    model: StreamModel,
    bank: PatchBank,
    threshold: float = DECISION_THRESHOLD,
    batch_size: int = BATCH_SIZE,
) -> BinaryMetrics:
    """Metrics of a stream on the labelled patches of a bank."""
    labelled = _labelled(bank)
    if len(labelled) == 0:
        return BinaryMetrics(0, None, None, None, None)
    probabilities = model.predict_proba(labelled.x, batch_size)
    return summarize(probabilities, labelled.labels, threshold)


@dataclass(frozen=True)
class StreamJob:
    """One (family, geometry, fold) training job."""

    family: str
    geometry: PatchGeometry
    fold: int

    @property
    def name(self) -> str:
        """Readable job name."""
        return f"{self.family}/{self.geometry.label}/fold{self.fold}"

    def checkpoint_path(self, root: str | Path) -> Path:
        """Checkpoint manifest location below a stage directory."""
        return (
            Path(root)
            / self.family
            / self.geometry.label
            / f"fold{self.fold}.json"
        )

    def history_path(self, root: str | Path) -> Path:
        """Loss-curve CSV location below a stage directory."""
        return self.checkpoint_path(root).with_suffix(".history.csv")


@dataclass(frozen=True)
class JobFilter:
    """Selects jobs by ``family=``, ``geometry=`` and ``fold=`` terms."""

    family: str | None = None
    geometry: str | None = None
    fold: int | None = None

    @classmethod
    def parse(cls, text: str | None) -> JobFilter:
        """Parse ``"geometry=96,fold=2"``.

        Raises:
            ConfigurationError: On an unknown key or malformed term.
        """
        if not text:
            return cls()
        values: dict[str, Any] = {}
        for term in text.split(","):
            key, sep, value = term.partition("=")
            key = key.strip()
            if not sep or key not in {"family", "geometry", "fold"}:
                raise ConfigurationError(
                    f"invalid --only term {term!r}; use family=, geometry= "
                    "or fold=",
                )
            if key != "fold":
                values[key] = value.strip()
                continue
            try:
                values[key] = int(value)
            except ValueError:
                raise ConfigurationError(
                    f"fold in --only must be an integer, got {value!r}",
                ) from None
        return cls(**values)

    def matches(self, job: StreamJob) -> bool:
        """Whether a job passes the filter."""
        if self.family is not None and job.family != self.family:
            return False
        if self.fold is not None and job.fold != self.fold:
            return False
        if self.geometry is not None:
            return job.geometry == PatchGeometry.parse(self.geometry)
        return True


@dataclass(frozen=True)
class StreamReportRow:
    """Per-fold metrics of one stream, in training-table layout."""

    family: str
    geometry: str
    fold: int
    train: BinaryMetrics
    validation: BinaryMetrics
    findings: BinaryMetrics
    epochs: int
    best_epoch: int | None

    def to_row(self) -> dict[str, Any]:
        """Flat CSV row."""
        return {
            "family": self.family,
            "geometry": self.geometry,
            "fold": self.fold,
            "train_accuracy": self.train.accuracy,
            "train_auc": self.train.auc,
            "val_accuracy": self.validation.accuracy,
            "val_auc": self.validation.auc,
            "val_sensitivity": self.validation.sensitivity,
            "val_specificity": self.validation.specificity,
            "findings_accuracy": self.findings.accuracy,
            "findings_auc": self.findings.auc,
            "epochs": self.epochs,
            "best_epoch": self.best_epoch,
        }


def stream_config_for(
    family: str,
    geometry: PatchGeometry,
    overrides: Mapping[str, Mapping[str, Any]] | None = None,
) -> StreamConfig:
    """Stream config of a job with per-geometry (or ``"*"``) overrides."""
    merged: dict[str, Any] = {}
    for key in ("*", geometry.label):
        merged.update((overrides or {}).get(key, {}))
    merged.pop("geometry", None)
    merged.pop("in_channels", None)
    return StreamConfig(
        geometry=geometry,
        in_channels=FAMILIES.get_family(family).channels,
        **merged,
    )


@dataclass(frozen=True)
class StreamRunPlan:
    """Everything one worker needs to run a job; picklable."""

    job: StreamJob
    archive_paths: tuple[str, ...]
    fold: FoldSplit
    stream_config: StreamConfig
    train_config: TrainConfig
    focal: FocalParams
    out_dir: str
    seed: int
    inputs_digest: str
    show_progress: bool = False

    @property
    def job_digest(self) -> str:
        """Content digest of the job definition and its inputs."""
        document = {
            "job": self.job.name,
            "fold": self.fold.to_dict(),
            "stream": self.stream_config.to_dict(),
            "train": self.train_config.to_dict(),
            "focal": self.focal.to_dict(),
            "seed": self.seed,
            "inputs": self.inputs_digest,
        }
        encoded = json.dumps(document, sort_keys=True).encode("utf-8")
        return hashlib.sha256(encoded).hexdigest()


def _job_seed(plan: StreamRunPlan, purpose: str) -> int:
    job = plan.job
    return derive_seed(
        plan.seed,
        purpose,
        job.family,
        job.geometry.label,
        job.fold,
    )


def _resumable(plan: StreamRunPlan) -> StreamModel | None:
    path = plan.job.checkpoint_path(plan.out_dir)
    if not path.exists() or not plan.job.history_path(plan.out_dir).exists():
        return None
    try:
        manifest = read_checkpoint_manifest(path)
        if manifest["metadata"]["extra"].get("job_digest") != plan.job_digest:
            return None
        return load_checkpoint(path)
    except (CheckpointError, KeyError) as exc:
        logger.warning("Retraining %s: %s", plan.job.name, exc)
        return None


def run_stream_job(plan: StreamRunPlan) -> StreamReportRow:
    """Train (or resume) one stream, save it and report its metrics."""
    job = plan.job
    bank = load_patch_bank(
        [PatchArchive(p) for p in plan.archive_paths],
        job.family,
        job.geometry,
    )
    model = _resumable(plan)
    if model is not None:
        logger.info("Resuming %s from its checkpoint", job.name)
    else:
        logger.info("Training %s", job.name)
        model = build_stream(plan.stream_config, _job_seed(plan, "init"))
        result = train_stream(
            model,
            plan.fold,
            bank,
            plan.focal,
            plan.train_config,
            _job_seed(plan, "train"),
            show_progress=plan.show_progress,
        )
        model.metadata.extra["job_digest"] = plan.job_digest
        model.metadata.extra["job"] = job.name
        save_checkpoint(model, job.checkpoint_path(plan.out_dir))
        write_history(result.history, job.history_path(plan.out_dir))

    train_bank = bank.for_subjects(plan.fold.train_ids)
    val_bank = bank.for_subjects(plan.fold.val_ids)
    batch = plan.train_config.batch_size
    return StreamReportRow(
        family=job.family,
        geometry=job.geometry.label,
        fold=job.fold,
        train=evaluate_bank(model, train_bank, batch_size=batch),
        validation=evaluate_bank(model, val_bank, batch_size=batch),
        findings=evaluate_bank(
            model,
            val_bank.select(val_bank.finding_centered),
            batch_size=batch,
        ),
        epochs=model.metadata.epochs_seen,
        best_epoch=model.metadata.best_epoch,
    )


def plan_stream_jobs(
    families: Sequence[str],
    geometries: Sequence[PatchGeometry],
    folds: Sequence[FoldSplit],
    only: JobFilter | None = None,
) -> list[StreamJob]:
    """Jobs ordered family, geometry, fold; filtered by ``only``."""
    jobs = [
        StreamJob(family, geometry, fold.fold)
        for family in families
        for geometry in geometries
        for fold in folds
    ]
    return [job for job in jobs if only is None or only.matches(job)]


def run_all_streams(
    archive_paths: Sequence[str | Path],
    folds: Sequence[FoldSplit],
    *,
    families: Sequence[str],
    geometries: Sequence[PatchGeometry],
    train_config: TrainConfig,
    focal: FocalParams,
    out_dir: str | Path,
    seed: int,
    stream_overrides: Mapping[str, Mapping[str, Any]] | None = None,
    inputs_digest: str = "",
    only: JobFilter | None = None,
    workers: int = 1,
    show_progress: bool = False,
) -> list[StreamReportRow]:
    """Train every (family, geometry, fold) stream.

    Jobs are independent and seeded from their own names, so the worker
    count does not change any result. Rows come back in job order.
    """
    by_fold = {fold.fold: fold for fold in folds}
    jobs = plan_stream_jobs(families, geometries, folds, only)
    if not jobs:
        raise ConfigurationError(f"no stream job matches {only}")
    plans = [
        StreamRunPlan(
            job=job,
            archive_paths=tuple(str(p) for p in archive_paths),
            fold=by_fold[job.fold],
            stream_config=stream_config_for(
                job.family,
                job.geometry,
                stream_overrides,
            ),
            train_config=train_config,
            focal=focal,
            out_dir=str(out_dir),
            seed=seed,
            inputs_digest=inputs_digest,
            show_progress=show_progress and workers <= 1,
        )
        for job in jobs
    ]
    logger.info("Running %d stream jobs on %d worker(s)", len(plans), workers)
    if workers <= 1:
        return [
            run_stream_job(plan)
            for plan in tqdm(plans, desc="streams", disable=not show_progress)
        ]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(
            tqdm(
                pool.map(run_stream_job, plans),
                total=len(plans),
                desc="streams",
                disable=not show_progress,
            ),
        )


@dataclass(frozen=True)
class GridResult:
    """Outcome of one focal-parameter setting."""

    alpha: float
    gamma: float
    val_auc: float | None
    val_loss: float


def grid_search_focal(
    stream_config: StreamConfig,
    fold: FoldSplit,
    bank: PatchBank,
    grid: Iterable[tuple[float, float]],
    config: TrainConfig,
    seed: int,
    model_factory: Callable[[StreamConfig, int], StreamModel] = build_stream,
) -> list[GridResult]:
    """Train one stream per (alpha, gamma) pair and rank by validation AUC.

    Every pair starts from the same initialization and shuffle seed.
    Results are sorted by descending AUC, ties by ascending loss.
    """
    results = []
    for alpha, gamma in grid:
        focal = FocalParams(alpha=alpha, gamma=gamma)
        model = model_factory(stream_config, derive_seed(seed, "init"))
        train_stream(
            model,
            fold,
            bank,
            focal,
            config,
            derive_seed(seed, "train"),
        )
        metrics = evaluate_bank(model, bank.for_subjects(fold.val_ids))
        results.append(
            GridResult(
                alpha=alpha,
                gamma=gamma,
                val_auc=metrics.auc,
                val_loss=float(model.metadata.best_val_loss or math.inf),
            ),
        )
        logger.info(
            "Focal grid alpha=%g gamma=%g: val AUC %s",
            alpha,
            gamma,
            metrics.auc,
        )
    return sorted(
        results,
        key=lambda r: (
            -(r.val_auc if r.val_auc is not None else -1.0),
            r.val_loss,
        ),
    )


def write_focal_grid(results: Sequence[GridResult], path: str | Path) -> None:
    """Write ranked grid results as CSV."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["rank", "alpha", "gamma", "val_auc", "val_loss"])
        for rank, result in enumerate(results, start=1):
            writer.writerow(
                [
                    rank,
                    result.alpha,
                    result.gamma,
                    "" if result.val_auc is None else f"{result.val_auc:.6f}",
                    f"{result.val_loss:.6f}",
                ],
            )
