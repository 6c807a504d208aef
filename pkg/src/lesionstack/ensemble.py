"""Stacked generalization over frozen stream models.

The meta network sees one probability per frozen stream, ordered by
family, then geometry, then fold, and maps it through
``FC(width -> 16) + relu -> FC(16 -> 1) -> sigmoid``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from enum import StrEnum
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np
from tqdm import tqdm

from lesionstack import autodiff as ad
from lesionstack.constants import (
    CHECKPOINT_FORMAT_VERSION,
    DECISION_THRESHOLD,
    FLOAT_DTYPE,
    META_HIDDEN_WIDTH,
    OUTPUT_INIT_GAIN,
)
from lesionstack.densenet import StreamModel, load_checkpoint
from lesionstack.exceptions import (
    CheckpointError,
    ConfigurationError,
    DataError,
    FrozenModelError,
    LesionStackError,
    NumericError,
)
from lesionstack.losses import (
    FocalParams,
    batch_loss,
    focal_loss_tensor,
    labels_to_signed,
)
from lesionstack.metrics import BinaryMetrics, summarize
from lesionstack.patchgen import (
    PatchCenter,
    PatchGeometry,
    Proposal,
    Provenance,
    align_modalities,
    extract_patch_set,
    load_patch_bank,
)
from lesionstack.seeding import derive_seed
from lesionstack.trainer import (
    EarlyStopping,
    StreamJob,
    TrainConfig,
    sgd_nesterov_step,
)
from lesionstack.volstore import Modality

if TYPE_CHECKING:
    from collections.abc import Iterable, Sequence

    from numpy.typing import NDArray

    from lesionstack.patchgen import PatchArchive, PatchBank, PatchSet, PatchSpec
    from lesionstack.volstore import Finding, Study

logger = logging.getLogger(__name__)

_LE_FLOAT32 = np.dtype("<f4")


class FamilySelection(StrEnum):
    """Which stream banks feed the meta network."""

    COMPOSITE = "composite"
    SOLO = "solo"
    QUADRUPLE = "quadruple"

    @property
    def families(self) -> tuple[str, ...]:
        """Channel families in input order."""
        if self is FamilySelection.QUADRUPLE:
            return ("composite", "solo")
        return (self.value,)


@dataclass(frozen=True)
class BaseReference:
    """A frozen stream checkpoint and its recorded content digest."""

    family: str
    geometry: PatchGeometry
    fold: int
    checkpoint: str
    digest: str

    @property
    def name(self) -> str:
        """``family/geometry/foldK``."""
        return f"{self.family}/{self.geometry.label}/fold{self.fold}"

    def to_dict(self) -> dict[str, Any]:
        """JSON-ready representation."""
        return {
            "family": self.family,
            "geometry": self.geometry.label,
            "fold": self.fold,
            "checkpoint": self.checkpoint,
            "digest": self.digest,
        }


def base_references(
    selection: FamilySelection,
    streams_dir: str | Path,
    geometries: Sequence[PatchGeometry],
    folds: Sequence[int],
) -> list[BaseReference]:
    """Ordered references to the stream checkpoints of a selection.

    Raises:
        CheckpointError: If a checkpoint is missing, naming its
            (geometry, fold, family).
    """
    refs = []
    for family in selection.families:
        for geometry in geometries:
            for fold in folds:
                job = StreamJob(family, geometry, fold)
                path = job.checkpoint_path(streams_dir)
                if not path.exists():
                    raise CheckpointError(
                        f"missing stream checkpoint for geometry "
                        f"{geometry.label}, fold {fold}, family {family}: "
                        f"{path}",
                    )
                manifest = json.loads(path.read_text(encoding="utf-8"))
                refs.append(
                    BaseReference(
                        family=family,
                        geometry=geometry,
                        fold=fold,
                        checkpoint=str(path),
                        digest=manifest["digest"],
                    ),
                )
    return refs


class EnsembleModel:
    """Frozen streams plus a trainable two-layer meta network."""

    def __init__(
        self,
        selection: FamilySelection,
        references: Sequence[BaseReference],
        hidden_width: int = META_HIDDEN_WIDTH,
        validation_fold: int | None = 0,
    ) -> None:
        """Create an ensemble; call :meth:`initialize` or load parameters.

        Args:
            selection: Family set of the inputs.
            references: Ordered base checkpoints.
            hidden_width: Width of the hidden meta layer.
            validation_fold: Fold whose subjects are held out of
                meta-training, or None to train on every subject.
        """
        if not references:
            raise ConfigurationError("an ensemble needs at least one stream")
        if hidden_width < 1:
            raise ConfigurationError(f"hidden width must be >= 1, got {hidden_width}")
        self.selection = selection
        self.references = list(references)
        self.hidden_width = hidden_width
        self.validation_fold = validation_fold
        self.parameters: dict[str, ad.Parameter] = {}
        self._streams: list[StreamModel] | None = None

    @property
    def input_width(self) -> int:
        """One input per referenced stream."""
        return len(self.references)

    @property
    def ordering(self) -> list[str]:
        """Input names in order."""
        return [ref.name for ref in self.references]

    def initialize(self, seed: int) -> None:
        """He-normal meta weights, zero biases."""
        rng = np.random.default_rng(seed)
        width, hidden = self.input_width, self.hidden_width
        shapes = {
            "meta.hidden.weight": (width, hidden),
            "meta.hidden.bias": (hidden,),
            "meta.output.weight": (hidden, 1),
            "meta.output.bias": (1,),
        }
        for name, shape in shapes.items():
            if name.endswith("bias"):
                values = np.zeros(shape)
            else:
                gain = OUTPUT_INIT_GAIN if name.startswith("meta.output") else 1.0
                values = rng.standard_normal(shape) * gain * math.sqrt(
                    2.0 / shape[0],
                )
            self.parameters[name] = ad.Parameter(name, values)

    @property
    def streams(self) -> list[StreamModel]:
        """Frozen base models, loaded on first use.

        Raises:
            CheckpointError: If a checkpoint changed since it was referenced.
        """
        if self._streams is None:
            streams = []
            for ref in self.references:
                model = load_checkpoint(ref.checkpoint)
                if model.digest() != ref.digest:
                    raise CheckpointError(
                        f"stream {ref.name} changed since the ensemble "
                        "referenced it",
                    )
                model.freeze()
                streams.append(model)
            self._streams = streams
        return self._streams

    def base_digests(self) -> list[str]:
        """Current content digests of the loaded base models."""
        return [model.digest() for model in self.streams]

    def features(self, patch_sets: Sequence[PatchSet]) -> NDArray[np.float64]:
        """Stream probabilities per patch set, shape (n, input_width)."""
        out = np.empty((len(patch_sets), self.input_width), dtype=np.float64)
        for column, (ref, model) in enumerate(
            zip(self.references, self.streams, strict=True),
        ):
            batch = np.stack(
                [ps.patch(ref.family, ref.geometry) for ps in patch_sets],
            )
            out[:, column] = model.predict_proba(batch)
        return out

    def meta_logits(self, features: NDArray[np.floating]) -> ad.Tensor:
        """Pre-sigmoid meta outputs of shape (n,).

        Raises:
            DataError: If the feature width does not match the inputs.
        """
        if features.ndim != 2 or features.shape[1] != self.input_width:
            raise DataError(
                f"meta features of shape {features.shape} do not match "
                f"{self.input_width} inputs",
            )
        p = self.parameters
        x = ad.Tensor(np.asarray(features, dtype=np.float64))
        hidden = ad.relu(
            ad.fully_connected(x, p["meta.hidden.weight"], p["meta.hidden.bias"]),
        )
        out = ad.fully_connected(
            hidden,
            p["meta.output.weight"],
            p["meta.output.bias"],
        )
        return ad.reshape(out, (out.shape[0],))

    def predict_features(
        self,
        features: NDArray[np.floating],
    ) -> NDArray[np.float64]:
        """Meta probabilities for precomputed features."""
        with ad.no_grad():
            return ad.sigmoid(self.meta_logits(features)).data


def build_ensemble(
    selection: FamilySelection | str,
    streams_dir: str | Path,
    geometries: Sequence[PatchGeometry],
    folds: Sequence[int],
    seed: int,
    hidden_width: int = META_HIDDEN_WIDTH,
    validation_fold: int | None = 0,
) -> EnsembleModel:
    """Reference the stream checkpoints of a selection and init the meta net."""
    selection = FamilySelection(selection)
    ensemble = EnsembleModel(
        selection,
        base_references(selection, streams_dir, geometries, folds),
        hidden_width=hidden_width,
        validation_fold=validation_fold,
    )
    ensemble.initialize(derive_seed(seed, "ensemble", selection.value))
    return ensemble


@dataclass(frozen=True)
class FeatureTable:
    """Meta features of a set of patches with their provenance."""

    features: NDArray[np.float64]
    labels: NDArray[np.int8]
    subject_ids: NDArray[np.str_]
    finding_centered: NDArray[np.bool_]
    finding_ids: tuple[str | None, ...]

    def select(self, mask: NDArray[np.bool_]) -> FeatureTable:
        """Subset by a boolean mask."""
        keep = np.flatnonzero(mask)
        return FeatureTable(
            features=self.features[keep],
            labels=self.labels[keep],
            subject_ids=self.subject_ids[keep],
            finding_centered=self.finding_centered[keep],
            finding_ids=tuple(self.finding_ids[i] for i in keep),
        )


def archive_features(
    ensemble: EnsembleModel,
    archives: Sequence[PatchArchive],
    validation_ids: Iterable[str] = (),
    *,
    show_progress: bool = False,
) -> FeatureTable:
    """Meta features of finding-centred patches and of validation subjects.

    Semi-random patches of non-validation subjects never enter
    meta-training and are skipped.
    """
    wanted = np.asarray(sorted(set(validation_ids)), dtype=np.str_)
    banks: dict[tuple[str, PatchGeometry], PatchBank] = {}
    mask: NDArray[np.bool_] | None = None
    reference_bank: PatchBank | None = None
    columns = []
    pairs = zip(ensemble.references, ensemble.streams, strict=True)
    for ref, model in tqdm(
        list(pairs),
        desc=f"{ensemble.selection} features",
        disable=not show_progress,
    ):
        key = (ref.family, ref.geometry)
        if key not in banks:
            banks[key] = load_patch_bank(archives, ref.family, ref.geometry)
        bank = banks[key]
        if mask is None:
            mask = bank.finding_centered | np.isin(bank.subject_ids, wanted)
            reference_bank = bank
        columns.append(model.predict_proba(bank.x[mask]))
    if mask is None or reference_bank is None:
        raise ConfigurationError("an ensemble needs at least one stream")
    selected = reference_bank.select(mask)
    return FeatureTable(
        features=np.stack(columns, axis=1),
        labels=selected.labels,
        subject_ids=selected.subject_ids,
        finding_centered=selected.finding_centered,
        finding_ids=selected.finding_ids,
    )


@dataclass(frozen=True)
class EnsembleReportRow:
    """Ensemble metrics in stacked-generalization table layout."""

    selection: str
    inputs: int
    train: BinaryMetrics
    validation: BinaryMetrics
    findings: BinaryMetrics

    def to_row(self) -> dict[str, Any]:
        """Flat CSV row."""
        return {
            "channels": self.selection,
            "inputs": self.inputs,
            "train_accuracy": self.train.accuracy,
            "train_auc": self.train.auc,
            "val_accuracy": self.validation.accuracy,
            "val_auc": self.validation.auc,
            "val_sensitivity": self.validation.sensitivity,
            "val_specificity": self.validation.specificity,
            "findings_accuracy": self.findings.accuracy,
            "findings_auc": self.findings.auc,
        }


def _meta_metrics(
    ensemble: EnsembleModel,
    table: FeatureTable,
    threshold: float,
) -> BinaryMetrics:
    labelled = table.select(table.labels >= 0)
    if len(labelled.labels) == 0:
        return BinaryMetrics(0, None, None, None, None)
    return summarize(
        ensemble.predict_features(labelled.features),
        labelled.labels,
        threshold,
    )


def train_ensemble(
    ensemble: EnsembleModel,
    table: FeatureTable,
    validation_ids: Iterable[str],
    focal: FocalParams,
    config: TrainConfig,
    seed: int,
    threshold: float = DECISION_THRESHOLD,
) -> EnsembleReportRow:
    """Fit the meta network on finding-centred patches.

    Subjects in ``validation_ids`` are held out; their finding-centred
    patches drive early stopping. Only meta parameters are updated and the
    base models are checked against their digests afterwards.

    Raises:
        DataError: If no labelled finding-centred training patch exists.
        FrozenModelError: If a base model changed during meta-training.
    """
    held_out = np.isin(
        table.subject_ids,
        np.asarray(sorted(set(validation_ids)), dtype=np.str_),
    )
    labelled = table.labels >= 0
    train = table.select(table.finding_centered & labelled & ~held_out)
    monitor = table.select(table.finding_centered & labelled & held_out)
    if len(train.labels) == 0:
        raise DataError("no labelled finding-centred patch for meta-training")
    before = ensemble.base_digests()

    y_train = labels_to_signed(train.labels)
    y_monitor = labels_to_signed(monitor.labels) if len(monitor.labels) else None
    rng = np.random.default_rng(derive_seed(seed, "meta-shuffle"))
    stopper = EarlyStopping(config.patience)
    parameters = list(ensemble.parameters.values())
    best = {name: p.data.copy() for name, p in ensemble.parameters.items()}
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train.labels))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            index = order[start : start + config.batch_size]
            for parameter in parameters:
                parameter.zero_grad()
            loss = focal_loss_tensor(
                ensemble.meta_logits(train.features[index]),
                y_train[index],
                focal,
            )
            if not math.isfinite(loss.item()):
                raise NumericError(f"meta loss diverged at epoch {epoch}")
            loss.backward()
            sgd_nesterov_step(parameters, config)
            total += loss.item() * len(index)
        if y_monitor is None:
            monitored = total / len(order)
        else:
            with ad.no_grad():
                logits = ensemble.meta_logits(monitor.features).data
            monitored = batch_loss(logits, y_monitor, focal)
        if stopper.update(epoch, monitored):
            best = {n: p.data.copy() for n, p in ensemble.parameters.items()}
        if stopper.should_stop:
            logger.info(
                "Meta network %s stopped at epoch %d (best %d)",
                ensemble.selection,
                epoch,
                stopper.best_epoch,
            )
            break
    for name, values in best.items():
        ensemble.parameters[name].data = values
        ensemble.parameters[name].zero_grad()

    after = ensemble.base_digests()
    changed = [
        ref.name
        for ref, old, new in zip(ensemble.references, before, after, strict=True)
        if old != new or new != ref.digest
    ]
    if changed:
        raise FrozenModelError(
            f"frozen streams changed during meta-training: {changed}",
        )

    validation = table.select(held_out)
    return EnsembleReportRow(
        selection=ensemble.selection.value,
        inputs=ensemble.input_width,
        train=_meta_metrics(ensemble, train, threshold),
        validation=_meta_metrics(ensemble, validation, threshold),
        findings=_meta_metrics(
            ensemble,
            validation.select(validation.finding_centered),
            threshold,
        ),
    )


def finding_patch_set(
    study: Study,
    finding: Finding,
    spec: PatchSpec,
) -> PatchSet:
    """Co-centred patch set at a finding's voxel.

    Raises:
        PatchGeometryError: If the envelope patch leaves the volume.
        AlignmentError: If the modalities disagree on the voxel.
    """
    index = align_modalities(study, finding)[Modality.T2W]
    reference = study.volume(Modality.T2W)
    center = PatchCenter(
        index=index,
        world_xyz=reference.index_to_world(index),
        provenance=Provenance.FINDING_CENTERED,
        finding_id=finding.finding_id,
        proposal=Proposal.FORCED,
    )
    return extract_patch_set(study, center, spec)


def meta_features(
    ensemble: EnsembleModel,
    study: Study,
    finding: Finding,
    spec: PatchSpec,
) -> NDArray[np.float64]:
    """Base-stream probabilities of one finding, shape (input_width,)."""
    return ensemble.features([finding_patch_set(study, finding, spec)])[0]


def predict(
    ensemble: EnsembleModel,
    study: Study,
    finding: Finding,
    spec: PatchSpec,
) -> float:
    """Probability that a finding is clinically significant."""
    features = meta_features(ensemble, study, finding, spec)
    return float(ensemble.predict_features(features[np.newaxis])[0])


def predict_findings(
    ensemble: EnsembleModel,
    studies: Iterable[Study],
    spec: PatchSpec,
) -> tuple[dict[tuple[str, str], float], dict[tuple[str, str], str]]:
    """Predict every finding; failures are collected, not raised.

    Returns:
        Probabilities and error messages, both keyed by
        (subject_id, finding_id).
    """
    probabilities: dict[tuple[str, str], float] = {}
    failures: dict[tuple[str, str], str] = {}
    for study in studies:
        for finding in study.findings:
            try:
                probabilities[finding.key] = predict(
                    ensemble,
                    study,
                    finding,
                    spec,
                )
            except (LesionStackError, ValueError) as exc:
                logger.error("Cannot predict finding %s: %s", finding.key, exc)
                failures[finding.key] = str(exc)
    return probabilities, failures


def _ensemble_paths(path: str | Path) -> tuple[Path, Path]:
    base = Path(path)
    if base.suffix == ".json":
        base = base.with_suffix("")
    return base.with_suffix(".json"), base.with_suffix(".f32")


def save_ensemble(ensemble: EnsembleModel, path: str | Path) -> Path:
    """Write the ordering manifest and the meta-parameter blob."""
    manifest_path, blob_path = _ensemble_paths(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    layers = []
    offset = 0
    with blob_path.open("wb") as blob:
        for name, parameter in ensemble.parameters.items():
            blob.write(
                np.ascontiguousarray(parameter.data, dtype=_LE_FLOAT32).tobytes(),
            )
            layers.append(
                {"name": name, "shape": list(parameter.shape), "offset": offset},
            )
            offset += parameter.data.size
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": "ensemble",
        "dtype": FLOAT_DTYPE,
        "selection": ensemble.selection.value,
        "hidden_width": ensemble.hidden_width,
        "validation_fold": ensemble.validation_fold,
        "ordering": ensemble.ordering,
        "inputs": [ref.to_dict() for ref in ensemble.references],
        "blob": blob_path.name,
        "layers": layers,
    }
    manifest_path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return manifest_path


def load_ensemble(
    path: str | Path,
    expected_ordering: Sequence[str] | None = None,
) -> EnsembleModel:
    """Load an ensemble and check its input ordering.

    Args:
        path: Manifest written by :func:`save_ensemble`.
        expected_ordering: Input names the caller will feed, if known.

    Raises:
        CheckpointError: On unreadable files, shape mismatches or an
            ordering that differs from the references or the expectation.
    """
    manifest_path, _ = _ensemble_paths(path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        references = [
            BaseReference(
                family=entry["family"],
                geometry=PatchGeometry.parse(entry["geometry"]),
                fold=int(entry["fold"]),
                checkpoint=entry["checkpoint"],
                digest=entry["digest"],
            )
            for entry in manifest["inputs"]
        ]
        ensemble = EnsembleModel(
            FamilySelection(manifest["selection"]),
            references,
            hidden_width=int(manifest["hidden_width"]),
            validation_fold=manifest.get("validation_fold"),
        )
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(
            f"cannot read ensemble {manifest_path}: {exc}",
        ) from exc
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"ensemble {manifest_path} has another format")
    if manifest["ordering"] != ensemble.ordering or (
        expected_ordering is not None
        and list(expected_ordering) != ensemble.ordering
    ):
        raise CheckpointError(
            f"ensemble {manifest_path} input ordering does not match its "
            "stream references",
        )

    ensemble.initialize(0)
    blob = np.fromfile(manifest_path.with_name(manifest["blob"]), dtype=_LE_FLOAT32)
    stored = {layer["name"]: layer for layer in manifest["layers"]}
    if set(stored) != set(ensemble.parameters):
        raise CheckpointError(
            f"ensemble {manifest_path} layers {sorted(stored)} do not match "
            f"{sorted(ensemble.parameters)}",
        )
    for name, parameter in ensemble.parameters.items():
        layer = stored[name]
        if tuple(layer["shape"]) != parameter.shape:
            raise CheckpointError(
                f"ensemble layer {name} has shape {tuple(layer['shape'])}, "
                f"expected {parameter.shape}",
            )
        start = int(layer["offset"])
        values = blob[start : start + parameter.data.size]
        if values.size != parameter.data.size:
            raise CheckpointError(f"ensemble blob of {manifest_path} is truncated")
        parameter.data = values.reshape(parameter.shape).astype(np.float64)
    return ensemble


def expected_ordering(
    selection: FamilySelection | str,
    geometries: Sequence[PatchGeometry],
    folds: Sequence[int],
) -> list[str]:
    """Input names implied by a selection, geometries and folds."""
    return [
        StreamJob(family, geometry, fold).name
        for family in FamilySelection(selection).families
        for geometry in geometries
        for fold in folds
    ]

