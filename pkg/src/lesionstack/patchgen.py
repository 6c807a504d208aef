"""Finding-anchored alignment and multi-size 3D patch extraction.

All patch geometries of one patch set share a centre voxel. Within a patch
of size ``s`` along an axis the centre sits at index ``s // 2``, so the
patch covers ``[c - s // 2, c - s // 2 + s)`` in volume indices and every
smaller patch is the centred crop of the largest one (the envelope).
Patch arrays are channel-first: ``(channels, depth, height, width)``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np

from lesionstack.channels import FAMILIES
from lesionstack.constants import (
    FINDING_BOOST,
    FLOAT_DTYPE,
    PATCH_GEOMETRIES,
    PATCHES_PER_STUDY,
    POSITIVE_RADIUS_MM,
)
from lesionstack.exceptions import (
    AlignmentError,
    ConfigurationError,
    ManifestError,
    PatchGeometryError,
)
from lesionstack.volstore import ClinSig, Cohort, Modality

if TYPE_CHECKING:
    from collections.abc import Iterable, Mapping, Sequence

    from numpy.typing import NDArray

    from lesionstack.volstore import Finding, Study, Volume

logger = logging.getLogger(__name__)

Index3 = tuple[int, int, int]
_LE_FLOAT32 = np.dtype("<f4")


@dataclass(frozen=True, order=True)
class PatchGeometry:
    """Patch size as (height, width, depth) = (y, x, z) voxels."""

    height: int
    width: int
    depth: int

    def __post_init__(self) -> None:
        """Reject empty geometries."""
        if min(self.height, self.width, self.depth) < 1:
            raise ConfigurationError(f"invalid patch geometry {self}")

    @property
    def label(self) -> str:
        """Short name such as ``96x96x3``."""
        return f"{self.height}x{self.width}x{self.depth}"

    @property
    def zyx(self) -> Index3:
        """Extent in volume axis order (z, y, x)."""
        return self.depth, self.height, self.width

    @classmethod
    def parse(cls, text: str | Sequence[int]) -> PatchGeometry:
        """Parse ``"96x96x3"``, ``"96"`` (square, envelope depth) or a triple."""
        if not isinstance(text, str):
            height, width, depth = (int(v) for v in text)
            return cls(height, width, depth)
        parts = [int(p) for p in text.lower().split("x")]
        if len(parts) == 1:
            matches = [g for g in PATCH_GEOMETRIES if g[0] == parts[0]]
            if not matches:
                raise ConfigurationError(f"unknown patch geometry {text!r}")
            return cls(*matches[0])
        if len(parts) != 3:
            raise ConfigurationError(f"unknown patch geometry {text!r}")
        return cls(*parts)

    def window(self, center: Index3) -> tuple[slice, slice, slice]:
        """Volume slices (z, y, x) of this patch around a centre."""
        return tuple(  # type: ignore[return-value]
            slice(c - s // 2, c - s // 2 + s)
            for c, s in zip(center, self.zyx, strict=True)
        )

    def crop_of(self, envelope: PatchGeometry) -> tuple[slice, slice, slice]:
        """Slices (z, y, x) selecting this patch inside an envelope patch."""
        return tuple(  # type: ignore[return-value]
            slice(e // 2 - s // 2, e // 2 - s // 2 + s)
            for e, s in zip(envelope.zyx, self.zyx, strict=True)
        )


class Provenance(StrEnum):
    """How a patch centre was obtained."""

    FINDING_CENTERED = "finding_centered"
    SEMI_RANDOM = "semi_random"


class Proposal(StrEnum):
    """Proposal family a sampled centre was drawn from."""

    FORCED = "forced"
    FINDING = "finding"
    UNIFORM = "uniform"


@dataclass(frozen=True)
class PatchSpec:
    """Patch geometries and the semi-random sampling law."""

    geometries: tuple[PatchGeometry, ...] = tuple(
        PatchGeometry(*g) for g in PATCH_GEOMETRIES
    )
    patches_per_study: int = PATCHES_PER_STUDY
    finding_boost: float = FINDING_BOOST
    positive_radius_mm: float = POSITIVE_RADIUS_MM
    families: tuple[str, ...] = ("composite", "solo")

    def __post_init__(self) -> None:
        """Check parity and containment of the geometries."""
        if not self.geometries:
            raise ConfigurationError("at least one patch geometry is required")
        if self.patches_per_study < 0 or self.finding_boost < 0:
            raise ConfigurationError(
                "patches_per_study and finding_boost must be >= 0",
            )
        if self.positive_radius_mm < 0:
            raise ConfigurationError("positive_radius_mm must be >= 0")
        for axis in range(3):
            parities = {g.zyx[axis] % 2 for g in self.geometries}
            if len(parities) > 1:
                raise ConfigurationError(
                    "patch geometries must share parity per axis to share "
                    f"a centre: {[g.label for g in self.geometries]}",
                )
        envelope = self.envelope
        for geometry in self.geometries:
            if any(
                s > e for s, e in zip(geometry.zyx, envelope.zyx, strict=True)
            ):
                raise ConfigurationError(
                    f"{geometry.label} does not fit inside envelope "
                    f"{envelope.label}",
                )
        for name in self.families:
            FAMILIES.get_family(name)

    @property
    def envelope(self) -> PatchGeometry:
        """The containment envelope (largest extent on every axis)."""
        return PatchGeometry(
            max(g.height for g in self.geometries),
            max(g.width for g in self.geometries),
            max(g.depth for g in self.geometries),
        )

    def to_dict(self) -> dict[str, Any]:
        """JSON-ready representation."""
        return {
            "geometries": [
                [g.height, g.width, g.depth] for g in self.geometries
            ],
            "patches_per_study": self.patches_per_study,
            "finding_boost": self.finding_boost,
            "positive_radius_mm": self.positive_radius_mm,
            "families": list(self.families),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> PatchSpec:
        """Build from a JSON document; omitted fields keep defaults."""
        kwargs = dict(data)
        if "geometries" in kwargs:
            kwargs["geometries"] = tuple(
                PatchGeometry.parse(g) for g in kwargs["geometries"]
            )
        if "families" in kwargs:
            kwargs["families"] = tuple(kwargs["families"])
        return cls(**kwargs)


@dataclass(frozen=True)
class PatchCenter:
    """A sampled patch centre on the cropped grid."""

    index: Index3
    world_xyz: tuple[float, float, float]
    provenance: Provenance
    finding_id: str | None = None
    proposal: Proposal = Proposal.UNIFORM


@dataclass(frozen=True, eq=False)
class PatchSet:
    """Co-centred patches of every geometry and channel family."""

    subject_id: str
    center: PatchCenter
    patches: dict[tuple[str, PatchGeometry], NDArray[np.float32]] = field(
        repr=False,
    )
    label: ClinSig

    def patch(self, family: str, geometry: PatchGeometry) -> NDArray[np.float32]:
        """Patch array of one family and geometry."""
        return self.patches[family, geometry]


def align_modalities(study: Study, finding: Finding) -> dict[Modality, Index3]:
    """Nearest voxel of a finding in every modality, asserted identical.

    Raises:
        AlignmentError: If modalities map the finding to different voxels.
    """
    indices = {
        modality: volume.world_to_index(finding.world_pos)
        for modality, volume in study.volumes.items()
    }
    if len(set(indices.values())) != 1:
        raise AlignmentError(
            f"finding {finding.key} maps to diverging voxels "
            f"{ {str(m): i for m, i in indices.items()} }",
        )
    return indices


def admissible_ranges(
    dims: Sequence[int],
    envelope: PatchGeometry,
) -> tuple[tuple[int, int], ...]:
    """Half-open centre ranges [s // 2, n - s // 2) per (z, y, x) axis.

    Raises:
        PatchGeometryError: If the region is empty on some axis.
    """
    ranges = tuple(
        (s // 2, n - s // 2) for n, s in zip(dims, envelope.zyx, strict=True)
    )
    if any(lo >= hi for lo, hi in ranges):
        raise PatchGeometryError(
            f"volume {tuple(dims)} cannot hold a {envelope.label} patch",
        )
    return ranges


def is_admissible(
    index: Sequence[int],
    ranges: Sequence[tuple[int, int]],
) -> bool:
    """Whether a centre lies inside the admissible ranges."""
    return all(
        lo <= i < hi for i, (lo, hi) in zip(index, ranges, strict=True)
    )


def _reference_volume(study: Study) -> Volume:
    return study.volume(Modality.T2W)


def _uniform_center(
    rng: np.random.Generator,
    ranges: Sequence[tuple[int, int]],
) -> Index3:
    z, y, x = (int(rng.integers(lo, hi)) for lo, hi in ranges)
    return z, y, x


def _neighbourhood_center(
    rng: np.random.Generator,
    study: Study,
    finding: Finding,
    radius_mm: float,
    ranges: Sequence[tuple[int, int]],
) -> Index3:
    while True:
        offset = rng.uniform(-1.0, 1.0, size=3)
        if float(offset @ offset) <= 1.0:
            break
    point = np.asarray(finding.world_pos) + radius_mm * offset
    index = _reference_volume(study).world_to_index(point)
    z, y, x = (
        min(max(i, lo), hi - 1)
        for i, (lo, hi) in zip(index, ranges, strict=True)
    )
    return z, y, x


def sample_centers(
    study: Study,
    spec: PatchSpec,
    seed: int,
) -> list[PatchCenter]:
    """Draw ``spec.patches_per_study`` patch centres for a study.

    Every finding's own voxel is included once (when admissible and
    while the count allows; surplus findings are dropped in order). The
    remaining draws pick, with probability proportional to weight, a
    neighbourhood of a finding (weight ``finding_boost`` each; uniform
    in a ball of ``positive_radius_mm``, clipped to admissibility) or a
    uniform admissible voxel (weight 1).

    Raises:
        PatchGeometryError: If no admissible centre exists.
    """
    reference = _reference_volume(study)
    ranges = admissible_ranges(reference.dims, spec.envelope)
    rng = np.random.default_rng(seed)

    centers: list[PatchCenter] = []
    findings = list(study.findings)
    for finding in findings:
        index = align_modalities(study, finding)[Modality.T2W]
        if not is_admissible(index, ranges):
            logger.warning(
                "Finding %s is too close to the edge for a %s patch",
                finding.key,
                spec.envelope.label,
            )
            continue
        centers.append(
            PatchCenter(
                index=index,
                world_xyz=reference.index_to_world(index),
                provenance=Provenance.FINDING_CENTERED,
                finding_id=finding.finding_id,
                proposal=Proposal.FORCED,
            ),
        )
    if len(centers) > spec.patches_per_study:
        logger.warning(
            "Study %s: keeping %d of %d forced finding centres",
            study.subject_id,
            spec.patches_per_study,
            len(centers),
        )
        del centers[spec.patches_per_study :]

    finding_weight = spec.finding_boost * len(findings)
    p_finding = finding_weight / (finding_weight + 1.0)
    while len(centers) < spec.patches_per_study:
        if findings and rng.random() < p_finding:
            finding = findings[int(rng.integers(len(findings)))]
            index = _neighbourhood_center(
                rng,
                study,
                finding,
                spec.positive_radius_mm,
                ranges,
            )
            proposal = Proposal.FINDING
        else:
            index = _uniform_center(rng, ranges)
            proposal = Proposal.UNIFORM
        centers.append(
            PatchCenter(
                index=index,
                world_xyz=reference.index_to_world(index),
                provenance=Provenance.SEMI_RANDOM,
                proposal=proposal,
            ),
        )
    return centers


def label_at(
    study: Study,
    world_xyz: Sequence[float],
    radius_mm: float,
) -> ClinSig:
    """Positive iff a significant finding lies within the radius.

    Test-cohort studies, and studies whose findings are all unlabelled, give
    Unknown; a training study without findings is Negative everywhere.
    """
    if study.cohort is Cohort.TEST:
        return ClinSig.UNKNOWN
    if study.findings and not any(f.is_labelled for f in study.findings):
        return ClinSig.UNKNOWN
    for finding in study.findings:
        if (
            finding.clin_sig is ClinSig.POSITIVE
            and math.dist(world_xyz, finding.world_pos) <= radius_mm
        ):
            return ClinSig.POSITIVE
    return ClinSig.NEGATIVE


def extract_patch_set(
    study: Study,
    center: PatchCenter,
    spec: PatchSpec,
) -> PatchSet:
    """Copy every geometry and family patch around a centre.

    Raises:
        PatchGeometryError: If the envelope patch leaves the volume.
    """
    envelope = spec.envelope
    ranges = admissible_ranges(_reference_volume(study).dims, envelope)
    if not is_admissible(center.index, ranges):
        raise PatchGeometryError(
            f"centre {center.index} of study {study.subject_id} is not "
            f"admissible for a {envelope.label} patch",
        )
    window = envelope.window(center.index)
    envelope_arrays = {
        modality: volume.voxels[window]
        for modality, volume in study.volumes.items()
    }
    patches: dict[tuple[str, PatchGeometry], NDArray[np.float32]] = {}
    for name in spec.families:
        stacked = FAMILIES.get_family(name).stack(envelope_arrays)
        for geometry in spec.geometries:
            crop = (slice(None), *geometry.crop_of(envelope))
            patches[name, geometry] = np.ascontiguousarray(
                stacked[crop],
                dtype=np.float32,
            )
    return PatchSet(
        subject_id=study.subject_id,
        center=center,
        patches=patches,
        label=label_at(study, center.world_xyz, spec.positive_radius_mm),
    )


def extract_study(study: Study, spec: PatchSpec, seed: int) -> list[PatchSet]:
    """Sample centres and extract every patch set of a study."""
    return [
        extract_patch_set(study, center, spec)
        for center in sample_centers(study, spec, seed)
    ]


def _entry_layout(
    spec: PatchSpec,
) -> tuple[dict[tuple[str, PatchGeometry], tuple[int, tuple[int, ...]]], int]:
    layout = {}
    offset = 0
    for name in spec.families:
        channels = FAMILIES.get_family(name).channels
        for geometry in spec.geometries:
            shape = (channels, *geometry.zyx)
            layout[name, geometry] = (offset, shape)
            offset += math.prod(shape)
    return layout, offset


def write_patch_archive(
    subject_id: str,
    patch_sets: Sequence[PatchSet],
    spec: PatchSpec,
    out_dir: str | Path,
) -> Path:
    """Write ``<id>.patches.json`` + ``.f32`` and an index CSV.

    Returns:
        The archive header path.
    """
    directory = Path(out_dir)
    directory.mkdir(parents=True, exist_ok=True)
    header_path = directory / f"{subject_id}.patches.json"
    blob_path = directory / f"{subject_id}.patches.f32"
    layout, _ = _entry_layout(spec)
    entries = []
    with blob_path.open("wb") as blob:
        for patch_set in patch_sets:
            for key in layout:
                blob.write(
                    np.ascontiguousarray(
                        patch_set.patches[key],
                        dtype=_LE_FLOAT32,
                    ).tobytes(),
                )
            center = patch_set.center
            entries.append(
                {
                    "center_index": list(center.index),
                    "center_mm": list(center.world_xyz),
                    "label": patch_set.label.value,
                    "provenance": center.provenance.value,
                    "proposal": center.proposal.value,
                    "finding_id": center.finding_id,
                },
            )
    header = {
        "subject_id": subject_id,
        "dtype": FLOAT_DTYPE,
        "spec": spec.to_dict(),
        "blob": blob_path.name,
        "entries": entries,
    }
    header_path.write_text(json.dumps(header, indent=2), encoding="utf-8")

    with (directory / f"{subject_id}.index.csv").open(
        "w",
        newline="",
        encoding="utf-8",
    ) as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(
            [
                "entry",
                "center_z",
                "center_y",
                "center_x",
                "x_mm",
                "y_mm",
                "z_mm",
                "label",
                "provenance",
                "finding_id",
            ],
        )
        for number, entry in enumerate(entries):
            writer.writerow(
                [
                    number,
                    *entry["center_index"],
                    *(f"{v:.3f}" for v in entry["center_mm"]),
                    entry["label"],
                    entry["provenance"],
                    entry["finding_id"] or "",
                ],
            )
    return header_path


@dataclass(frozen=True)
class PatchBank:
    """Patches of one family and geometry stacked for training."""

    x: NDArray[np.float32]
    labels: NDArray[np.int8]
    subject_ids: NDArray[np.str_]
    finding_centered: NDArray[np.bool_]
    finding_ids: tuple[str | None, ...]

    def __len__(self) -> int:
        """Number of patches."""
        return int(self.labels.shape[0])

    def select(self, mask: NDArray[np.bool_]) -> PatchBank:
        """Subset by a boolean mask."""
        keep = np.flatnonzero(mask)
        return PatchBank(
            x=self.x[keep],
            labels=self.labels[keep],
            subject_ids=self.subject_ids[keep],
            finding_centered=self.finding_centered[keep],
            finding_ids=tuple(self.finding_ids[i] for i in keep),
        )

    def for_subjects(self, subject_ids: Iterable[str]) -> PatchBank:
        """Patches of the given subjects only."""
        wanted = np.asarray(sorted(set(subject_ids)), dtype=np.str_)
        return self.select(np.isin(self.subject_ids, wanted))


_LABEL_CODES = {ClinSig.POSITIVE: 1, ClinSig.NEGATIVE: 0, ClinSig.UNKNOWN: -1}


class PatchArchive:
    """Read access to one study's patch archive."""

    def __init__(self, header_path: str | Path) -> None:
        """Load the archive header.

        Raises:
            ManifestError: If the header cannot be read.
        """
        self.header_path = Path(header_path)
        try:
            header = json.loads(self.header_path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ManifestError(
                f"cannot read patch archive {self.header_path}: {exc}",
            ) from exc
        self.subject_id: str = header["subject_id"]
        self.spec = PatchSpec.from_dict(header["spec"])
        self.entries: list[dict[str, Any]] = header["entries"]
        self._blob_path = self.header_path.with_name(header["blob"])
        self._layout, self._entry_size = _entry_layout(self.spec)

    def __len__(self) -> int:
        """Number of patch sets."""
        return len(self.entries)

    def load(self, family: str, geometry: PatchGeometry) -> NDArray[np.float32]:
        """All patches of one family and geometry, shape (n, c, d, h, w)."""
        try:
            offset, shape = self._layout[family, geometry]
        except KeyError:
            raise ManifestError(
                f"archive {self.header_path} has no {family}/{geometry.label} "
                "patches",
            ) from None
        if not self.entries:
            return np.zeros((0, *shape), dtype=np.float32)
        blob = np.memmap(
            self._blob_path,
            dtype=_LE_FLOAT32,
            mode="r",
            shape=(len(self.entries), self._entry_size),
        )
        size = math.prod(shape)
        patches = np.array(blob[:, offset : offset + size], dtype=np.float32)
        del blob
        return patches.reshape(len(self.entries), *shape)

    def labels(self) -> NDArray[np.int8]:
        """Label codes: 1 positive, 0 negative, -1 unknown."""
        return np.asarray(
            [_LABEL_CODES[ClinSig(e["label"])] for e in self.entries],
            dtype=np.int8,
        )

    def patch_set(self, number: int) -> PatchSet:
        """Reassemble one stored patch set."""
        entry = self.entries[number]
        patches = {
            key: self.load(*key)[number] for key in self._layout
        }
        center = PatchCenter(
            index=tuple(entry["center_index"]),  # type: ignore[arg-type]
            world_xyz=tuple(entry["center_mm"]),  # type: ignore[arg-type]
            provenance=Provenance(entry["provenance"]),
            finding_id=entry["finding_id"],
            proposal=Proposal(entry.get("proposal", Proposal.UNIFORM.value)),
        )
        return PatchSet(
            self.subject_id,
            center,
            patches,
            ClinSig(entry["label"]),
        )


def load_patch_bank(
    archives: Iterable[PatchArchive],
    family: str,
    geometry: PatchGeometry,
) -> PatchBank:
    """Stack one family/geometry from several archives into a bank."""
    arrays, labels, subjects, centred, finding_ids = [], [], [], [], []
    channels = FAMILIES.get_family(family).channels
    for archive in archives:
        arrays.append(archive.load(family, geometry))
        labels.append(archive.labels())
        subjects.extend([archive.subject_id] * len(archive))
        for entry in archive.entries:
            centred.append(
                entry["provenance"] == Provenance.FINDING_CENTERED.value,
            )
            finding_ids.append(entry["finding_id"])
    if not arrays:
        return PatchBank(
            x=np.zeros((0, channels, *geometry.zyx), dtype=np.float32),
            labels=np.zeros(0, dtype=np.int8),
            subject_ids=np.zeros(0, dtype=np.str_),
            finding_centered=np.zeros(0, dtype=bool),
            finding_ids=(),
        )
    return PatchBank(
        x=np.concatenate(arrays),
        labels=np.concatenate(labels),
        subject_ids=np.asarray(subjects, dtype=np.str_),
        finding_centered=np.asarray(centred, dtype=bool),
        finding_ids=tuple(finding_ids),
    )
