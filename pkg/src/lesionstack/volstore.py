"""Data model and file IO for multi-modal volumetric studies.

Volumes are stored as a JSON header next to a raw blob of little-endian
32-bit floats in C order (z, y, x). World coordinates are millimetres;
volume ``spacing`` and ``origin`` are given in (z, y, x) order while finding
positions are (x, y, z), as in the findings spreadsheet.
"""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np

from lesionstack.constants import (
    FINDINGS_HEADER,
    FLOAT_DTYPE,
    PREDICTIONS_HEADER,
    VOLUME_BLOB_SUFFIX,
    VOLUME_HEADER_SUFFIX,
    VOXEL_ORDER,
)
from lesionstack.exceptions import (
    ConfigurationError,
    FindingsFormatError,
    ManifestError,
    VolumeIOError,
)

if TYPE_CHECKING:
    from collections.abc import Iterable, Iterator, Sequence

    from numpy.typing import NDArray

Triple = tuple[float, float, float]
Index3 = tuple[int, int, int]

_LE_FLOAT32 = np.dtype("<f4")


class Modality(StrEnum):
    """MRI modalities of one study."""

    T2W = "T2w"
    ADC = "ADC"
    DWI = "DWI"
    KTRANS = "Ktrans"

    @property
    def manifest_key(self) -> str:
        """Key of this modality inside a manifest study entry."""
        return self.value.lower()


class ClinSig(StrEnum):
    """Clinical significance of a finding."""

    POSITIVE = "1"
    NEGATIVE = "0"
    UNKNOWN = "unknown"

    @classmethod
    def parse(cls, raw: str) -> ClinSig:
        """Parse a spreadsheet cell (``1``, ``0`` or ``unknown``)."""
        text = raw.strip().lower()
        if text in {"1", "true"}:
            return cls.POSITIVE
        if text in {"0", "false"}:
            return cls.NEGATIVE
        if text in {"unknown", ""}:
            return cls.UNKNOWN
        raise ValueError(f"unrecognised clin_sig value {raw!r}")


class Cohort(StrEnum):
    """Role of a study in the cohort split."""

    TRAIN = "train"
    TEST = "test"


@dataclass(frozen=True, eq=False)
class Volume:
    """One modality's scalar field on a regular grid."""

    modality: Modality
    voxels: NDArray[np.floating]
    spacing: Triple
    origin: Triple

    def __post_init__(self) -> None:
        """Validate grid invariants."""
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ConfigurationError(
                f"{self.modality} volume needs three non-empty axes, "
                f"got shape {self.voxels.shape}",
            )
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ConfigurationError(
                f"{self.modality} spacing must be positive, got {self.spacing}",
            )
        if not all(math.isfinite(o) for o in self.origin):
            raise ConfigurationError(
                f"{self.modality} origin must be finite, got {self.origin}",
            )

    @property
    def dims(self) -> Index3:
        """Voxel counts (nz, ny, nx)."""
        nz, ny, nx = self.voxels.shape
        return nz, ny, nx

    def is_finite(self) -> bool:
        """Whether every voxel is finite."""
        return bool(np.isfinite(self.voxels).all())

    def with_voxels(
        self,
        voxels: NDArray[np.floating],
        spacing: Triple | None = None,
        origin: Triple | None = None,
    ) -> Volume:
        """Return a copy with new voxels and optionally a new grid."""
        return Volume(
            modality=self.modality,
            voxels=voxels,
            spacing=self.spacing if spacing is None else spacing,
            origin=self.origin if origin is None else origin,
        )

    def continuous_index(self, world_xyz: Sequence[float]) -> Triple:
        """Map a world (x, y, z) point to fractional (z, y, x) indices."""
        x, y, z = world_xyz
        oz, oy, ox = self.origin
        dz, dy, dx = self.spacing
        return (z - oz) / dz, (y - oy) / dy, (x - ox) / dx

    def world_to_index(self, world_xyz: Sequence[float]) -> Index3:
        """Nearest voxel (z, y, x) to a world point, rounding half up."""
        fz, fy, fx = self.continuous_index(world_xyz)
        return (
            math.floor(fz + 0.5),
            math.floor(fy + 0.5),
            math.floor(fx + 0.5),
        )

    def index_to_world(self, index: Sequence[int]) -> Triple:
        """World (x, y, z) position of a voxel centre given as (z, y, x)."""
        iz, iy, ix = index
        oz, oy, ox = self.origin
        dz, dy, dx = self.spacing
        return ox + ix * dx, oy + iy * dy, oz + iz * dz

    def contains_world(self, world_xyz: Sequence[float]) -> bool:
        """Whether the nearest voxel of a world point lies inside the grid."""
        index = self.world_to_index(world_xyz)
        return all(0 <= i < n for i, n in zip(index, self.dims, strict=True))


@dataclass(frozen=True)
class Finding:
    """An annotated lesion locus."""

    subject_id: str
    finding_id: str
    world_pos: Triple
    clin_sig: ClinSig

    def __post_init__(self) -> None:
        """Reject non-finite coordinates."""
        if not all(math.isfinite(c) for c in self.world_pos):
            raise ConfigurationError(
                f"finding {self.key} has non-finite position {self.world_pos}",
            )

    @property
    def key(self) -> tuple[str, str]:
        """Cohort-unique identity."""
        return self.subject_id, self.finding_id

    @property
    def is_labelled(self) -> bool:
        """Whether the clinical significance is known."""
        return self.clin_sig is not ClinSig.UNKNOWN


@dataclass(frozen=True, eq=False)
class Study:
    """One subject's aligned volumes, findings and cohort role."""

    subject_id: str
    volumes: dict[Modality, Volume]
    findings: tuple[Finding, ...] = ()
    cohort: Cohort = Cohort.TRAIN

    def __post_init__(self) -> None:
        """Check one volume per modality and findings inside every volume."""
        missing = [m for m in Modality if m not in self.volumes]
        if missing:
            raise ConfigurationError(
                f"study {self.subject_id} lacks modalities "
                f"{[str(m) for m in missing]}",
            )
        for modality, volume in self.volumes.items():
            if volume.modality is not modality:
                raise ConfigurationError(
                    f"study {self.subject_id}: volume under {modality} "
                    f"is tagged {volume.modality}",
                )
        for finding in self.findings:
            if finding.subject_id != self.subject_id:
                raise ConfigurationError(
                    f"finding {finding.key} attached to study "
                    f"{self.subject_id}",
                )
            outside = [
                str(m)
                for m, vol in self.volumes.items()
                if not vol.contains_world(finding.world_pos)
            ]
            if outside:
                raise ConfigurationError(
                    f"finding {finding.key} lies outside {outside} volumes",
                )

    def volume(self, modality: Modality) -> Volume:
        """Volume of one modality."""
        return self.volumes[modality]

    @property
    def has_positive(self) -> bool:
        """Whether any finding is clinically significant."""
        return any(f.clin_sig is ClinSig.POSITIVE for f in self.findings)

    def replace(
        self,
        volumes: dict[Modality, Volume] | None = None,
        findings: Iterable[Finding] | None = None,
    ) -> Study:
        """Return a copy with new volumes and/or findings."""
        return Study(
            subject_id=self.subject_id,
            volumes=self.volumes if volumes is None else volumes,
            findings=(
                self.findings if findings is None else tuple(findings)
            ),
            cohort=self.cohort,
        )


@dataclass(frozen=True)
class StudyEntry:
    """File references of one study inside a manifest."""

    subject_id: str
    volumes: dict[Modality, Path]
    findings: Path
    cohort: Cohort = Cohort.TRAIN


@dataclass(frozen=True)
class CohortManifest:
    """A cohort on disk plus the subjects to leave out."""

    root: Path
    studies: dict[str, StudyEntry]
    exclude: frozenset[str] = field(default_factory=frozenset)

    def subject_ids(self, cohort: Cohort | None = None) -> list[str]:
        """Sorted ids of non-excluded studies, optionally of one cohort."""
        return sorted(
            sid
            for sid, entry in self.studies.items()
            if sid not in self.exclude
            and (cohort is None or entry.cohort is cohort)
        )


def _header_and_blob(path: str | Path) -> tuple[Path, Path]:
    base = Path(path)
    if base.suffix in {VOLUME_HEADER_SUFFIX, VOLUME_BLOB_SUFFIX}:
        base = base.with_suffix("")
    return (
        base.with_name(base.name + VOLUME_HEADER_SUFFIX),
        base.with_name(base.name + VOLUME_BLOB_SUFFIX),
    )


def write_volume(volume: Volume, path: str | Path) -> Path:
    """Write a volume as a JSON header plus a raw float blob.

    Args:
        volume: The volume to write; every voxel must be finite.
        path: Header path; the ``.f32`` blob is written next to it.

    Returns:
        The header path.

    Raises:
        VolumeIOError: On non-finite voxels or filesystem failure.
    """
    header_path, blob_path = _header_and_blob(path)
    if not volume.is_finite():
        raise VolumeIOError("refusing to write non-finite voxels", header_path)
    header = {
        "modality": str(volume.modality),
        "dims": list(volume.dims),
        "spacing_mm": [float(s) for s in volume.spacing],
        "origin_mm": [float(o) for o in volume.origin],
        "dtype": FLOAT_DTYPE,
        "order": VOXEL_ORDER,
        "blob": blob_path.name,
    }
    try:
        header_path.parent.mkdir(parents=True, exist_ok=True)
        np.ascontiguousarray(volume.voxels, dtype=_LE_FLOAT32).tofile(
            blob_path,
        )
        header_path.write_text(json.dumps(header, indent=2), encoding="utf-8")
    except OSError as exc:
        raise VolumeIOError(f"cannot write volume ({exc})", header_path) from exc
    return header_path


def read_volume(path: str | Path) -> Volume:
    """Read a volume written by :func:`write_volume`.

    Raises:
        VolumeIOError: On missing files, malformed headers or size mismatch.
    """
    header_path, default_blob = _header_and_blob(path)
    try:
        header = json.loads(header_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise VolumeIOError(f"cannot read header ({exc})", header_path) from exc
    except json.JSONDecodeError as exc:
        raise VolumeIOError("malformed header JSON", header_path) from exc

    if header.get("dtype") != FLOAT_DTYPE or header.get("order") != VOXEL_ORDER:
        raise VolumeIOError(
            f"unsupported encoding {header.get('dtype')}/{header.get('order')}",
            header_path,
        )
    blob_path = header_path.with_name(header.get("blob", default_blob.name))
    try:
        dims = tuple(int(d) for d in header["dims"])
        spacing = tuple(float(s) for s in header["spacing_mm"])
        origin = tuple(float(o) for o in header["origin_mm"])
        modality = Modality(header["modality"])
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeIOError(f"invalid header field ({exc})", header_path) from exc

    try:
        flat = np.fromfile(blob_path, dtype=_LE_FLOAT32)
    except OSError as exc:
        raise VolumeIOError(f"cannot read blob ({exc})", blob_path) from exc
    if flat.size != math.prod(dims):
        raise VolumeIOError(
            f"blob holds {flat.size} voxels, header expects {dims}",
            blob_path,
        )
    try:
        return Volume(
            modality=modality,
            voxels=flat.reshape(dims).astype(np.float32),
            spacing=spacing,  # type: ignore[arg-type]
            origin=origin,  # type: ignore[arg-type]
        )
    except ConfigurationError as exc:
        raise VolumeIOError(str(exc), header_path) from exc


def _parse_float(raw: str, name: str, line_number: int) -> float:
    try:
        value = float(raw)
    except ValueError:
        raise FindingsFormatError(
            f"{name} is not a number: {raw!r}",
            line_number,
        ) from None
    if not math.isfinite(value):
        raise FindingsFormatError(f"{name} is not finite", line_number)
    return value


def read_findings_csv(path: str | Path) -> list[Finding]:
    """Parse a findings spreadsheet.

    Raises:
        FindingsFormatError: On a bad header, malformed rows or duplicate
            (subject_id, finding_id) pairs.
    """
    csv_path = Path(path)
    findings: list[Finding] = []
    seen: set[tuple[str, str]] = set()
    try:
        with csv_path.open(newline="", encoding="utf-8") as handle:
            reader = csv.reader(handle)
            header = next(reader, None)
            if header is None or tuple(h.strip() for h in header) != (
                FINDINGS_HEADER
            ):
                raise FindingsFormatError(
                    f"expected header {','.join(FINDINGS_HEADER)}",
                    1,
                )
            for row in reader:
                line_number = reader.line_num
                if not row or all(not cell.strip() for cell in row):
                    continue
                findings.append(_parse_finding_row(row, line_number))
                key = findings[-1].key
                if key in seen:
                    raise FindingsFormatError(
                        f"duplicate finding {key}",
                        line_number,
                    )
                seen.add(key)
    except OSError as exc:
        raise FindingsFormatError(f"cannot read {csv_path}: {exc}") from exc
    return findings


def _parse_finding_row(row: list[str], line_number: int) -> Finding:
    if len(row) != len(FINDINGS_HEADER):
        raise FindingsFormatError(
            f"expected {len(FINDINGS_HEADER)} fields, got {len(row)}",
            line_number,
        )
    subject_id, finding_id = row[0].strip(), row[1].strip()
    if not subject_id or not finding_id:
        raise FindingsFormatError("empty subject or finding id", line_number)
    position = (
        _parse_float(row[2], "pos_x_mm", line_number),
        _parse_float(row[3], "pos_y_mm", line_number),
        _parse_float(row[4], "pos_z_mm", line_number),
    )
    try:
        clin_sig = ClinSig.parse(row[5])
    except ValueError as exc:
        raise FindingsFormatError(str(exc), line_number) from exc
    return Finding(subject_id, finding_id, position, clin_sig)


def natural_key(text: str) -> tuple[Any, ...]:
    """Sort key treating digit runs as numbers."""
    return tuple(
        (0, int(part), "") if part.isdigit() else (1, 0, part)
        for part in re.split(r"(\d+)", text)
        if part
    )


def finding_sort_key(key: tuple[str, str]) -> tuple[Any, ...]:
    """Order (subject_id, finding_id) pairs naturally (``S2`` < ``S10``)."""
    return natural_key(key[0]), natural_key(key[1])


def write_findings_csv(findings: Iterable[Finding], path: str | Path) -> None:
    """Write findings in the spreadsheet format read by read_findings_csv."""
    rows = sorted(findings, key=lambda f: finding_sort_key(f.key))
    csv_path = Path(path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with csv_path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(FINDINGS_HEADER)
        for finding in rows:
            x, y, z = finding.world_pos
            writer.writerow(
                [
                    finding.subject_id,
                    finding.finding_id,
                    repr(float(x)),
                    repr(float(y)),
                    repr(float(z)),
                    finding.clin_sig.value,
                ],
            )


def write_predictions_csv(
    rows: Iterable[tuple[str, str, float]],
    path: str | Path,
) -> None:
    """Write per-finding probabilities sorted by (subject_id, finding_id).

    The order is plain string order, so finding ``10`` precedes ``2``.

    Raises:
        ConfigurationError: If a probability lies outside [0, 1].
    """
    materialised = list(rows)
    for subject_id, finding_id, probability in materialised:
        if not (0.0 <= probability <= 1.0):
            raise ConfigurationError(
                f"probability {probability} of ({subject_id}, {finding_id}) "
                "is outside [0, 1]",
            )
    materialised.sort(key=lambda r: (r[0], str(r[1])))
    csv_path = Path(path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with csv_path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(PREDICTIONS_HEADER)
        for subject_id, finding_id, probability in materialised:
            writer.writerow([subject_id, finding_id, f"{probability:.6f}"])


def read_predictions_csv(path: str | Path) -> dict[tuple[str, str], float]:
    """Read a predictions CSV keyed by (subject_id, finding_id)."""
    csv_path = Path(path)
    predictions: dict[tuple[str, str], float] = {}
    with csv_path.open(newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None or tuple(header) != PREDICTIONS_HEADER:
            raise FindingsFormatError(
                f"expected header {','.join(PREDICTIONS_HEADER)}",
                1,
            )
        for row in reader:
            if not row:
                continue
            if len(row) != len(PREDICTIONS_HEADER):
                raise FindingsFormatError("malformed row", reader.line_num)
            predictions[row[0], row[1]] = _parse_float(
                row[2],
                "clin_sig_probability",
                reader.line_num,
            )
    return predictions


def load_manifest(path: str | Path) -> CohortManifest:
    """Load a cohort manifest; relative paths resolve against its root.

    Raises:
        ManifestError: On malformed JSON, unknown keys or missing files.
    """
    manifest_path = Path(path)
    try:
        document = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot load manifest {manifest_path}: {exc}") from exc

    root = Path(document.get("root", "."))
    if not root.is_absolute():
        root = manifest_path.parent / root
    studies: dict[str, StudyEntry] = {}
    for subject_id, entry in document.get("studies", {}).items():
        try:
            volumes = {m: root / entry[m.manifest_key] for m in Modality}
            findings = root / entry["findings"]
            cohort = Cohort(entry.get("cohort", Cohort.TRAIN.value))
        except (KeyError, ValueError) as exc:
            raise ManifestError(
                f"study {subject_id}: invalid entry ({exc})",
            ) from exc
        studies[subject_id] = StudyEntry(subject_id, volumes, findings, cohort)

    exclude = frozenset(str(s) for s in document.get("exclude", []))
    manifest = CohortManifest(root=root, studies=studies, exclude=exclude)
    for subject_id in manifest.subject_ids():
        entry = manifest.studies[subject_id]
        required = [_header_and_blob(p)[0] for p in entry.volumes.values()]
        required.append(entry.findings)
        for file_path in required:
            if not file_path.exists():
                raise ManifestError(
                    f"study {subject_id}: missing file {file_path}",
                )
    return manifest


def write_manifest(manifest: CohortManifest, path: str | Path) -> Path:
    """Write a manifest with paths relative to its root where possible."""
    manifest_path = Path(path)

    def _rel(file_path: Path) -> str:
        try:
            return file_path.relative_to(manifest.root).as_posix()
        except ValueError:
            return str(file_path)

    studies = {}
    for subject_id in sorted(manifest.studies, key=natural_key):
        entry = manifest.studies[subject_id]
        record = {m.manifest_key: _rel(p) for m, p in entry.volumes.items()}
        record["findings"] = _rel(entry.findings)
        record["cohort"] = entry.cohort.value
        studies[subject_id] = record
    try:
        root_text = manifest.root.relative_to(manifest_path.parent).as_posix()
    except ValueError:
        root_text = str(manifest.root)
    document = {
        "root": root_text,
        "studies": studies,
        "exclude": sorted(manifest.exclude),
    }
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    manifest_path.write_text(json.dumps(document, indent=2), encoding="utf-8")
    return manifest_path


def load_study(manifest: CohortManifest, subject_id: str) -> Study:
    """Read one non-excluded study named in a manifest."""
    if subject_id in manifest.exclude:
        raise ManifestError(f"study {subject_id} is excluded")
    try:
        entry = manifest.studies[subject_id]
    except KeyError:
        raise ManifestError(f"unknown study {subject_id}") from None
    volumes = {m: read_volume(p) for m, p in entry.volumes.items()}
    findings = [
        f
        for f in read_findings_csv(entry.findings)
        if f.subject_id == subject_id
    ]
    try:
        return Study(subject_id, volumes, tuple(findings), entry.cohort)
    except ConfigurationError as exc:
        raise ManifestError(f"study {subject_id}: {exc}") from exc


def iter_studies(
    manifest: CohortManifest,
    cohort: Cohort | None = None,
) -> Iterator[Study]:
    """Yield non-excluded studies in sorted subject order."""
    for subject_id in manifest.subject_ids(cohort):
        yield load_study(manifest, subject_id)
