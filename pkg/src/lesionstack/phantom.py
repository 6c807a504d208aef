"""Deterministic synthetic cohorts shaped like a lesion-classification study.

Each subject gets four modality volumes over the same field of view but on
different in-plane grids, a smooth background, additive noise and
ellipsoidal lesions whose contrast signature across modalities depends on
the lesion class. Everything is a pure function of :class:`PhantomSpec`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np
from tqdm import tqdm

from lesionstack.constants import PATCH_GEOMETRIES, TARGET_INPLANE_MM
from lesionstack.exceptions import ConfigurationError
from lesionstack.seeding import make_rng
from lesionstack.volstore import (
    ClinSig,
    Cohort,
    CohortManifest,
    Finding,
    Modality,
    Study,
    StudyEntry,
    Volume,
    write_findings_csv,
    write_manifest,
    write_volume,
)

if TYPE_CHECKING:
    from collections.abc import Iterable, Iterator

    from numpy.typing import NDArray

logger = logging.getLogger(__name__)

_PLATEAU = 0.5
_BACKGROUND_WAVELENGTH_MM = 60.0
_BACKGROUND_AMPLITUDE = 0.1
_PLACEMENT_TRIES = 200

DEFAULT_INPLANE_MM = {
    Modality.T2W: 0.5,
    Modality.ADC: 0.75,
    Modality.DWI: 0.75,
    Modality.KTRANS: 1.5,
}
DEFAULT_BASE_INTENSITY = {
    Modality.T2W: 300.0,
    Modality.ADC: 1200.0,
    Modality.DWI: 600.0,
    Modality.KTRANS: 0.3,
}
# Contrast as a fraction of the modality's base intensity.
DEFAULT_CONTRAST = {
    ClinSig.POSITIVE: {
        Modality.T2W: -0.25,
        Modality.ADC: -0.45,
        Modality.DWI: 0.6,
        Modality.KTRANS: 0.8,
    },
    ClinSig.NEGATIVE: {
        Modality.T2W: -0.15,
        Modality.ADC: -0.1,
        Modality.DWI: 0.1,
        Modality.KTRANS: 0.1,
    },
}


def _modality_map(raw: dict[Any, float]) -> dict[Modality, float]:
    return {Modality(str(k)): float(v) for k, v in raw.items()}


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of a synthetic cohort."""

    n_subjects: int = 40
    n_test_subjects: int = 0
    lesions_per_subject: tuple[int, int] = (1, 3)
    positive_fraction: float = 0.23
    fov_mm: float = 180.0
    n_slices: int = 12
    slice_mm: float = 3.0
    inplane_mm: dict[Modality, float] = field(
        default_factory=lambda: dict(DEFAULT_INPLANE_MM),
    )
    lesion_radius_mm: tuple[float, float] = (4.0, 8.0)
    lesion_z_stretch: float = 1.5
    lesion_zone_mm: float = 100.0
    base_intensity: dict[Modality, float] = field(
        default_factory=lambda: dict(DEFAULT_BASE_INTENSITY),
    )
    contrast: dict[ClinSig, dict[Modality, float]] = field(
        default_factory=lambda: {
            k: dict(v) for k, v in DEFAULT_CONTRAST.items()
        },
    )
    noise_level: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        """Validate the spec, naming the violated constraint."""
        low, high = self.lesions_per_subject
        checks = [
            (self.n_subjects >= 1, "n_subjects >= 1"),
            (self.n_test_subjects >= 0, "n_test_subjects >= 0"),
            (0 <= low <= high, "0 <= lesions_per_subject[0] <= [1]"),
            (0.0 < self.positive_fraction < 1.0, "positive_fraction in (0,1)"),
            (self.noise_level >= 0.0, "noise_level >= 0"),
            (self.slice_mm > 0.0, "slice_mm > 0"),
            (
                0.0 < self.lesion_radius_mm[0] <= self.lesion_radius_mm[1],
                "0 < lesion_radius_mm[0] <= lesion_radius_mm[1]",
            ),
            (set(self.inplane_mm) == set(Modality), "inplane_mm per modality"),
            (
                set(self.base_intensity) == set(Modality),
                "base_intensity per modality",
            ),
            (
                all(set(self.contrast.get(c, {})) == set(Modality)
                    for c in (ClinSig.POSITIVE, ClinSig.NEGATIVE)),
                "contrast table per class and modality",
            ),
        ]
        for ok, constraint in checks:
            if not ok:
                raise ConfigurationError(f"phantom spec violates {constraint}")
        self._check_geometry()

    def _check_geometry(self) -> None:
        height, width, depth = max(PATCH_GEOMETRIES)
        envelope_mm = max(height, width) * TARGET_INPLANE_MM
        if self.n_slices < depth:
            raise ConfigurationError(
                f"phantom spec violates n_slices >= {depth} "
                "(patch envelope depth)",
            )
        if self.lesion_zone_mm / 2 + envelope_mm / 2 > self.fov_mm / 2:
            raise ConfigurationError(
                "phantom spec violates lesion_zone_mm/2 + "
                f"{envelope_mm / 2} mm <= fov_mm/2 (patch envelope "
                "around lesions must fit)",
            )
        step = self.snap_mm
        for modality, spacing in self.inplane_mm.items():
            ratio = step / spacing
            if spacing <= 0 or abs(ratio - round(ratio)) > 1e-9:
                raise ConfigurationError(
                    f"phantom spec violates {modality} spacing dividing "
                    f"the coarsest spacing {step} mm",
                )
            cells = self.fov_mm / spacing
            if abs(cells - round(cells)) > 1e-9:
                raise ConfigurationError(
                    f"phantom spec violates fov_mm multiple of {modality} "
                    f"spacing {spacing} mm",
                )

    @property
    def snap_mm(self) -> float:
        """Lattice step on which lesion centres are placed in-plane."""
        return max(self.inplane_mm.values())

    def dims(self, modality: Modality) -> tuple[int, int, int]:
        """Voxel counts (nz, ny, nx) of one modality."""
        n = round(self.fov_mm / self.inplane_mm[modality])
        return self.n_slices, n, n

    def spacing(self, modality: Modality) -> tuple[float, float, float]:
        """Spacing (dz, dy, dx) of one modality."""
        d = self.inplane_mm[modality]
        return self.slice_mm, d, d

    @property
    def origin(self) -> tuple[float, float, float]:
        """Shared world origin (z, y, x) of every modality grid."""
        return 0.0, -self.fov_mm / 2, -self.fov_mm / 2

    def to_dict(self) -> dict[str, Any]:
        """JSON-ready representation."""
        data = asdict(self)
        data["inplane_mm"] = {str(k): v for k, v in self.inplane_mm.items()}
        data["base_intensity"] = {
            str(k): v for k, v in self.base_intensity.items()
        }
        data["contrast"] = {
            c.name.lower(): {str(m): v for m, v in table.items()}
            for c, table in self.contrast.items()
        }
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> PhantomSpec:
        """Build a spec from a JSON document; omitted fields keep defaults."""
        kwargs = dict(data)
        for key in ("lesions_per_subject", "lesion_radius_mm"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        for key in ("inplane_mm", "base_intensity"):
            if key in kwargs:
                kwargs[key] = _modality_map(kwargs[key])
        if "contrast" in kwargs:
            kwargs["contrast"] = {
                ClinSig[str(c).upper()]: _modality_map(table)
                for c, table in kwargs["contrast"].items()
            }
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigurationError(f"invalid phantom spec: {exc}") from exc


@dataclass(frozen=True)
class PhantomLesion:
    """Ground truth of one generated lesion."""

    finding_id: str
    center_xyz: tuple[float, float, float]
    radii_xyz: tuple[float, float, float]
    clin_sig: ClinSig
    contrast: dict[Modality, float]


@dataclass(frozen=True)
class SubjectPlan:
    """Everything needed to render one subject, before noise."""

    subject_id: str
    index: int
    cohort: Cohort
    phases: tuple[float, float]
    lesions: tuple[PhantomLesion, ...]


def _subject_id(cohort: Cohort, index: int) -> str:
    prefix = "P" if cohort is Cohort.TRAIN else "T"
    return f"{prefix}{index:04d}"


def _lesion_count(spec: PhantomSpec, cohort: Cohort, index: int) -> int:
    low, high = spec.lesions_per_subject
    rng = make_rng(spec.seed, "phantom", cohort.value, index, "count")
    return int(rng.integers(low, high + 1))


def _class_quota(
    spec: PhantomSpec,
    cohort: Cohort,
    counts: list[int],
) -> list[ClinSig]:
    total = sum(counts)
    n_positive = round(spec.positive_fraction * total)
    order = make_rng(spec.seed, "phantom", cohort.value, "classes").permutation(
        total,
    )
    labels = [ClinSig.NEGATIVE] * total
    for slot in order[:n_positive]:
        labels[int(slot)] = ClinSig.POSITIVE
    return labels


def _place_lesions(
    spec: PhantomSpec,
    rng: np.random.Generator,
    classes: list[ClinSig],
) -> list[PhantomLesion]:
    step = spec.snap_mm
    half_cells = math.floor(spec.lesion_zone_mm / 2 / step)
    lesions: list[PhantomLesion] = []
    for number, clin_sig in enumerate(classes, start=1):
        radius = float(rng.uniform(*spec.lesion_radius_mm))
        radii = (
            radius * float(rng.uniform(0.8, 1.2)),
            radius * float(rng.uniform(0.8, 1.2)),
            max(radius * spec.lesion_z_stretch, spec.slice_mm),
        )
        center = None
        for _ in range(_PLACEMENT_TRIES):
            candidate = (
                float(rng.integers(-half_cells, half_cells + 1)) * step,
                float(rng.integers(-half_cells, half_cells + 1)) * step,
                float(rng.integers(1, spec.n_slices - 1)) * spec.slice_mm,
            )
            if all(
                math.dist(candidate[:2], other.center_xyz[:2])
                > radii[0] + other.radii_xyz[0] + 2 * step
                for other in lesions
            ):
                center = candidate
                break
        if center is None:
            raise ConfigurationError(
                "phantom spec violates lesion placement: lesion_zone_mm too "
                "small for lesions_per_subject",
            )
        table = spec.contrast[clin_sig]
        if clin_sig is ClinSig.POSITIVE:
            contrast = dict(table)
        else:
            contrast = {
                m: value * float(rng.uniform(-1.0, 1.0))
                for m, value in table.items()
            }
        lesions.append(
            PhantomLesion(str(number), center, radii, clin_sig, contrast),
        )
    return lesions


def plan_cohort(spec: PhantomSpec) -> list[SubjectPlan]:
    """Draw subject layouts (lesions, classes, background phases)."""
    plans: list[SubjectPlan] = []
    for cohort, n in (
        (Cohort.TRAIN, spec.n_subjects),
        (Cohort.TEST, spec.n_test_subjects),
    ):
        counts = [_lesion_count(spec, cohort, i) for i in range(n)]
        classes = _class_quota(spec, cohort, counts)
        cursor = 0
        for index, count in enumerate(counts):
            rng = make_rng(spec.seed, "phantom", cohort.value, index, "layout")
            phases = (
                float(rng.uniform(0, 2 * math.pi)),
                float(rng.uniform(0, 2 * math.pi)),
            )
            lesions = _place_lesions(
                spec,
                rng,
                classes[cursor : cursor + count],
            )
            cursor += count
            plans.append(
                SubjectPlan(
                    subject_id=_subject_id(cohort, index),
                    index=index,
                    cohort=cohort,
                    phases=phases,
                    lesions=tuple(lesions),
                ),
            )
    return plans


def _taper(rho: NDArray[np.float64]) -> NDArray[np.float64]:
    ramp = np.clip((rho - _PLATEAU) / (1.0 - _PLATEAU), 0.0, 1.0)
    return 0.5 * (1.0 + np.cos(np.pi * ramp))


def background_intensity(
    spec: PhantomSpec,
    plan: SubjectPlan,
    modality: Modality,
    x_mm: NDArray[np.float64],
    y_mm: NDArray[np.float64],
) -> NDArray[np.float64]:
    """Smooth noise-free background at world (x, y) positions."""
    base = spec.base_intensity[modality]
    k = 2 * math.pi / _BACKGROUND_WAVELENGTH_MM
    structure = np.cos(k * x_mm + plan.phases[0]) * np.cos(
        k * y_mm + plan.phases[1],
    )
    return base * (1.0 + _BACKGROUND_AMPLITUDE * structure)


def intensity(
    spec: PhantomSpec,
    plan: SubjectPlan,
    modality: Modality,
    x_mm: NDArray[np.float64],
    y_mm: NDArray[np.float64],
    z_mm: NDArray[np.float64],
) -> NDArray[np.float64]:
    """Closed-form noise-free intensity at world positions."""
    values = background_intensity(spec, plan, modality, x_mm, y_mm)
    values = np.broadcast_to(values, np.broadcast(x_mm, y_mm, z_mm).shape)
    values = values.copy()
    base = spec.base_intensity[modality]
    for lesion in plan.lesions:
        cx, cy, cz = lesion.center_xyz
        rx, ry, rz = lesion.radii_xyz
        rho = np.sqrt(
            ((x_mm - cx) / rx) ** 2
            + ((y_mm - cy) / ry) ** 2
            + ((z_mm - cz) / rz) ** 2,
        )
        values += base * lesion.contrast[modality] * _taper(rho)
    return values


def render_subject(spec: PhantomSpec, plan: SubjectPlan) -> Study:
    """Render a planned subject into a :class:`Study`."""
    volumes: dict[Modality, Volume] = {}
    for modality in Modality:
        nz, ny, nx = spec.dims(modality)
        dz, dy, dx = spec.spacing(modality)
        oz, oy, ox = spec.origin
        z_mm = (oz + dz * np.arange(nz))[:, None, None]
        y_mm = (oy + dy * np.arange(ny))[None, :, None]
        x_mm = (ox + dx * np.arange(nx))[None, None, :]
        field_values = intensity(spec, plan, modality, x_mm, y_mm, z_mm)
        if spec.noise_level > 0:
            noise_rng = make_rng(
                spec.seed,
                "phantom",
                plan.cohort.value,
                plan.index,
                "noise",
                modality.value,
            )
            field_values += noise_rng.normal(
                0.0,
                spec.noise_level * spec.base_intensity[modality],
                size=field_values.shape,
            )
        volumes[modality] = Volume(
            modality=modality,
            voxels=field_values.astype(np.float32),
            spacing=spec.spacing(modality),
            origin=spec.origin,
        )
    findings = tuple(
        Finding(
            subject_id=plan.subject_id,
            finding_id=lesion.finding_id,
            world_pos=lesion.center_xyz,
            clin_sig=lesion.clin_sig,
        )
        for lesion in plan.lesions
    )
    return Study(plan.subject_id, volumes, findings, plan.cohort)


def iter_cohort(
    spec: PhantomSpec,
    *,
    show_progress: bool = False,
) -> Iterator[Study]:
    """Render subjects one at a time, in plan order."""
    plans = plan_cohort(spec)
    logger.info(
        "Generating %d phantom subjects (seed %d)",
        len(plans),
        spec.seed,
    )
    for plan in tqdm(plans, desc="phantom", disable=not show_progress):
        yield render_subject(spec, plan)


def generate_cohort(
    spec: PhantomSpec,
    *,
    show_progress: bool = False,
) -> list[Study]:
    """Generate every subject of a phantom cohort.

    Test-cohort studies carry their true classes; :func:`write_cohort`
    hides them behind ``unknown`` when writing to disk.
    """
    return list(iter_cohort(spec, show_progress=show_progress))


def write_cohort(studies: Iterable[Study], out_dir: str | Path) -> Path:
    """Write studies, findings, hidden labels and a manifest.

    Test-cohort findings are written with ``clin_sig=unknown``; their true
    classes go to ``hidden_labels.csv``.

    Returns:
        Path of the written manifest.
    """
    root = Path(out_dir)
    entries: dict[str, StudyEntry] = {}
    hidden: list[Finding] = []
    for study in studies:
        study_dir = root / study.subject_id
        volume_paths = {
            modality: write_volume(
                study.volume(modality),
                study_dir / modality.manifest_key,
            )
            for modality in Modality
        }
        findings = list(study.findings)
        if study.cohort is Cohort.TEST:
            hidden.extend(findings)
            findings = [
                Finding(f.subject_id, f.finding_id, f.world_pos, ClinSig.UNKNOWN)
                for f in findings
            ]
        findings_path = study_dir / "findings.csv"
        write_findings_csv(findings, findings_path)
        entries[study.subject_id] = StudyEntry(
            study.subject_id,
            volume_paths,
            findings_path,
            study.cohort,
        )
    if hidden:
        write_findings_csv(hidden, root / "hidden_labels.csv")
    return write_manifest(
        CohortManifest(root=root, studies=entries),
        root / "manifest.json",
    )
