"""Grid unification and intensity standardization of study volumes."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np
from scipy import ndimage

from lesionstack.constants import (
    CROP_SIZE,
    STD_EPSILON,
    TARGET_INPLANE_MM,
    TARGET_SLICE_MM,
)
from lesionstack.exceptions import (
    ConfigurationError,
    DataError,
    ManifestError,
    PatchGeometryError,
)
from lesionstack.volstore import Cohort, Modality, Study, Volume

if TYPE_CHECKING:
    from collections.abc import Callable, Iterable, Iterator, Mapping

    from numpy.typing import NDArray

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GridSpec:
    """Target grid shared by every modality and study."""

    inplane_mm: float = TARGET_INPLANE_MM
    slice_mm: float = TARGET_SLICE_MM
    crop_size: int = CROP_SIZE

    def __post_init__(self) -> None:
        """Validate the grid."""
        if self.inplane_mm <= 0 or self.slice_mm <= 0 or self.crop_size <= 0:
            raise ConfigurationError(f"grid values must be positive: {self}")
        if self.crop_size % 2:
            raise ConfigurationError(
                f"crop size must be even, got {self.crop_size}",
            )

    @property
    def spacing(self) -> tuple[float, float, float]:
        """Target spacing (dz, dy, dx)."""
        return self.slice_mm, self.inplane_mm, self.inplane_mm

    def to_dict(self) -> dict[str, Any]:
        """JSON-ready representation."""
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> GridSpec:
        """Build from a JSON document; omitted fields keep defaults."""
        return cls(**data)


@dataclass(frozen=True)
class ModalityStats:
    """Training-cohort intensity statistics of one modality."""

    modality: Modality
    mean: float
    std: float
    count: int

    def to_dict(self) -> dict[str, Any]:
        """JSON-ready representation."""
        return {
            "mean": self.mean,
            "std": self.std,
            "count": self.count,
        }


def resample(volume: Volume, grid: GridSpec) -> Volume:
    """Trilinearly resample a volume onto the target spacing.

    The world origin is kept, so a world point addresses the same anatomy
    before and after. The output extent is ``round(n * spacing / target)``
    voxels per axis; samples beyond the source support take the nearest
    source voxel.
    """
    target = grid.spacing
    if tuple(volume.spacing) == target:
        return volume.with_voxels(volume.voxels.copy())
    out_dims = tuple(
        max(1, round(n * s / t))
        for n, s, t in zip(volume.dims, volume.spacing, target, strict=True)
    )
    axes = [
        np.arange(n_out, dtype=np.float64) * (t / s)
        for n_out, s, t in zip(out_dims, volume.spacing, target, strict=True)
    ]
    coords = np.meshgrid(*axes, indexing="ij")
    resampled = ndimage.map_coordinates(
        volume.voxels.astype(np.float64),
        coords,
        order=1,
        mode="nearest",
    )
    return volume.with_voxels(
        resampled.astype(volume.voxels.dtype),
        spacing=target,
    )


def crop_window(extent: int, size: int) -> tuple[int, int]:
    """Half-open centred window, ties toward the lower index."""
    start = (extent - size) // 2
    return start, start + size


def center_crop(volume: Volume, grid: GridSpec) -> Volume:
    """Crop the central ``crop_size`` square in-plane; z is kept.

    Raises:
        PatchGeometryError: If the plane is smaller than the crop.
    """
    _, ny, nx = volume.dims
    size = grid.crop_size
    if ny < size or nx < size:
        raise PatchGeometryError(
            f"{volume.modality} plane {ny}x{nx} is smaller than the "
            f"{size}x{size} crop",
        )
    y0, y1 = crop_window(ny, size)
    x0, x1 = crop_window(nx, size)
    oz, oy, ox = volume.origin
    _, dy, dx = volume.spacing
    return volume.with_voxels(
        volume.voxels[:, y0:y1, x0:x1].copy(),
        origin=(oz, oy + y0 * dy, ox + x0 * dx),
    )


def unify_grid(study: Study, grid: GridSpec) -> Study:
    """Resample and crop every modality of a study.

    Findings whose nearest voxel falls outside the cropped grid are
    dropped with a warning.
    """
    volumes = {
        modality: center_crop(resample(volume, grid), grid)
        for modality, volume in study.volumes.items()
    }
    kept = []
    for finding in study.findings:
        if all(v.contains_world(finding.world_pos) for v in volumes.values()):
            kept.append(finding)
        else:
            logger.warning(
                "Dropping finding %s outside the cropped field of view",
                finding.key,
            )
    return study.replace(volumes=volumes, findings=kept)


def fit_stats(
    studies: Iterable[Study] | Callable[[], Iterable[Study]],
    modality: Modality,
) -> ModalityStats:
    """Population mean and std of one modality over training studies.

    Uses two passes in float64: the mean first, then the squared deviations.
    A callable is invoked once per pass, so studies can be streamed from
    disk instead of held in memory.

    Raises:
        DataError: If no training study is given.
    """
    if callable(studies):
        source = studies
    else:
        materialised = list(studies)

        def source() -> Iterable[Study]:
            return materialised

    def _volumes() -> Iterator[NDArray[np.floating]]:
        for study in source():
            if study.cohort is Cohort.TRAIN:
                yield study.volume(modality).voxels

    count = 0
    total = 0.0
    for voxels in _volumes():
        count += voxels.size
        total += float(voxels.sum(dtype=np.float64))
    if count == 0:
        raise DataError(f"cannot fit {modality} stats on an empty cohort")
    mean = total / count
    squares = sum(
        float(np.square(v.astype(np.float64) - mean).sum()) for v in _volumes()
    )
    std = float(np.sqrt(squares / count))
    if std <= STD_EPSILON:
        logger.warning(
            "%s has near-zero spread (std=%g); using floor %g",
            modality,
            std,
            STD_EPSILON,
        )
    return ModalityStats(modality=modality, mean=mean, std=std, count=count)


def standardize(volume: Volume, stats: ModalityStats) -> Volume:
    """Map each voxel v to (v - mean) / max(std, 1e-8).

    Raises:
        ConfigurationError: If the stats belong to another modality.
    """
    if stats.modality is not volume.modality:
        raise ConfigurationError(
            f"cannot standardize {volume.modality} with {stats.modality} stats",
        )
    scale = max(stats.std, STD_EPSILON)
    values = (volume.voxels.astype(np.float64) - stats.mean) / scale
    return volume.with_voxels(values.astype(volume.voxels.dtype))


def destandardize(volume: Volume, stats: ModalityStats) -> Volume:
    """Inverse of :func:`standardize`."""
    scale = max(stats.std, STD_EPSILON)
    values = volume.voxels.astype(np.float64) * scale + stats.mean
    return volume.with_voxels(values.astype(volume.voxels.dtype))


def standardize_study(
    study: Study,
    stats: Mapping[Modality, ModalityStats],
) -> Study:
    """Standardize every modality of a study with frozen stats."""
    return study.replace(
        volumes={
            m: standardize(v, stats[m]) for m, v in study.volumes.items()
        },
    )


def write_stats(stats: Mapping[Modality, ModalityStats], path: Path) -> None:
    """Write ``stats.json`` (modality -> mean/std/count)."""
    document = {str(m): stats[m].to_dict() for m in Modality}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(document, indent=2), encoding="utf-8")


def read_stats(path: Path) -> dict[Modality, ModalityStats]:
    """Read ``stats.json`` written by :func:`write_stats`."""
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
        return {
            Modality(name): ModalityStats(
                modality=Modality(name),
                mean=float(entry["mean"]),
                std=float(entry["std"]),
                count=int(entry["count"]),
            )
            for name, entry in document.items()
        }
    except (OSError, ValueError, KeyError) as exc:
        raise ManifestError(f"cannot read stats {path}: {exc}") from exc
