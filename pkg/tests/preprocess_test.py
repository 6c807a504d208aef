from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from lesionstack.exceptions import (
    ConfigurationError,
    DataError,
    ManifestError,
    PatchGeometryError,
)
from lesionstack.preprocess import (
    GridSpec,
    ModalityStats,
    center_crop,
    crop_window,
    destandardize,
    fit_stats,
    read_stats,
    resample,
    standardize,
    standardize_study,
    unify_grid,
    write_stats,
)
from lesionstack.volstore import (
    ClinSig,
    Cohort,
    Finding,
    Modality,
    Study,
    Volume,
)

GRID = GridSpec(inplane_mm=0.5, slice_mm=3.0, crop_size=8)


def linear_volume(
    modality: Modality,
    shape: tuple[int, int, int],
    spacing: tuple[float, float, float],
    origin: tuple[float, float, float] = (0.0, -4.0, -4.0),
) -> Volume:
    """Voxels equal to 1 + 2x - 0.5y + 0.25z at their world position."""
    axes = [
        o + d * np.arange(n)
        for n, d, o in zip(shape, spacing, origin, strict=True)
    ]
    z, y, x = np.meshgrid(*axes, indexing="ij")
    return Volume(modality, 1 + 2 * x - 0.5 * y + 0.25 * z, spacing, origin)


def constant_study(
    subject_id: str,
    values: dict[Modality, np.ndarray],
    cohort: Cohort = Cohort.TRAIN,
    findings: tuple[Finding, ...] = (),
) -> Study:
    volumes = {
        m: Volume(m, v, (3.0, 0.5, 0.5), (0.0, 0.0, 0.0))
        for m, v in values.items()
    }
    return Study(subject_id, volumes, findings, cohort)


def random_study(
    rng: np.random.Generator,
    subject_id: str,
    cohort: Cohort = Cohort.TRAIN,
    shape: tuple[int, int, int] = (2, 5, 5),
) -> Study:
    values = {
        m: rng.normal(10.0 * (i + 1), i + 1.0, shape)
        for i, m in enumerate(Modality)
    }
    return constant_study(subject_id, values, cohort)


@pytest.mark.parametrize("inplane", [0.75, 1.5, 0.25])
def test_resample_reproduces_affine_fields(inplane: float) -> None:
    source = linear_volume(Modality.ADC, (3, 16, 16), (3.0, inplane, inplane))
    out = resample(source, GRID)
    assert out.spacing == GRID.spacing
    assert out.origin == source.origin
    assert out.dims == (3, round(16 * inplane / 0.5), round(16 * inplane / 0.5))

    reference = linear_volume(Modality.ADC, out.dims, GRID.spacing)
    # Only samples inside the source support are interpolated.
    inside = int(np.floor(15 * inplane / 0.5)) + 1
    np.testing.assert_allclose(
        out.voxels[:, :inside, :inside],
        reference.voxels[:, :inside, :inside],
        atol=1e-5,
    )


def test_resample_on_target_grid_is_a_copy() -> None:
    source = linear_volume(Modality.T2W, (2, 4, 4), GRID.spacing)
    out = resample(source, GRID)
    np.testing.assert_array_equal(out.voxels, source.voxels)
    assert out.voxels is not source.voxels


@pytest.mark.parametrize(
    ("extent", "size", "window"),
    [(10, 8, (1, 9)), (9, 8, (0, 8)), (11, 8, (1, 9)), (8, 8, (0, 8))],
)
def test_crop_window(extent: int, size: int, window: tuple[int, int]) -> None:
    assert crop_window(extent, size) == window


def test_center_crop_keeps_world_positions() -> None:
    volume = linear_volume(Modality.DWI, (2, 12, 13), GRID.spacing)
    cropped = center_crop(volume, GRID)
    assert cropped.dims == (2, 8, 8)
    for index in [(0, 0, 0), (1, 7, 7), (1, 3, 5)]:
        world = cropped.index_to_world(index)
        source_index = volume.world_to_index(world)
        assert cropped.voxels[index] == volume.voxels[source_index]


def test_center_crop_rejects_small_planes() -> None:
    volume = linear_volume(Modality.DWI, (2, 6, 12), GRID.spacing)
    with pytest.raises(PatchGeometryError):
        center_crop(volume, GRID)


def test_unify_grid_drops_findings_outside_the_crop() -> None:
    values = {m: np.zeros((2, 16, 16)) for m in Modality}
    inside = Finding("S1", "1", (3.75, 3.75, 3.0), ClinSig.POSITIVE)
    edge = Finding("S1", "2", (0.0, 0.0, 0.0), ClinSig.NEGATIVE)
    study = constant_study("S1", values, findings=(inside, edge))
    unified = unify_grid(study, GRID)
    assert [f.finding_id for f in unified.findings] == ["1"]
    for modality in Modality:
        assert unified.volume(modality).dims == (2, 8, 8)


def test_fit_stats_matches_pooled_moments(rng: np.random.Generator) -> None:
    studies = [random_study(rng, f"S{i}") for i in range(3)]
    studies.append(random_study(rng, "T0", Cohort.TEST))
    for modality in Modality:
        stats = fit_stats(studies, modality)
        pooled = np.concatenate(
            [s.volume(modality).voxels.ravel() for s in studies[:3]],
        )
        assert stats.count == pooled.size
        assert stats.mean == pytest.approx(pooled.mean(), rel=1e-12)
        assert stats.std == pytest.approx(pooled.std(), rel=1e-12)


def test_fit_stats_streams_from_a_factory(rng: np.random.Generator) -> None:
    studies = [random_study(rng, f"S{i}") for i in range(2)]
    calls = []

    def factory() -> list[Study]:
        calls.append(1)
        return studies

    streamed = fit_stats(factory, Modality.ADC)
    assert len(calls) == 2
    assert streamed == fit_stats(studies, Modality.ADC)


def test_fit_stats_needs_training_studies(rng: np.random.Generator) -> None:
    with pytest.raises(DataError):
        fit_stats([random_study(rng, "T0", Cohort.TEST)], Modality.T2W)
    with pytest.raises(DataError):
        fit_stats([], Modality.T2W)


def test_standardized_training_cohort(rng: np.random.Generator) -> None:
    studies = [random_study(rng, f"S{i}") for i in range(4)]
    stats = {m: fit_stats(studies, m) for m in Modality}
    standardized = [standardize_study(s, stats) for s in studies]
    for modality in Modality:
        pooled = np.concatenate(
            [s.volume(modality).voxels.ravel() for s in standardized],
        )
        assert pooled.mean() == pytest.approx(0.0, abs=1e-9)
        assert pooled.std() == pytest.approx(1.0, rel=1e-9)
        refit = fit_stats(standardized, modality)
        again = standardize(standardized[0].volume(modality), refit)
        np.testing.assert_allclose(
            again.voxels,
            standardized[0].volume(modality).voxels,
            atol=1e-9,
        )


def test_destandardize_inverts(rng: np.random.Generator) -> None:
    study = random_study(rng, "S0")
    stats = fit_stats([study], Modality.DWI)
    volume = study.volume(Modality.DWI)
    restored = destandardize(standardize(volume, stats), stats)
    np.testing.assert_allclose(restored.voxels, volume.voxels, rtol=1e-12)


def test_constant_modality_uses_the_std_floor() -> None:
    values = {m: np.full((1, 4, 4), 5.0) for m in Modality}
    study = constant_study("S1", values)
    stats = fit_stats([study], Modality.KTRANS)
    assert stats.std == 0.0
    out = standardize(study.volume(Modality.KTRANS), stats)
    assert np.all(np.isfinite(out.voxels))
    np.testing.assert_array_equal(out.voxels, 0.0)


def test_standardize_checks_modality(rng: np.random.Generator) -> None:
    study = random_study(rng, "S0")
    stats = fit_stats([study], Modality.ADC)
    with pytest.raises(ConfigurationError):
        standardize(study.volume(Modality.T2W), stats)


def test_stats_round_trip(tmp_path: Path) -> None:
    stats = {
        m: ModalityStats(m, mean=float(i), std=1.5 + i, count=10 * i)
        for i, m in enumerate(Modality)
    }
    write_stats(stats, tmp_path / "stats.json")
    assert read_stats(tmp_path / "stats.json") == stats
    (tmp_path / "bad.json").write_text('{"T2w": {}}', encoding="utf-8")
    with pytest.raises(ManifestError):
        read_stats(tmp_path / "bad.json")


def test_grid_validation() -> None:
    with pytest.raises(ConfigurationError):
        GridSpec(crop_size=7)
    with pytest.raises(ConfigurationError):
        GridSpec(inplane_mm=0.0)
