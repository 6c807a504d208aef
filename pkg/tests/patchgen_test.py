from __future__ import annotations

import logging
import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from lesionstack.exceptions import (
    AlignmentError,
    ConfigurationError,
    ManifestError,
    PatchGeometryError,
)
from lesionstack.patchgen import (
    PatchArchive,
    PatchCenter,
    PatchGeometry,
    PatchSpec,
    Proposal,
    Provenance,
    admissible_ranges,
    align_modalities,
    extract_patch_set,
    extract_study,
    is_admissible,
    label_at,
    load_patch_bank,
    sample_centers,
    write_patch_archive,
)
from lesionstack.volstore import (
    ClinSig,
    Cohort,
    Finding,
    Modality,
    Study,
    Volume,
)

SPACING = (3.0, 0.5, 0.5)
DIMS = (5, 24, 24)
CENTRE = (6.0, 6.0, 6.0)


def make_study(
    subject_id: str = "S1",
    findings: tuple[tuple[str, tuple[float, float, float], ClinSig], ...] = (
        ("1", CENTRE, ClinSig.POSITIVE),
    ),
    cohort: Cohort = Cohort.TRAIN,
    shifts: dict[Modality, float] | None = None,
) -> Study:
    """Volumes whose voxels encode modality and flat index."""
    shifts = shifts or {}
    base = np.arange(math.prod(DIMS), dtype=np.float32).reshape(DIMS)
    volumes = {
        m: Volume(
            m,
            base + 1000.0 * number,
            SPACING,
            (0.0, 0.0, shifts.get(m, 0.0)),
        )
        for number, m in enumerate(Modality)
    }
    return Study(
        subject_id,
        volumes,
        tuple(Finding(subject_id, fid, pos, sig) for fid, pos, sig in findings),
        cohort,
    )


def test_geometry_parse_and_windows() -> None:
    assert PatchGeometry.parse("96") == PatchGeometry(96, 96, 3)
    assert PatchGeometry.parse("42") == PatchGeometry(42, 42, 1)
    assert PatchGeometry.parse("12X12x3").label == "12x12x3"
    assert PatchGeometry.parse([8, 8, 1]).zyx == (1, 8, 8)
    for bad in ("97", "1x2", "0x4x4"):
        with pytest.raises(ConfigurationError):
            PatchGeometry.parse(bad)

    geometry = PatchGeometry(8, 8, 1)
    assert geometry.window((2, 10, 11)) == (
        slice(2, 3),
        slice(6, 14),
        slice(7, 15),
    )
    assert geometry.crop_of(PatchGeometry(12, 12, 3)) == (
        slice(1, 2),
        slice(2, 10),
        slice(2, 10),
    )


def test_spec_validation(tiny_patches: PatchSpec) -> None:
    assert tiny_patches.envelope == PatchGeometry(12, 12, 3)
    with pytest.raises(ConfigurationError, match="parity"):
        PatchSpec(geometries=(PatchGeometry(8, 8, 1), PatchGeometry(12, 12, 2)))
    with pytest.raises(ConfigurationError):
        PatchSpec(geometries=())
    with pytest.raises(ConfigurationError):
        PatchSpec(positive_radius_mm=-1.0)
    with pytest.raises(ConfigurationError):
        PatchSpec(families=("composite", "dual"))
    assert PatchSpec.from_dict(tiny_patches.to_dict()) == tiny_patches


def test_admissible_ranges() -> None:
    envelope = PatchGeometry(12, 12, 3)
    ranges = admissible_ranges(DIMS, envelope)
    assert ranges == ((1, 4), (6, 18), (6, 18))
    assert is_admissible((1, 6, 17), ranges)
    assert not is_admissible((4, 6, 6), ranges)
    assert not is_admissible((2, 5, 6), ranges)
    with pytest.raises(PatchGeometryError):
        admissible_ranges((2, 24, 24), envelope)


def test_forced_centres_come_first(
    tiny_patches: PatchSpec,
    caplog: pytest.LogCaptureFixture,
) -> None:
    study = make_study(
        findings=(
            ("1", CENTRE, ClinSig.POSITIVE),
            ("2", (0.0, 0.0, 0.0), ClinSig.NEGATIVE),
        ),
    )
    with caplog.at_level(logging.WARNING):
        centers = sample_centers(study, tiny_patches, seed=4)
    assert "too close to the edge" in caplog.text

    assert len(centers) == tiny_patches.patches_per_study
    first = centers[0]
    assert first.index == (2, 12, 12)
    assert first.world_xyz == CENTRE
    assert first.provenance is Provenance.FINDING_CENTERED
    assert first.proposal is Proposal.FORCED
    assert first.finding_id == "1"
    assert all(c.provenance is Provenance.SEMI_RANDOM for c in centers[1:])

    ranges = admissible_ranges(DIMS, tiny_patches.envelope)
    assert all(is_admissible(c.index, ranges) for c in centers)
    assert sample_centers(study, tiny_patches, seed=4) == centers


def test_finding_proposals_follow_the_boost(tiny_patches: PatchSpec) -> None:
    spec = PatchSpec(
        geometries=tiny_patches.geometries,
        patches_per_study=2001,
        finding_boost=10.0,
        positive_radius_mm=2.0,
    )
    centers = sample_centers(make_study(), spec, seed=7)[1:]
    near = [c for c in centers if c.proposal is Proposal.FINDING]
    p = 10.0 / 11.0
    sigma = math.sqrt(p * (1 - p) / len(centers))
    assert abs(len(near) / len(centers) - p) < 4 * sigma

    half_voxel = math.hypot(1.5, 0.25, 0.25)
    for center in near:
        assert math.dist(center.world_xyz, CENTRE) <= 2.0 + half_voxel


def test_no_findings_means_uniform_draws(tiny_patches: PatchSpec) -> None:
    centers = sample_centers(make_study(findings=()), tiny_patches, seed=1)
    assert len(centers) == tiny_patches.patches_per_study
    assert {c.proposal for c in centers} == {Proposal.UNIFORM}


def test_forced_centres_never_exceed_the_count(
    tiny_patches: PatchSpec,
    caplog: pytest.LogCaptureFixture,
) -> None:
    spec = PatchSpec(geometries=tiny_patches.geometries, patches_per_study=1)
    study = make_study(
        findings=(
            ("1", CENTRE, ClinSig.POSITIVE),
            ("2", (7.0, 6.0, 6.0), ClinSig.NEGATIVE),
        ),
    )
    with caplog.at_level(logging.WARNING):
        centers = sample_centers(study, spec, seed=0)
    assert "keeping 1 of 2" in caplog.text
    assert len(centers) == 1
    assert centers[0].finding_id == "1"
    assert sample_centers(study, replace(spec, patches_per_study=0), 0) == []


def test_findings_free_training_patches_are_negative(
    tiny_patches: PatchSpec,
) -> None:
    sets = extract_study(make_study(findings=()), tiny_patches, seed=3)
    assert len(sets) == tiny_patches.patches_per_study
    assert {s.label for s in sets} == {ClinSig.NEGATIVE}


def test_alignment_is_checked(tiny_patches: PatchSpec) -> None:
    study = make_study(shifts={Modality.ADC: 1.0})
    with pytest.raises(AlignmentError):
        align_modalities(study, study.findings[0])
    with pytest.raises(AlignmentError):
        sample_centers(study, tiny_patches, seed=0)


def test_label_at() -> None:
    study = make_study()
    assert label_at(study, (7.0, 6.0, 6.0), 2.0) is ClinSig.POSITIVE
    assert label_at(study, (8.0, 6.0, 6.0), 2.0) is ClinSig.POSITIVE
    assert label_at(study, (9.0, 6.0, 6.0), 2.0) is ClinSig.NEGATIVE

    negative = make_study(findings=(("1", CENTRE, ClinSig.NEGATIVE),))
    assert label_at(negative, CENTRE, 2.0) is ClinSig.NEGATIVE
    unknown = make_study(findings=(("1", CENTRE, ClinSig.UNKNOWN),))
    assert label_at(unknown, CENTRE, 2.0) is ClinSig.UNKNOWN
    test_study = make_study(cohort=Cohort.TEST)
    assert label_at(test_study, CENTRE, 2.0) is ClinSig.UNKNOWN

    bare = make_study(findings=())
    assert label_at(bare, CENTRE, 5.0) is ClinSig.NEGATIVE
    assert label_at(bare, (0.0, 0.0, 0.0), 5.0) is ClinSig.NEGATIVE


def test_patches_share_one_centre(tiny_patches: PatchSpec) -> None:
    study = make_study()
    envelope = tiny_patches.envelope
    for patch_set in extract_study(study, tiny_patches, seed=2):
        index = patch_set.center.index
        outer = patch_set.patch("composite", envelope)
        assert outer.shape == (3, 3, 12, 12)
        assert outer.dtype == np.float32
        for geometry in tiny_patches.geometries:
            crop = (slice(None), *geometry.crop_of(envelope))
            np.testing.assert_array_equal(
                patch_set.patch("composite", geometry),
                outer[crop],
            )
            window = geometry.window(index)
            solo = patch_set.patch("solo", geometry)
            assert solo.shape == (1, *geometry.zyx)
            np.testing.assert_array_equal(
                solo[0],
                study.volume(Modality.KTRANS).voxels[window],
            )
            for channel, modality in enumerate(
                (Modality.T2W, Modality.ADC, Modality.DWI),
            ):
                np.testing.assert_array_equal(
                    patch_set.patch("composite", geometry)[channel],
                    study.volume(modality).voxels[window],
                )


def test_inadmissible_centre_is_refused(tiny_patches: PatchSpec) -> None:
    center = PatchCenter(
        index=(0, 12, 12),
        world_xyz=(6.0, 6.0, 0.0),
        provenance=Provenance.SEMI_RANDOM,
    )
    with pytest.raises(PatchGeometryError):
        extract_patch_set(make_study(), center, tiny_patches)


def test_archive_round_trip(tmp_path: Path, tiny_patches: PatchSpec) -> None:
    study = make_study()
    sets = extract_study(study, tiny_patches, seed=5)
    header = write_patch_archive("S1", sets, tiny_patches, tmp_path)
    assert header.name == "S1.patches.json"

    archive = PatchArchive(header)
    assert len(archive) == len(sets)
    assert archive.spec == tiny_patches
    for geometry in tiny_patches.geometries:
        np.testing.assert_array_equal(
            archive.load("solo", geometry),
            np.stack([s.patch("solo", geometry) for s in sets]),
        )
    codes = {ClinSig.POSITIVE: 1, ClinSig.NEGATIVE: 0, ClinSig.UNKNOWN: -1}
    np.testing.assert_array_equal(
        archive.labels(),
        [codes[s.label] for s in sets],
    )
    restored = archive.patch_set(0)
    assert restored.center == sets[0].center
    assert restored.label is sets[0].label
    np.testing.assert_array_equal(
        restored.patch("composite", tiny_patches.geometries[0]),
        sets[0].patch("composite", tiny_patches.geometries[0]),
    )

    index = (tmp_path / "S1.index.csv").read_text(encoding="utf-8")
    lines = index.splitlines()
    assert lines[0].startswith("entry,center_z,center_y,center_x")
    assert len(lines) == len(sets) + 1
    assert lines[1].endswith("finding_centered,1")

    with pytest.raises(ManifestError):
        archive.load("solo", PatchGeometry(42, 42, 1))
    with pytest.raises(ManifestError):
        PatchArchive(tmp_path / "missing.patches.json")


def test_patch_bank_from_archives(
    tmp_path: Path,
    tiny_patches: PatchSpec,
) -> None:
    headers = []
    for subject_id in ("S1", "S2"):
        study = make_study(subject_id)
        sets = extract_study(study, tiny_patches, seed=6)
        headers.append(
            write_patch_archive(subject_id, sets, tiny_patches, tmp_path),
        )
    geometry = tiny_patches.geometries[1]
    bank = load_patch_bank(
        [PatchArchive(h) for h in headers],
        "composite",
        geometry,
    )
    per_study = tiny_patches.patches_per_study
    assert len(bank) == 2 * per_study
    assert bank.x.shape == (2 * per_study, 3, 3, 12, 12)
    assert list(bank.subject_ids[:: per_study]) == ["S1", "S2"]
    assert int(bank.finding_centered.sum()) == 2
    assert bank.finding_ids[0] == "1"
    assert bank.finding_ids[1] is None

    only = bank.for_subjects(["S2"])
    assert len(only) == per_study
    assert set(only.subject_ids) == {"S2"}
    centred = bank.select(bank.finding_centered)
    assert list(centred.labels) == [1, 1]

    empty = load_patch_bank([], "solo", geometry)
    assert len(empty) == 0
    assert empty.x.shape == (0, 1, 3, 12, 12)
