from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from lesionstack.exceptions import (
    ConfigurationError,
    FindingsFormatError,
    ManifestError,
    VolumeIOError,
)
from lesionstack.volstore import (
    ClinSig,
    Cohort,
    CohortManifest,
    Finding,
    Modality,
    Study,
    StudyEntry,
    Volume,
    iter_studies,
    load_manifest,
    load_study,
    natural_key,
    read_findings_csv,
    read_predictions_csv,
    read_volume,
    write_findings_csv,
    write_manifest,
    write_predictions_csv,
    write_volume,
)

HEADER = "subject_id,finding_id,pos_x_mm,pos_y_mm,pos_z_mm,clin_sig\n"


def make_volume(
    modality: Modality = Modality.T2W,
    shape: tuple[int, int, int] = (4, 6, 5),
) -> Volume:
    voxels = np.arange(np.prod(shape), dtype=np.float32).reshape(shape)
    return Volume(modality, voxels, (3.0, 0.5, 0.5), (-6.0, -1.5, -1.0))


def make_study(subject_id: str = "S1", cohort: Cohort = Cohort.TRAIN) -> Study:
    volumes = {m: make_volume(m) for m in Modality}
    finding = Finding(subject_id, "1", (0.0, 0.0, 0.0), ClinSig.POSITIVE)
    return Study(subject_id, volumes, (finding,), cohort)


def test_volume_round_trip(tmp_path: Path) -> None:
    volume = make_volume()
    header = write_volume(volume, tmp_path / "vol" / "t2w")
    assert header == tmp_path / "vol" / "t2w.json"
    assert (tmp_path / "vol" / "t2w.f32").stat().st_size == 4 * 4 * 6 * 5

    loaded = read_volume(header)
    np.testing.assert_array_equal(loaded.voxels, volume.voxels)
    assert loaded.voxels.dtype == np.float32
    assert loaded.spacing == volume.spacing
    assert loaded.origin == volume.origin
    assert loaded.modality is Modality.T2W
    document = json.loads(header.read_text(encoding="utf-8"))
    assert document["order"] == "zyx"
    assert document["dtype"] == "f32le"


def test_volume_blob_is_little_endian_zyx(tmp_path: Path) -> None:
    write_volume(make_volume(shape=(2, 2, 3)), tmp_path / "v.json")
    raw = np.fromfile(tmp_path / "v.f32", dtype="<f4")
    # x varies fastest.
    np.testing.assert_array_equal(raw, np.arange(12, dtype=np.float32))


def test_non_finite_volume_is_not_written(tmp_path: Path) -> None:
    voxels = np.zeros((1, 2, 2), dtype=np.float32)
    voxels[0, 0, 0] = np.nan
    volume = Volume(Modality.ADC, voxels, (1.0, 1.0, 1.0), (0.0, 0.0, 0.0))
    with pytest.raises(VolumeIOError):
        write_volume(volume, tmp_path / "nan")
    assert not (tmp_path / "nan.json").exists()


def test_truncated_blob(tmp_path: Path) -> None:
    header = write_volume(make_volume(), tmp_path / "v")
    blob = tmp_path / "v.f32"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(VolumeIOError, match="voxels"):
        read_volume(header)


def test_world_index_mapping() -> None:
    volume = make_volume()
    # origin (z, y, x) = (-6, -1.5, -1); spacing (3, 0.5, 0.5).
    assert volume.index_to_world((2, 3, 2)) == (0.0, 0.0, 0.0)
    assert volume.world_to_index((0.0, 0.0, 0.0)) == (2, 3, 2)
    # Half-way points round up.
    assert volume.world_to_index((0.25, 0.25, 1.5)) == (3, 4, 3)
    assert volume.contains_world((0.0, 0.0, 0.0))
    assert not volume.contains_world((0.0, 0.0, 9.0))


@pytest.mark.parametrize(
    "kwargs",
    [
        {"voxels": np.zeros((2, 2))},
        {"spacing": (1.0, 0.0, 1.0)},
        {"origin": (0.0, float("inf"), 0.0)},
    ],
)
def test_volume_validation(kwargs: dict[str, object]) -> None:
    arguments: dict[str, object] = {
        "modality": Modality.DWI,
        "voxels": np.zeros((1, 2, 2)),
        "spacing": (1.0, 1.0, 1.0),
        "origin": (0.0, 0.0, 0.0),
    }
    arguments.update(kwargs)
    with pytest.raises(ConfigurationError):
        Volume(**arguments)  # type: ignore[arg-type]


def test_study_invariants() -> None:
    volumes = {m: make_volume(m) for m in Modality}
    with pytest.raises(ConfigurationError, match="lacks"):
        Study("S1", {Modality.T2W: volumes[Modality.T2W]})
    far = Finding("S1", "1", (50.0, 0.0, 0.0), ClinSig.NEGATIVE)
    with pytest.raises(ConfigurationError, match="outside"):
        Study("S1", volumes, (far,))
    stranger = Finding("S2", "1", (0.0, 0.0, 0.0), ClinSig.NEGATIVE)
    with pytest.raises(ConfigurationError):
        Study("S1", volumes, (stranger,))
    mislabelled = dict(volumes)
    mislabelled[Modality.ADC] = volumes[Modality.DWI]
    with pytest.raises(ConfigurationError, match="tagged"):
        Study("S1", mislabelled)


def test_findings_round_trip(tmp_path: Path) -> None:
    findings = [
        Finding("S10", "1", (1.5, -2.0, 3.25), ClinSig.NEGATIVE),
        Finding("S2", "2", (0.1, 0.2, 0.3), ClinSig.UNKNOWN),
        Finding("S2", "1", (0.0, 0.0, 0.0), ClinSig.POSITIVE),
    ]
    write_findings_csv(findings, tmp_path / "findings.csv")
    loaded = read_findings_csv(tmp_path / "findings.csv")
    assert [f.key for f in loaded] == [("S2", "1"), ("S2", "2"), ("S10", "1")]
    assert set(loaded) == set(findings)


@pytest.mark.parametrize(
    ("body", "line"),
    [
        ("S1,1,0,0,0,1\nS1,1,1,1,1,0\n", 3),
        ("S1,1,zero,0,0,1\n", 2),
        ("S1,1,0,0,nan,1\n", 2),
        ("S1,1,0,0,0,maybe\n", 2),
        ("S1,1,0,0\n", 2),
    ],
)
def test_malformed_findings(tmp_path: Path, body: str, line: int) -> None:
    path = tmp_path / "findings.csv"
    path.write_text(HEADER + body, encoding="utf-8")
    with pytest.raises(FindingsFormatError) as excinfo:
        read_findings_csv(path)
    assert excinfo.value.line_number == line


def test_findings_header_is_checked(tmp_path: Path) -> None:
    path = tmp_path / "findings.csv"
    path.write_text("id,x,y,z\n", encoding="utf-8")
    with pytest.raises(FindingsFormatError, match="header"):
        read_findings_csv(path)


def test_clin_sig_spellings() -> None:
    assert ClinSig.parse("TRUE") is ClinSig.POSITIVE
    assert ClinSig.parse(" 0 ") is ClinSig.NEGATIVE
    assert ClinSig.parse("") is ClinSig.UNKNOWN
    assert not Finding("S", "1", (0, 0, 0), ClinSig.UNKNOWN).is_labelled


def test_predictions_round_trip(tmp_path: Path) -> None:
    rows = [
        ("S2", "2", 0.123456789),
        ("S10", "1", 0.25),
        ("S2", "10", 1.0),
    ]
    write_predictions_csv(rows, tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "subject_id,finding_id,clin_sig_probability"
    assert lines[1:] == ["S10,1,0.250000", "S2,10,1.000000", "S2,2,0.123457"]
    assert read_predictions_csv(tmp_path / "p.csv")[("S10", "1")] == 0.25


def test_predictions_must_be_probabilities(tmp_path: Path) -> None:
    with pytest.raises(ConfigurationError):
        write_predictions_csv([("S1", "1", 1.5)], tmp_path / "p.csv")


def test_natural_order() -> None:
    ids = ["S10", "S2", "S1", "S01b"]
    assert sorted(ids, key=natural_key) == ["S1", "S01b", "S2", "S10"]


def write_study(study: Study, root: Path) -> StudyEntry:
    volumes = {}
    for modality, volume in study.volumes.items():
        base = root / study.subject_id / modality.manifest_key
        volumes[modality] = write_volume(volume, base).with_suffix("")
    findings = root / study.subject_id / "findings.csv"
    write_findings_csv(study.findings, findings)
    return StudyEntry(study.subject_id, volumes, findings, study.cohort)


def test_manifest_round_trip(tmp_path: Path) -> None:
    root = tmp_path / "cohort"
    entries = {
        sid: write_study(make_study(sid, cohort), root)
        for sid, cohort in (("S1", Cohort.TRAIN), ("S2", Cohort.TEST))
    }
    manifest = CohortManifest(root, entries, frozenset({"S3"}))
    path = write_manifest(manifest, root / "manifest.json")
    document = json.loads(path.read_text(encoding="utf-8"))
    assert document["root"] == "."
    assert document["studies"]["S1"]["t2w"] == "S1/t2w"

    loaded = load_manifest(path)
    assert loaded.subject_ids() == ["S1", "S2"]
    assert loaded.subject_ids(Cohort.TEST) == ["S2"]
    study = load_study(loaded, "S2")
    assert study.cohort is Cohort.TEST
    assert study.has_positive
    assert [s.subject_id for s in iter_studies(loaded, Cohort.TRAIN)] == ["S1"]


def test_manifest_errors(tmp_path: Path) -> None:
    root = tmp_path / "cohort"
    entry = write_study(make_study("S1"), root)
    manifest = CohortManifest(root, {"S1": entry}, frozenset({"S1"}))
    path = write_manifest(manifest, root / "manifest.json")
    loaded = load_manifest(path)
    assert loaded.subject_ids() == []
    with pytest.raises(ManifestError, match="excluded"):
        load_study(loaded, "S1")
    with pytest.raises(ManifestError, match="unknown"):
        load_study(loaded, "S9")

    write_manifest(CohortManifest(root, {"S1": entry}), path)
    (root / "S1" / "adc.json").unlink()
    with pytest.raises(ManifestError, match="missing file"):
        load_manifest(path)
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(ManifestError):
        load_manifest(path)
