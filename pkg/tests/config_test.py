from __future__ import annotations

import json
from pathlib import Path

import pytest

from lesionstack.config import (
    DEFAULT_FOCAL_GRID,
    PipelineConfig,
    load_config,
    write_config,
)
from lesionstack.ensemble import FamilySelection
from lesionstack.exceptions import ConfigurationError
from lesionstack.patchgen import PatchGeometry, PatchSpec
from lesionstack.trainer import TrainConfig


def test_defaults() -> None:
    config = load_config(None)
    assert config == PipelineConfig()
    assert config.families == ("composite", "solo")
    assert config.ensembles == (
        FamilySelection.COMPOSITE,
        FamilySelection.SOLO,
        FamilySelection.QUADRUPLE,
    )
    assert config.meta is config.train
    assert config.manifest_path == Path("runs/phantom/manifest.json")
    assert len(DEFAULT_FOCAL_GRID) == 20
    assert len(config.patches.geometries) == 4


def test_file_round_trip(tmp_path: Path) -> None:
    config = PipelineConfig(
        output_dir=tmp_path / "run",
        streams={"*": {"growth_rate": 4}, "96x96x3": {"dropout": 0.1}},
        meta_train=TrainConfig(learning_rate=0.01, max_epochs=40),
        ensembles=(FamilySelection.SOLO,),
        focal_grid=((0.5, 1.0),),
        seed=9,
    )
    path = write_config(config, tmp_path / "config.json")
    assert load_config(path) == config
    assert load_config(path).meta.learning_rate == 0.01


def test_relative_paths_resolve_against_the_file(tmp_path: Path) -> None:
    path = tmp_path / "cfg" / "config.json"
    path.parent.mkdir()
    path.write_text(
        json.dumps(
            {
                "output_dir": "out",
                "manifest": "data/manifest.json",
                "patches": {"geometries": ["48", [8, 8, 3]]},
                "train": {"max_epochs": 5, "patience": 2},
            },
        ),
        encoding="utf-8",
    )
    config = load_config(path)
    assert config.output_dir == tmp_path / "cfg" / "out"
    assert config.manifest_path == tmp_path / "cfg" / "data" / "manifest.json"
    assert config.patches.geometries == (
        PatchGeometry(48, 48, 3),
        PatchGeometry(8, 8, 3),
    )
    assert config.train.max_epochs == 5


@pytest.mark.parametrize(
    "document",
    [
        {"seeds": 1},
        {"streams": {"*": {"geometry": "96"}}},
        {"ensemble_validation_fold": 5},
        {"threshold": 1.5},
        {"workers": 0},
        {"ensembles": ["triple"]},
        {"train": {"momentum": 2.0}},
        {"patches": {"families": ["composite"]}},
    ],
)
def test_invalid_documents(tmp_path: Path, document: dict[str, object]) -> None:
    path = tmp_path / "config.json"
    path.write_text(json.dumps(document), encoding="utf-8")
    with pytest.raises(ConfigurationError):
        load_config(path)


def test_unreadable_files(tmp_path: Path) -> None:
    with pytest.raises(ConfigurationError, match="cannot read"):
        load_config(tmp_path / "missing.json")
    path = tmp_path / "list.json"
    path.write_text("[1, 2]", encoding="utf-8")
    with pytest.raises(ConfigurationError, match="JSON object"):
        load_config(path)


def test_overrides_and_stage_sections() -> None:
    config = PipelineConfig(
        patches=PatchSpec(families=("solo",)),
        ensembles=(FamilySelection.SOLO,),
    )
    assert config.with_overrides() is config
    changed = config.with_overrides(seed=4, workers=2, output_dir="elsewhere")
    assert (changed.seed, changed.workers) == (4, 2)
    assert changed.output_dir == Path("elsewhere")
    section = changed.stage_dict("grid", "patches")
    assert set(section) == {"grid", "patches", "seed"}
    assert section["patches"]["families"] == ["solo"]
