"""Shared fixtures: tiny phantom cohorts, patch specs and stream configs."""

from __future__ import annotations

from collections.abc import Callable

import numpy as np
import pytest

from lesionstack.densenet import StreamConfig
from lesionstack.patchgen import PatchBank, PatchGeometry, PatchSpec
from lesionstack.phantom import PhantomSpec
from lesionstack.preprocess import GridSpec

TINY_GEOMETRIES = (PatchGeometry(8, 8, 1), PatchGeometry(12, 12, 3))


def pytest_addoption(parser: pytest.Parser) -> None:
    parser.addoption(
        "--run-slow",
        action="store_true",
        default=False,
        help="run end-to-end phantom benchmarks",
    )


def pytest_collection_modifyitems(
    config: pytest.Config,
    items: list[pytest.Item],
) -> None:
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240917)


@pytest.fixture
def tiny_phantom() -> PhantomSpec:
    """A 60 mm field of view with one lesion near the centre per subject."""
    return PhantomSpec(
        n_subjects=6,
        lesions_per_subject=(1, 1),
        positive_fraction=0.5,
        fov_mm=60.0,
        n_slices=4,
        lesion_radius_mm=(3.0, 4.0),
        lesion_zone_mm=12.0,
        seed=3,
    )


@pytest.fixture
def tiny_grid() -> GridSpec:
    return GridSpec(crop_size=64)


@pytest.fixture
def tiny_patches() -> PatchSpec:
    return PatchSpec(
        geometries=TINY_GEOMETRIES,
        patches_per_study=12,
        finding_boost=10.0,
        positive_radius_mm=2.0,
    )


@pytest.fixture
def tiny_stream() -> StreamConfig:
    return StreamConfig(
        geometry=PatchGeometry(12, 12, 3),
        in_channels=3,
        growth_rate=2,
        layers_per_block=1,
        head_width=4,
        dropout=0.0,
        dtype="float64",
    )


def synthetic_bank(
    rng: np.random.Generator,
    subjects: int,
    per_subject: int,
    shape: tuple[int, int, int, int],
) -> PatchBank:
    """Patches whose label shows as a brighter block in the first channel."""
    count = subjects * per_subject
    labels = np.tile(np.arange(per_subject) % 2, subjects).astype(np.int8)
    x = rng.standard_normal((count, *shape)).astype(np.float32)
    x[:, 0] += 1.5 * labels[:, None, None, None].astype(np.float32)
    subject_ids = np.repeat(
        [f"S{number:03d}" for number in range(subjects)],
        per_subject,
    ).astype(np.str_)
    centered = np.tile(np.arange(per_subject) < 2, subjects)
    return PatchBank(
        x=x,
        labels=labels,
        subject_ids=subject_ids,
        finding_centered=centered,
        finding_ids=tuple(
            f"{sid}-{n % per_subject}" if c else None
            for n, (sid, c) in enumerate(
                zip(subject_ids, centered, strict=True),
            )
        ),
    )


@pytest.fixture
def bank_factory(
    rng: np.random.Generator,
) -> Callable[..., PatchBank]:
    def _make(
        subjects: int = 6,
        per_subject: int = 8,
        shape: tuple[int, int, int, int] = (3, 3, 12, 12),
    ) -> PatchBank:
        return synthetic_bank(rng, subjects, per_subject, shape)

    return _make
