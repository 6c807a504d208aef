from __future__ import annotations

import math
from collections.abc import Callable
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from lesionstack import autodiff as ad
from lesionstack import trainer
from lesionstack.densenet import StreamConfig, build_stream
from lesionstack.exceptions import (
    ConfigurationError,
    DataError,
    NumericError,
    PatchGeometryError,
)
from lesionstack.losses import FocalParams, batch_loss, labels_to_signed
from lesionstack.patchgen import PatchBank, PatchGeometry
from lesionstack.trainer import (
    EarlyStopping,
    EpochRecord,
    FoldSplit,
    JobFilter,
    StreamJob,
    TrainConfig,
    eval_logits,
    evaluate_bank,
    grid_search_focal,
    make_folds,
    plan_stream_jobs,
    read_history,
    sgd_nesterov_step,
    stream_config_for,
    train_stream,
    write_focal_grid,
    write_history,
)

SHORT_RUN = TrainConfig(
    learning_rate=0.05,
    max_epochs=4,
    batch_size=8,
    patience=2,
    folds=2,
)


def strata(positives: int, negatives: int) -> dict[str, bool]:
    subjects = {f"P{i:03d}": True for i in range(positives)}
    subjects.update({f"N{i:03d}": False for i in range(negatives)})
    return subjects


@pytest.mark.parametrize(
    ("positives", "negatives", "k"),
    [(7, 16, 5), (3, 3, 2)],
)
def test_folds_partition_subjects(
    positives: int,
    negatives: int,
    k: int,
) -> None:
    subjects = strata(positives, negatives)
    folds = make_folds(subjects, k, seed=11)
    assert [f.fold for f in folds] == list(range(k))

    validation = [set(f.val_ids) for f in folds]
    assert set().union(*validation) == set(subjects)
    assert sum(len(v) for v in validation) == len(subjects)
    sizes = [len(v) for v in validation]
    assert max(sizes) - min(sizes) <= 1
    positive_counts = [sum(subjects[s] for s in v) for v in validation]
    assert max(positive_counts) - min(positive_counts) <= 1
    for fold in folds:
        assert set(fold.train_ids) == set(subjects) - set(fold.val_ids)


def test_folds_are_seeded() -> None:
    subjects = strata(6, 14)
    assert make_folds(subjects, 4, seed=1) == make_folds(subjects, 4, seed=1)
    assert make_folds(subjects, 4, seed=1) != make_folds(subjects, 4, seed=2)


def test_folds_need_enough_subjects() -> None:
    with pytest.raises(DataError):
        make_folds(strata(1, 2), 5, seed=0)
    with pytest.raises(ConfigurationError):
        make_folds(strata(3, 3), 1, seed=0)


def test_fold_dict_round_trip() -> None:
    fold = FoldSplit(fold=1, train_ids=("S1", "S2"), val_ids=("S3",))
    assert FoldSplit.from_dict(fold.to_dict()) == fold


def test_nesterov_step_matches_oracle(rng: np.random.Generator) -> None:
    config = TrainConfig(learning_rate=0.1, momentum=0.9, weight_decay=0.01)
    parameter = ad.Parameter("w", rng.standard_normal(4))
    w = parameter.data.copy()
    v = np.zeros(4)
    for _ in range(5):
        grad = rng.standard_normal(4)
        parameter.grad = grad.copy()
        sgd_nesterov_step([parameter], config)
        g = grad + 0.01 * w
        v = 0.9 * v - 0.1 * g
        w = w + 0.9 * v - 0.1 * g
        np.testing.assert_allclose(parameter.data, w, rtol=1e-12)
        np.testing.assert_allclose(parameter.velocity, v, rtol=1e-12)


def test_nesterov_step_skips_frozen_and_requires_gradients() -> None:
    frozen = ad.Parameter("frozen", np.ones(2))
    frozen.freeze()
    sgd_nesterov_step([frozen], TrainConfig())
    np.testing.assert_array_equal(frozen.data, [1.0, 1.0])
    with pytest.raises(NumericError):
        sgd_nesterov_step([ad.Parameter("live", np.ones(2))], TrainConfig())


def test_early_stopping_needs_strict_improvement() -> None:
    stopper = EarlyStopping(patience=2)
    assert stopper.update(1, 1.0)
    assert not stopper.update(2, 1.0)
    assert not stopper.should_stop
    assert not stopper.update(3, 1.5)
    assert stopper.should_stop
    assert stopper.best_epoch == 1
    assert stopper.update(4, 0.5)
    assert not stopper.should_stop


@pytest.mark.parametrize(
    "kwargs",
    [
        {"momentum": 1.0},
        {"learning_rate": -1.0},
        {"batch_size": 0},
        {"patience": 200, "max_epochs": 200},
        {"folds": 1},
    ],
)
def test_train_config_validation(kwargs: dict[str, float]) -> None:
    with pytest.raises(ConfigurationError):
        TrainConfig(**kwargs)


def test_history_round_trip(tmp_path: Path) -> None:
    history = [EpochRecord(1, 0.7, 0.69), EpochRecord(2, 0.61, 0.6123456789)]
    write_history(history, tmp_path / "h" / "fold0.history.csv")
    assert read_history(tmp_path / "h" / "fold0.history.csv") == history


def test_train_stream_keeps_best_epoch(
    tiny_stream: StreamConfig,
    bank_factory: Callable[..., PatchBank],
) -> None:
    bank = bank_factory()
    fold = make_folds({f"S{i:03d}": True for i in range(6)}, 2, seed=0)[0]
    focal = FocalParams(alpha=0.5, gamma=1.0)
    model = build_stream(tiny_stream, seed=1)
    result = train_stream(model, fold, bank, focal, SHORT_RUN, seed=3)

    assert 1 <= len(result.history) <= SHORT_RUN.max_epochs
    losses = [record.val_loss for record in result.history]
    best = int(np.argmin(losses))
    assert model.metadata.best_epoch == result.history[best].epoch
    assert model.metadata.best_val_loss == losses[best]
    assert model.metadata.epochs_seen == len(result.history)
    assert all(math.isfinite(r.train_loss) for r in result.history)

    val = bank.for_subjects(fold.val_ids)
    restored = batch_loss(
        eval_logits(model, val.x, SHORT_RUN.batch_size),
        labels_to_signed(val.labels),
        focal,
    )
    assert restored == pytest.approx(losses[best], rel=1e-9)


FROZEN_RUN = TrainConfig(
    learning_rate=0.0,
    max_epochs=20,
    batch_size=8,
    patience=3,
    folds=2,
)


def blank_bank(bank: PatchBank) -> PatchBank:
    """Zero patches: batch norm then emits its shift in eval mode whatever
    its running statistics, so a stream with lr=0 has a frozen val loss."""
    return replace(bank, x=np.zeros_like(bank.x))


def test_frozen_run_stops_after_patience(
    tiny_stream: StreamConfig,
    bank_factory: Callable[..., PatchBank],
) -> None:
    bank = blank_bank(bank_factory())
    fold = FoldSplit(0, ("S000", "S001", "S002", "S003"), ("S004", "S005"))
    model = build_stream(tiny_stream, seed=1)
    weights = {n: p.data.copy() for n, p in model.parameters.items()}
    result = train_stream(model, fold, bank, FocalParams(), FROZEN_RUN, 0)

    assert result.stopped_early
    assert [r.epoch for r in result.history] == [1, 2, 3, 4]
    assert len({r.val_loss for r in result.history}) == 1
    assert model.metadata.best_epoch == 1
    for name, parameter in model.parameters.items():
        np.testing.assert_array_equal(parameter.data, weights[name])


def test_plateau_after_epoch_five_stops_at_epoch_eight(
    tiny_stream: StreamConfig,
    bank_factory: Callable[..., PatchBank],
    monkeypatch: pytest.MonkeyPatch,
) -> None:
    curve = iter([1.0, 0.9, 0.8, 0.7, 0.6, *[0.6] * 15])
    monkeypatch.setattr(
        trainer,
        "batch_loss",
        lambda logits, labels, params: next(curve),
    )
    bank = blank_bank(bank_factory())
    fold = FoldSplit(0, ("S000", "S001", "S002", "S003"), ("S004", "S005"))
    model = build_stream(tiny_stream, seed=1)
    result = train_stream(model, fold, bank, FocalParams(), FROZEN_RUN, 0)

    assert result.stopped_early
    assert result.history[-1].epoch == 8
    assert model.metadata.best_epoch == 5
    assert model.metadata.best_val_loss == 0.6
    assert model.metadata.epochs_seen == 8


def test_train_stream_is_reproducible(
    tiny_stream: StreamConfig,
    bank_factory: Callable[..., PatchBank],
) -> None:
    bank = bank_factory()
    fold = FoldSplit(0, ("S000", "S001", "S002", "S003"), ("S004", "S005"))
    digests = []
    for _ in range(2):
        model = build_stream(tiny_stream, seed=1)
        train_stream(model, fold, bank, FocalParams(), SHORT_RUN, seed=3)
        digests.append(model.digest())
    assert digests[0] == digests[1]


def test_train_stream_rejects_bad_folds(
    tiny_stream: StreamConfig,
    bank_factory: Callable[..., PatchBank],
) -> None:
    bank = bank_factory()
    model = build_stream(tiny_stream, seed=1)
    empty = FoldSplit(0, ("S000",), ("S999",))
    with pytest.raises(DataError):
        train_stream(model, empty, bank, FocalParams(), SHORT_RUN, seed=0)
    overlap = FoldSplit(0, ("S000", "S001"), ("S001",))
    with pytest.raises(DataError):
        train_stream(model, overlap, bank, FocalParams(), SHORT_RUN, seed=0)
    solo_bank = bank_factory(shape=(1, 3, 12, 12))
    fold = FoldSplit(0, ("S000",), ("S001",))
    with pytest.raises(PatchGeometryError):
        train_stream(model, fold, solo_bank, FocalParams(), SHORT_RUN, seed=0)


def test_evaluate_bank_skips_unlabelled(
    tiny_stream: StreamConfig,
    bank_factory: Callable[..., PatchBank],
) -> None:
    bank = bank_factory(subjects=2)
    model = build_stream(tiny_stream, seed=1)
    model.logits(bank.x[:8], "train")
    unknown = PatchBank(
        x=bank.x,
        labels=np.full(len(bank), -1, dtype=np.int8),
        subject_ids=bank.subject_ids,
        finding_centered=bank.finding_centered,
        finding_ids=bank.finding_ids,
    )
    assert evaluate_bank(model, unknown).count == 0
    metrics = evaluate_bank(model, bank)
    assert metrics.count == len(bank)
    assert metrics.auc is not None


def test_grid_search_ranks_by_auc(
    tmp_path: Path,
    tiny_stream: StreamConfig,
    bank_factory: Callable[..., PatchBank],
) -> None:
    bank = bank_factory()
    fold = FoldSplit(0, ("S000", "S001", "S002", "S003"), ("S004", "S005"))
    config = TrainConfig(max_epochs=2, batch_size=16, patience=1, folds=2)
    results = grid_search_focal(
        tiny_stream,
        fold,
        bank,
        [(0.5, 0.0), (0.25, 2.0)],
        config,
        seed=5,
    )
    assert {(r.alpha, r.gamma) for r in results} == {(0.5, 0.0), (0.25, 2.0)}
    aucs = [r.val_auc for r in results]
    assert aucs == sorted(aucs, reverse=True)

    write_focal_grid(results, tmp_path / "grid.csv")
    lines = (tmp_path / "grid.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "rank,alpha,gamma,val_auc,val_loss"
    assert len(lines) == 3


def test_job_filter() -> None:
    job = StreamJob("composite", PatchGeometry(96, 96, 3), 2)
    assert JobFilter.parse("geometry=96,fold=2").matches(job)
    assert JobFilter.parse("family=composite").matches(job)
    assert not JobFilter.parse("family=solo").matches(job)
    assert not JobFilter.parse("fold=1").matches(job)
    assert JobFilter.parse(None) == JobFilter()
    for bad in ("depth=3", "fold", "fold=two"):
        with pytest.raises(ConfigurationError):
            JobFilter.parse(bad)


def test_job_paths() -> None:
    job = StreamJob("solo", PatchGeometry(42, 42, 1), 0)
    assert job.name == "solo/42x42x1/fold0"
    assert job.checkpoint_path("out") == Path("out/solo/42x42x1/fold0.json")
    assert job.history_path("out") == Path(
        "out/solo/42x42x1/fold0.history.csv",
    )


def test_plan_order_and_filter() -> None:
    geometries = (PatchGeometry(8, 8, 1), PatchGeometry(12, 12, 3))
    folds = make_folds(strata(2, 2), 2, seed=0)
    jobs = plan_stream_jobs(("composite", "solo"), geometries, folds)
    assert len(jobs) == 8
    assert jobs[0] == StreamJob("composite", geometries[0], 0)
    assert jobs[-1] == StreamJob("solo", geometries[1], 1)
    only = plan_stream_jobs(
        ("composite", "solo"),
        geometries,
        folds,
        JobFilter.parse("family=solo,fold=1"),
    )
    assert [job.name for job in only] == [
        "solo/8x8x1/fold1",
        "solo/12x12x3/fold1",
    ]


def test_stream_config_overrides() -> None:
    geometry = PatchGeometry(12, 12, 3)
    config = stream_config_for(
        "solo",
        geometry,
        {
            "*": {"growth_rate": 2, "head_width": 4},
            "12x12x3": {"growth_rate": 3},
        },
    )
    assert config.in_channels == 1
    assert config.growth_rate == 3
    assert config.head_width == 4
    with pytest.raises(ConfigurationError):
        stream_config_for("dual", geometry)
