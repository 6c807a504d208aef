"""The pipeline configuration document."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING, Any

from lesionstack.constants import DECISION_THRESHOLD, META_HIDDEN_WIDTH
from lesionstack.densenet import StreamConfig
from lesionstack.ensemble import FamilySelection
from lesionstack.exceptions import ConfigurationError
from lesionstack.losses import FocalParams
from lesionstack.patchgen import PatchSpec
from lesionstack.phantom import PhantomSpec
from lesionstack.preprocess import GridSpec
from lesionstack.trainer import TrainConfig

if TYPE_CHECKING:
    from collections.abc import Mapping

logger = logging.getLogger(__name__)

CONFIG_FILENAME = "config.json"

DEFAULT_FOCAL_GRID: tuple[tuple[float, float], ...] = tuple(
    (alpha, gamma)
    for alpha in (0.25, 0.5, 0.75, 1.0)
    for gamma in (0.0, 0.5, 1.0, 1.5, 2.0)
)

# Stream fields a per-geometry override may set.
_STREAM_KEYS = frozenset(StreamConfig.__dataclass_fields__) - {
    "geometry",
    "in_channels",
}


@dataclass(frozen=True)
class PipelineConfig:
    """Every setting of a pipeline run.

    ``streams`` maps ``"*"`` or a geometry label such as ``"96x96x3"`` to
    :class:`StreamConfig` fields; the label entry wins over ``"*"``.
    ``manifest`` defaults to the phantom cohort inside ``output_dir``.
    """

    output_dir: Path = Path("runs")
    manifest: Path | None = None
    grid: GridSpec = field(default_factory=GridSpec)
    patches: PatchSpec = field(default_factory=PatchSpec)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    streams: dict[str, dict[str, Any]] = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    meta_train: TrainConfig | None = None
    focal: FocalParams = field(default_factory=FocalParams)
    ensembles: tuple[FamilySelection, ...] = tuple(FamilySelection)
    ensemble_validation_fold: int = 0
    meta_hidden_width: int = META_HIDDEN_WIDTH
    focal_grid: tuple[tuple[float, float], ...] = DEFAULT_FOCAL_GRID
    threshold: float = DECISION_THRESHOLD
    seed: int = 0
    workers: int = 1

    def __post_init__(self) -> None:
        """Validate cross-field constraints."""
        for key, values in self.streams.items():
            unknown = set(values) - _STREAM_KEYS
            if unknown:
                raise ConfigurationError(
                    f"streams[{key!r}] has unknown fields {sorted(unknown)}",
                )
        if not 0 <= self.ensemble_validation_fold < self.train.folds:
            raise ConfigurationError(
                f"ensemble_validation_fold must be in [0, {self.train.folds})",
            )
        for selection in self.ensembles:
            missing = set(selection.families) - set(self.patches.families)
            if missing:
                raise ConfigurationError(
                    f"ensemble {selection} needs families {sorted(missing)} "
                    "that are not extracted",
                )
        if self.meta_hidden_width < 1:
            raise ConfigurationError("meta_hidden_width must be >= 1")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigurationError(
                f"threshold must be in [0, 1], got {self.threshold}",
            )
        if self.workers < 1:
            raise ConfigurationError(f"workers must be >= 1, got {self.workers}")

    @property
    def families(self) -> tuple[str, ...]:
        """Channel families extracted and trained."""
        return self.patches.families

    @property
    def meta(self) -> TrainConfig:
        """Optimizer settings of the meta network."""
        return self.meta_train or self.train

    @property
    def manifest_path(self) -> Path:
        """The cohort manifest the data stages read."""
        if self.manifest is not None:
            return self.manifest
        return self.output_dir / "phantom" / "manifest.json"

    def with_overrides(
        self,
        *,
        seed: int | None = None,
        workers: int | None = None,
        output_dir: str | Path | None = None,
    ) -> PipelineConfig:
        """Apply command-line overrides."""
        changes: dict[str, Any] = {}
        if seed is not None:
            changes["seed"] = seed
        if workers is not None:
            changes["workers"] = workers
        if output_dir is not None:
            changes["output_dir"] = Path(output_dir)
        return replace(self, **changes) if changes else self

    def to_dict(self) -> dict[str, Any]:
        """JSON-ready representation of the resolved config."""
        return {
            "output_dir": str(self.output_dir),
            "manifest": None if self.manifest is None else str(self.manifest),
            "grid": self.grid.to_dict(),
            "patches": self.patches.to_dict(),
            "phantom": self.phantom.to_dict(),
            "streams": {k: dict(v) for k, v in sorted(self.streams.items())},
            "train": self.train.to_dict(),
            "meta_train": (
                None if self.meta_train is None else self.meta_train.to_dict()
            ),
            "focal": self.focal.to_dict(),
            "ensembles": [s.value for s in self.ensembles],
            "ensemble_validation_fold": self.ensemble_validation_fold,
            "meta_hidden_width": self.meta_hidden_width,
            "focal_grid": [list(pair) for pair in self.focal_grid],
            "threshold": self.threshold,
            "seed": self.seed,
            "workers": self.workers,
        }

    def stage_dict(self, *sections: str) -> dict[str, Any]:
        """The config sections a stage depends on, for its manifest."""
        document = self.to_dict()
        return {name: document[name] for name in (*sections, "seed")}

    @classmethod
    def from_dict(
        cls,
        data: Mapping[str, Any],
        base_dir: Path | None = None,
    ) -> PipelineConfig:
        """Build from a JSON document; omitted fields keep defaults.

        Relative paths resolve against ``base_dir`` when given.

        Raises:
            ConfigurationError: On unknown keys or invalid values.
        """
        kwargs: dict[str, Any] = dict(data)
        unknown = set(kwargs) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        sections = {
            "grid": GridSpec.from_dict,
            "patches": PatchSpec.from_dict,
            "phantom": PhantomSpec.from_dict,
            "train": TrainConfig.from_dict,
            "focal": FocalParams.from_dict,
        }
        try:
            for name, build in sections.items():
                if name in kwargs:
                    kwargs[name] = build(kwargs[name])
            if kwargs.get("meta_train") is not None:
                kwargs["meta_train"] = TrainConfig.from_dict(
                    kwargs["meta_train"],
                )
            for name in ("output_dir", "manifest"):
                if kwargs.get(name) is not None:
                    path = Path(kwargs[name])
                    if base_dir is not None and not path.is_absolute():
                        path = base_dir / path
                    kwargs[name] = path
            if "streams" in kwargs:
                kwargs["streams"] = {
                    str(k): dict(v) for k, v in kwargs["streams"].items()
                }
            if "ensembles" in kwargs:
                kwargs["ensembles"] = tuple(
                    FamilySelection(s) for s in kwargs["ensembles"]
                )
            if "focal_grid" in kwargs:
                kwargs["focal_grid"] = tuple(
                    (float(a), float(g)) for a, g in kwargs["focal_grid"]
                )
            return cls(**kwargs)
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigurationError(f"invalid config: {exc}") from exc


def load_config(path: str | Path | None) -> PipelineConfig:
    """Load a config JSON file, or the defaults when no path is given.

    Raises:
        ConfigurationError: If the file cannot be read or is invalid.
    """
    if path is None:
        return PipelineConfig()
    config_path = Path(path)
    try:
        document = json.loads(config_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(
            f"cannot read config {config_path}: {exc}",
        ) from exc
    if not isinstance(document, dict):
        raise ConfigurationError(f"config {config_path} must be a JSON object")
    logger.debug("Loaded config %s", config_path)
    return PipelineConfig.from_dict(document, base_dir=config_path.parent)


def write_config(config: PipelineConfig, path: str | Path) -> Path:
    """Write the resolved config for provenance."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(
        json.dumps(config.to_dict(), indent=2, sort_keys=True),
        encoding="utf-8",
    )
    return target
