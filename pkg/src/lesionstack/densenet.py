"""Patch-size specific 3D DenseNet streams.

A stream maps a ``(channels, depth, height, width)`` patch to one
probability. The layout is

    stem conv 3x3x3 -> maxpool 2x2x1
    -> [dense block -> transition] x (blocks - 1) -> dense block
    -> BN + relu -> global average pool -> dropout
    -> FC(head) + relu -> FC(1) -> sigmoid

Dense-block layers are pre-activation bottlenecks: BN + relu, a 1x1x1
convolution to ``4g`` channels, BN + relu, then a 3x3x3 convolution to
``g`` channels, concatenated onto the layer input. Convolutions carry no
bias since a batch norm always follows them.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np

from lesionstack import autodiff as ad
from lesionstack.constants import (
    CHECKPOINT_FORMAT_VERSION,
    COMPRESSION,
    DROPOUT_RATE,
    FLOAT_DTYPE,
    GROWTH_RATE,
    HEAD_WIDTH,
    LAYERS_PER_BLOCK,
    OUTPUT_INIT_GAIN,
)
from lesionstack.exceptions import (
    CheckpointError,
    ConfigurationError,
    PatchGeometryError,
)
from lesionstack.patchgen import PatchGeometry

if TYPE_CHECKING:
    from collections.abc import Iterator, Mapping

    from numpy.typing import NDArray

logger = logging.getLogger(__name__)

_LE_FLOAT32 = np.dtype("<f4")
_DTYPES = {"float32": np.float32, "float64": np.float64}


def default_blocks(geometry: PatchGeometry) -> int:
    """Four dense blocks for the 96 in-plane patch, three otherwise."""
    return 4 if max(geometry.height, geometry.width) >= 96 else 3


@dataclass(frozen=True)
class StreamConfig:
    """Architecture of one stream.

    ``blocks``, ``initial_filters`` and ``bottleneck_width`` default to the
    geometry rule, ``2 * growth_rate`` and ``4 * growth_rate``.
    """

    geometry: PatchGeometry
    in_channels: int
    growth_rate: int = GROWTH_RATE
    layers_per_block: int = LAYERS_PER_BLOCK
    blocks: int | None = None
    initial_filters: int | None = None
    bottleneck_width: int | None = None
    compression: float = COMPRESSION
    dropout: float = DROPOUT_RATE
    head_width: int = HEAD_WIDTH
    dtype: str = "float32"

    def __post_init__(self) -> None:
        """Resolve derived widths and validate the architecture."""
        if self.blocks is None:
            object.__setattr__(self, "blocks", default_blocks(self.geometry))
        if self.initial_filters is None:
            object.__setattr__(self, "initial_filters", 2 * self.growth_rate)
        if self.bottleneck_width is None:
            object.__setattr__(self, "bottleneck_width", 4 * self.growth_rate)
        if self.blocks not in {3, 4}:
            raise ConfigurationError(
                f"a stream has 3 or 4 dense blocks, got {self.blocks}",
            )
        widths = {
            "in_channels": self.in_channels,
            "growth_rate": self.growth_rate,
            "layers_per_block": self.layers_per_block,
            "initial_filters": self.initial_filters,
            "bottleneck_width": self.bottleneck_width,
            "head_width": self.head_width,
        }
        for name, value in widths.items():
            if value is None or value < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {value}")
        if not 0.0 < self.compression <= 1.0:
            raise ConfigurationError(
                f"compression must be in (0, 1], got {self.compression}",
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(
                f"dropout must be in [0, 1), got {self.dropout}",
            )
        if self.dtype not in _DTYPES:
            raise ConfigurationError(
                f"dtype must be one of {sorted(_DTYPES)}, got {self.dtype!r}",
            )
        channel_plan(self)

    @property
    def np_dtype(self) -> type[np.floating]:
        """Numpy precision of parameters and activations."""
        return _DTYPES[self.dtype]

    @property
    def input_shape(self) -> tuple[int, int, int, int]:
        """Expected per-sample input shape (c, d, h, w)."""
        return (self.in_channels, *self.geometry.zyx)

    def to_dict(self) -> dict[str, Any]:
        """JSON-ready representation."""
        g = self.geometry
        return {
            "geometry": [g.height, g.width, g.depth],
            "in_channels": self.in_channels,
            "growth_rate": self.growth_rate,
            "layers_per_block": self.layers_per_block,
            "blocks": self.blocks,
            "initial_filters": self.initial_filters,
            "bottleneck_width": self.bottleneck_width,
            "compression": self.compression,
            "dropout": self.dropout,
            "head_width": self.head_width,
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> StreamConfig:
        """Build from :meth:`to_dict` output."""
        kwargs = dict(data)
        kwargs["geometry"] = PatchGeometry.parse(kwargs["geometry"])
        return cls(**kwargs)


@dataclass(frozen=True)
class PlanPoint:
    """Channels and spatial extent at a named point of the stream."""

    name: str
    channels: int
    spatial: tuple[int, int, int]


def _pool_window(depth: int) -> tuple[int, int, int]:
    return (2, 2, 2) if depth >= 2 else (1, 2, 2)


def _pooled(spatial: tuple[int, int, int], window: tuple[int, int, int]):
    return tuple(s // w for s, w in zip(spatial, window, strict=True))


def channel_plan(config: StreamConfig) -> list[PlanPoint]:
    """Closed-form channel and extent bookkeeping of a stream.

    Raises:
        ConfigurationError: If pooling would collapse a spatial axis.
    """
    spatial = config.geometry.zyx
    plan = [PlanPoint("input", config.in_channels, spatial)]
    channels = int(config.initial_filters)  # type: ignore[arg-type]
    plan.append(PlanPoint("stem", channels, spatial))

    def _pool(name: str, window: tuple[int, int, int]) -> None:
        nonlocal spatial
        pooled = _pooled(spatial, window)
        if min(pooled) < 1:
            raise ConfigurationError(
                f"{config.geometry.label} stream collapses to {pooled} at "
                f"{name}; use fewer blocks or a larger patch",
            )
        spatial = pooled  # type: ignore[assignment]

    _pool("stem_pool", (1, 2, 2))
    plan.append(PlanPoint("stem_pool", channels, spatial))
    for block in range(int(config.blocks)):  # type: ignore[arg-type]
        channels += config.layers_per_block * config.growth_rate
        plan.append(PlanPoint(f"block{block}", channels, spatial))
        if block == config.blocks - 1:  # type: ignore[operator]
            break
        channels = math.floor(config.compression * channels)
        if channels < 1:
            raise ConfigurationError(
                f"transition{block} compresses to zero channels",
            )
        _pool(f"transition{block}", _pool_window(spatial[0]))
        plan.append(PlanPoint(f"transition{block}", channels, spatial))
    plan.append(PlanPoint("pool", channels, (1, 1, 1)))
    plan.append(PlanPoint("head", config.head_width, (1, 1, 1)))
    plan.append(PlanPoint("output", 1, (1, 1, 1)))
    return plan


def expected_parameter_count(config: StreamConfig) -> int:
    """Number of trainable scalars implied by a config."""
    g = config.growth_rate
    b = int(config.bottleneck_width)  # type: ignore[arg-type]
    channels = int(config.initial_filters)  # type: ignore[arg-type]
    total = 27 * config.in_channels * channels
    for block in range(int(config.blocks)):  # type: ignore[arg-type]
        for _ in range(config.layers_per_block):
            total += 2 * channels + channels * b + 2 * b + 27 * b * g
            channels += g
        if block < config.blocks - 1:  # type: ignore[operator]
            compressed = math.floor(config.compression * channels)
            total += 2 * channels + channels * compressed
            channels = compressed
    total += 2 * channels
    total += channels * config.head_width + config.head_width
    total += config.head_width + 1
    return total


@dataclass
class TrainingMetadata:
    """Bookkeeping stored with a checkpoint."""

    epochs_seen: int = 0
    best_epoch: int | None = None
    best_val_loss: float | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        """JSON-ready representation."""
        return {
            "epochs_seen": self.epochs_seen,
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> TrainingMetadata:
        """Build from :meth:`to_dict` output."""
        return cls(
            epochs_seen=int(data.get("epochs_seen", 0)),
            best_epoch=data.get("best_epoch"),
            best_val_loss=data.get("best_val_loss"),
            extra=dict(data.get("extra", {})),
        )


class StreamModel:
    """A built stream: parameters, batch-norm state and forward pass."""

    def __init__(self, config: StreamConfig) -> None:
        """Create an empty model; use :func:`build_stream` to initialize."""
        self.config = config
        self.parameters: dict[str, ad.Parameter] = {}
        self.bn_states: dict[str, ad.BatchNormState] = {}
        self.layers: list[tuple[str, str]] = []
        self.metadata = TrainingMetadata()

    def __repr__(self) -> str:
        """Short description."""
        return (
            f"StreamModel({self.config.geometry.label}, "
            f"in_channels={self.config.in_channels}, "
            f"parameters={self.parameter_count})"
        )

    @property
    def parameter_count(self) -> int:
        """Trainable scalars."""
        return sum(p.data.size for p in self.parameters.values())

    @property
    def frozen(self) -> bool:
        """Whether every parameter is frozen."""
        return not any(p.requires_grad for p in self.parameters.values())

    def freeze(self) -> None:
        """Lock every parameter against gradient updates."""
        for parameter in self.parameters.values():
            parameter.freeze()

    def zero_grad(self) -> None:
        """Clear accumulated gradients."""
        for parameter in self.parameters.values():
            parameter.zero_grad()

    def _param(self, name: str) -> ad.Parameter:
        return self.parameters[name]

    def _bn_relu(self, name: str, x: ad.Tensor, mode: ad.Mode) -> ad.Tensor:
        out = ad.batchnorm(
            x,
            self._param(f"{name}.scale"),
            self._param(f"{name}.shift"),
            self.bn_states[name],
            mode,
        )
        return ad.relu(out)

    def _check_batch(self, batch: NDArray[np.floating]) -> None:
        expected = self.config.input_shape
        if batch.ndim != 5 or tuple(batch.shape[1:]) != expected:
            raise PatchGeometryError(
                f"stream {self.config.geometry.label} expects batches of "
                f"(n, {', '.join(map(str, expected))}), got {batch.shape}",
            )

    def logits(
        self,
        batch: NDArray[np.floating],
        mode: ad.Mode,
        rng: np.random.Generator | None = None,
        trace: dict[str, tuple[int, ...]] | None = None,
    ) -> ad.Tensor:
        """Pre-sigmoid outputs of shape (n,).

        Args:
            batch: Patches of shape (n, c, d, h, w).
            mode: ``"train"`` or ``"eval"``.
            rng: Dropout generator for train mode.
            trace: Optional dict receiving the shape at each plan point.

        Raises:
            PatchGeometryError: If the batch does not match the geometry.
        """
        self._check_batch(batch)
        config = self.config

        def _record(name: str, tensor: ad.Tensor) -> None:
            if trace is not None:
                trace[name] = tensor.shape

        x = ad.Tensor(np.asarray(batch, dtype=config.np_dtype))
        _record("input", x)
        x = ad.conv3d(x, self._param("stem.conv"))
        _record("stem", x)
        x = ad.maxpool3d(x, (1, 2, 2))
        _record("stem_pool", x)
        for block in range(int(config.blocks)):  # type: ignore[arg-type]
            for layer in range(config.layers_per_block):
                prefix = f"block{block}.layer{layer}"
                h = self._bn_relu(f"{prefix}.bn1", x, mode)
                h = ad.conv3d(h, self._param(f"{prefix}.conv1"))
                h = self._bn_relu(f"{prefix}.bn2", h, mode)
                h = ad.conv3d(h, self._param(f"{prefix}.conv3"))
                x = ad.concat_channels([x, h])
            _record(f"block{block}", x)
            if block == config.blocks - 1:  # type: ignore[operator]
                break
            prefix = f"transition{block}"
            x = self._bn_relu(f"{prefix}.bn", x, mode)
            x = ad.conv3d(x, self._param(f"{prefix}.conv"))
            x = ad.maxpool3d(x, _pool_window(x.shape[2]))
            _record(prefix, x)
        x = self._bn_relu("final.bn", x, mode)
        x = ad.avgpool_global(x)
        _record("pool", x)
        x = ad.dropout(x, config.dropout, mode, rng)
        x = ad.relu(
            ad.fully_connected(
                x,
                self._param("head.weight"),
                self._param("head.bias"),
            ),
        )
        _record("head", x)
        x = ad.fully_connected(
            x,
            self._param("output.weight"),
            self._param("output.bias"),
        )
        _record("output", x)
        return ad.reshape(x, (x.shape[0],))

    def forward(
        self,
        batch: NDArray[np.floating],
        mode: ad.Mode,
        rng: np.random.Generator | None = None,
    ) -> ad.Tensor:
        """Probabilities of shape (n,)."""
        return ad.sigmoid(self.logits(batch, mode, rng))

    def predict_proba(
        self,
        patches: NDArray[np.floating],
        batch_size: int = 64,
    ) -> NDArray[np.float64]:
        """Eval-mode probabilities without recording a graph."""
        out = np.empty(len(patches), dtype=np.float64)
        with ad.no_grad():
            for start in range(0, len(patches), batch_size):
                chunk = patches[start : start + batch_size]
                out[start : start + len(chunk)] = self.forward(
                    chunk,
                    "eval",
                ).data
        return out

    def state_arrays(self) -> Iterator[tuple[str, NDArray[np.floating]]]:
        """Every stored array by name: parameters, then running stats."""
        for name, parameter in self.parameters.items():
            yield name, parameter.data
        for name, state in self.bn_states.items():
            yield f"{name}.running_mean", state.running_mean
            yield f"{name}.running_var", state.running_var

    def digest(self) -> str:
        """SHA-256 over names and float32 contents of every stored array."""
        hasher = hashlib.sha256()
        for name, array in self.state_arrays():
            hasher.update(name.encode("utf-8"))
            hasher.update(np.ascontiguousarray(array, dtype=_LE_FLOAT32).tobytes())
        return hasher.hexdigest()

    def snapshot(self) -> dict[str, NDArray[np.floating]]:
        """Copies of every stored array, for restoring a best epoch."""
        return {name: array.copy() for name, array in self.state_arrays()}

    def restore(self, snapshot: Mapping[str, NDArray[np.floating]]) -> None:
        """Load arrays taken by :meth:`snapshot` back into the model."""
        for name, parameter in self.parameters.items():
            parameter.data = snapshot[name].copy()
        for name, state in self.bn_states.items():
            state.running_mean = snapshot[f"{name}.running_mean"].copy()
            state.running_var = snapshot[f"{name}.running_var"].copy()


def _he_normal(
    rng: np.random.Generator,
    shape: tuple[int, ...],
    fan_in: int,
    dtype: type[np.floating],
    gain: float = 1.0,
) -> NDArray[np.floating]:
    std = gain * math.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


def build_stream(config: StreamConfig, seed: int) -> StreamModel:
    """Build and He-normal initialize a stream.

    Raises:
        ConfigurationError: If the geometry collapses under pooling.
    """
    plan = channel_plan(config)
    rng = np.random.default_rng(seed)
    dtype = config.np_dtype
    model = StreamModel(config)

    def _conv(name: str, out_c: int, in_c: int, k: int) -> None:
        model.parameters[name] = ad.Parameter(
            name,
            _he_normal(rng, (out_c, in_c, k, k, k), in_c * k**3, dtype),
        )
        model.layers.append((name, "conv3d"))

    def _bn(name: str, channels: int) -> None:
        model.parameters[f"{name}.scale"] = ad.Parameter(
            f"{name}.scale",
            np.ones(channels, dtype=dtype),
        )
        model.parameters[f"{name}.shift"] = ad.Parameter(
            f"{name}.shift",
            np.zeros(channels, dtype=dtype),
        )
        model.bn_states[name] = ad.BatchNormState.create(channels, dtype)
        model.layers.append((name, "batchnorm"))

    def _fc(name: str, in_f: int, out_f: int, gain: float = 1.0) -> None:
        model.parameters[f"{name}.weight"] = ad.Parameter(
            f"{name}.weight",
            _he_normal(rng, (in_f, out_f), in_f, dtype, gain),
        )
        model.parameters[f"{name}.bias"] = ad.Parameter(
            f"{name}.bias",
            np.zeros(out_f, dtype=dtype),
        )
        model.layers.append((name, "fully_connected"))

    g = config.growth_rate
    b = int(config.bottleneck_width)  # type: ignore[arg-type]
    channels = int(config.initial_filters)  # type: ignore[arg-type]
    _conv("stem.conv", channels, config.in_channels, 3)
    for block in range(int(config.blocks)):  # type: ignore[arg-type]
        for layer in range(config.layers_per_block):
            prefix = f"block{block}.layer{layer}"
            _bn(f"{prefix}.bn1", channels)
            _conv(f"{prefix}.conv1", b, channels, 1)
            _bn(f"{prefix}.bn2", b)
            _conv(f"{prefix}.conv3", g, b, 3)
            channels += g
        if block == config.blocks - 1:  # type: ignore[operator]
            break
        compressed = math.floor(config.compression * channels)
        _bn(f"transition{block}.bn", channels)
        _conv(f"transition{block}.conv", compressed, channels, 1)
        channels = compressed
    _bn("final.bn", channels)
    _fc("head", channels, config.head_width)
    _fc("output", config.head_width, 1, OUTPUT_INIT_GAIN)

    if model.parameter_count != expected_parameter_count(config):
        raise ConfigurationError(
            f"built {model.parameter_count} parameters, expected "
            f"{expected_parameter_count(config)}",
        )
    logger.debug(
        "Built %s stream: %d parameters, final extent %s",
        config.geometry.label,
        model.parameter_count,
        plan[-4].spatial,
    )
    return model


def _checkpoint_paths(path: str | Path) -> tuple[Path, Path]:
    base = Path(path)
    if base.suffix == ".json":
        base = base.with_suffix("")
    return base.with_suffix(".json"), base.with_suffix(".f32")


def save_checkpoint(model: StreamModel, path: str | Path) -> Path:
    """Write a JSON manifest plus a little-endian float32 blob.

    Returns:
        The manifest path.
    """
    manifest_path, blob_path = _checkpoint_paths(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    tensors = []
    offset = 0
    with blob_path.open("wb") as blob:
        for name, array in model.state_arrays():
            blob.write(np.ascontiguousarray(array, dtype=_LE_FLOAT32).tobytes())
            tensors.append(
                {"name": name, "shape": list(array.shape), "offset": offset},
            )
            offset += int(array.size)
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": "stream",
        "dtype": FLOAT_DTYPE,
        "config": model.config.to_dict(),
        "metadata": model.metadata.to_dict(),
        "bn_steps": {n: s.steps for n, s in model.bn_states.items()},
        "digest": model.digest(),
        "blob": blob_path.name,
        "tensors": tensors,
    }
    manifest_path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return manifest_path


def read_checkpoint_manifest(path: str | Path) -> dict[str, Any]:
    """Parse a checkpoint manifest.

    Raises:
        CheckpointError: If it is missing, unreadable or of another version.
    """
    manifest_path, _ = _checkpoint_paths(path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint {manifest_path} does not exist") from None
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(
            f"cannot read checkpoint {manifest_path}: {exc}",
        ) from exc
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint {manifest_path} has format "
            f"{manifest.get('format_version')}, expected "
            f"{CHECKPOINT_FORMAT_VERSION}",
        )
    return manifest


def load_checkpoint(path: str | Path) -> StreamModel:
    """Rebuild a stream from :func:`save_checkpoint` output.

    Raises:
        CheckpointError: On missing files or a name/shape mismatch.
    """
    manifest_path, _ = _checkpoint_paths(path)
    manifest = read_checkpoint_manifest(manifest_path)
    try:
        config = StreamConfig.from_dict(manifest["config"])
    except (KeyError, TypeError, ConfigurationError) as exc:
        raise CheckpointError(
            f"checkpoint {manifest_path} has an invalid config: {exc}",
        ) from exc
    model = build_stream(config, seed=0)
    blob_path = manifest_path.with_name(manifest["blob"])
    try:
        blob = np.fromfile(blob_path, dtype=_LE_FLOAT32)
    except OSError as exc:
        raise CheckpointError(f"cannot read {blob_path}: {exc}") from exc

    expected = dict(model.state_arrays())
    stored = {entry["name"]: entry for entry in manifest["tensors"]}
    if set(stored) != set(expected):
        missing = sorted(set(expected) - set(stored))
        unexpected = sorted(set(stored) - set(expected))
        raise CheckpointError(
            f"checkpoint {manifest_path} tensors differ from the config: "
            f"missing {missing[:5]}, unexpected {unexpected[:5]}",
        )
    arrays: dict[str, NDArray[np.floating]] = {}
    for name, reference in expected.items():
        entry = stored[name]
        shape = tuple(entry["shape"])
        if shape != reference.shape:
            raise CheckpointError(
                f"checkpoint tensor {name} has shape {shape}, the config "
                f"needs {reference.shape}",
            )
        start = int(entry["offset"])
        values = blob[start : start + reference.size]
        if values.size != reference.size:
            raise CheckpointError(f"checkpoint blob {blob_path} is truncated")
        arrays[name] = values.reshape(shape).astype(config.np_dtype)
    model.restore(arrays)
    for name, steps in manifest.get("bn_steps", {}).items():
        model.bn_states[name].steps = int(steps)
    model.metadata = TrainingMetadata.from_dict(manifest.get("metadata", {}))
    return model


def with_geometry(config: StreamConfig, geometry: PatchGeometry) -> StreamConfig:
    """Same architecture on another geometry, block count re-derived."""
    return replace(config, geometry=geometry, blocks=default_blocks(geometry))
