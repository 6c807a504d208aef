"""Stage output directories, content digests and stage manifests."""

from __future__ import annotations

import hashlib
import json
import shutil
import tempfile
from pathlib import Path
from typing import TYPE_CHECKING, Any

from lesionstack.constants import TEMP_DIR_SUFFIX
from lesionstack.exceptions import (
    ManifestError,
    MissingArtifactError,
    StaleArtifactError,
)

if TYPE_CHECKING:
    from collections.abc import Iterable, Mapping

STAGE_MANIFEST = "stage.json"
_CHUNK = 1 << 20


def file_digest(path: str | Path) -> str:
    """SHA-256 of a file's bytes."""
    hasher = hashlib.sha256()
    with Path(path).open("rb") as handle:
        while chunk := handle.read(_CHUNK):
            hasher.update(chunk)
    return hasher.hexdigest()


def tree_digests(
    root: str | Path,
    exclude: Iterable[str] = (STAGE_MANIFEST,),
) -> dict[str, str]:
    """Relative path -> digest for every file below a directory."""
    base = Path(root)
    skipped = set(exclude)
    return {
        path.relative_to(base).as_posix(): file_digest(path)
        for path in sorted(base.rglob("*"))
        if path.is_file() and path.name not in skipped
    }


def combined_digest(digests: Mapping[str, str]) -> str:
    """One digest over a name -> digest mapping."""
    encoded = json.dumps(dict(sorted(digests.items()))).encode("utf-8")
    return hashlib.sha256(encoded).hexdigest()


class StageWorkspace:
    """Builds a stage's outputs in a temporary sibling directory.

    On a clean exit the temporary directory replaces the stage directory;
    on an exception it is removed and the previous outputs stay untouched.
    With ``keep_existing`` the previous outputs are copied in first so
    resumable stages can reuse them.
    """

    def __init__(
        self,
        stage_dir: str | Path,
        *,
        keep_existing: bool = False,
    ) -> None:
        """Initialize with the final stage directory.

        Args:
            stage_dir: Directory the stage outputs end up in.
            keep_existing: Seed the workspace with the current outputs.
        """
        self.stage_dir = Path(stage_dir)
        self.keep_existing = keep_existing
        self._temp_dir_path: Path | None = None

    def __enter__(self) -> Path:
        """Create the temporary directory and return its path."""
        self.stage_dir.parent.mkdir(parents=True, exist_ok=True)
        self._temp_dir_path = Path(
            tempfile.mkdtemp(
                prefix=f".{self.stage_dir.name}",
                suffix=TEMP_DIR_SUFFIX,
                dir=self.stage_dir.parent,
            ),
        )
        if self.keep_existing and self.stage_dir.is_dir():
            shutil.copytree(
                self.stage_dir,
                self._temp_dir_path,
                dirs_exist_ok=True,
            )
        return self._temp_dir_path

    def __exit__(self, exc_type, exc_val, exc_tb) -> None:  # type: ignore[no-untyped-def]
        """Publish the outputs on success, discard them otherwise."""
        if exc_type is None:
            self.commit()
        else:
            self.cleanup()

    def commit(self) -> None:
        """Swap the temporary directory into place."""
        if self._temp_dir_path is None:
            return
        backup = None
        if self.stage_dir.exists():
            backup = self.stage_dir.with_name(
                f".{self.stage_dir.name}.old{TEMP_DIR_SUFFIX}",
            )
            if backup.exists():
                shutil.rmtree(backup)
            self.stage_dir.rename(backup)
        self._temp_dir_path.rename(self.stage_dir)
        self._temp_dir_path = None
        if backup is not None:
            shutil.rmtree(backup, ignore_errors=True)

    def cleanup(self) -> None:
        """Remove the temporary directory if it exists."""
        if self._temp_dir_path and self._temp_dir_path.exists():
            shutil.rmtree(self._temp_dir_path, ignore_errors=True)
        self._temp_dir_path = None


def write_stage_manifest(
    stage_dir: str | Path,
    *,
    stage: str,
    inputs: Mapping[str, str],
    config: Mapping[str, Any],
    seed: int,
) -> Path:
    """Record input digests, config, seed and output digests of a stage."""
    directory = Path(stage_dir)
    manifest = {
        "stage": stage,
        "seed": seed,
        "inputs": dict(sorted(inputs.items())),
        "config": config,
        "artifacts": tree_digests(directory),
    }
    path = directory / STAGE_MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return path


def read_stage_manifest(stage_dir: str | Path, stage: str) -> dict[str, Any]:
    """Load a stage manifest.

    Raises:
        MissingArtifactError: If the stage never completed.
        ManifestError: If the manifest is unreadable.
    """
    path = Path(stage_dir) / STAGE_MANIFEST
    if not path.exists():
        raise MissingArtifactError(f"no outputs of stage {stage!r} in {path.parent}", stage)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read stage manifest {path}: {exc}") from exc


def stage_digest(stage_dir: str | Path, stage: str) -> str:
    """Digest of a completed stage's outputs, verified against disk.

    Raises:
        MissingArtifactError: If the stage never completed.
        StaleArtifactError: If its outputs changed after it completed.
    """
    manifest = read_stage_manifest(stage_dir, stage)
    recorded = manifest["artifacts"]
    if tree_digests(stage_dir) != recorded:
        raise StaleArtifactError(
            f"outputs of stage {stage!r} in {stage_dir} were modified",
            stage,
        )
    return combined_digest(recorded)


def check_upstream(
    stage_dir: str | Path,
    stage: str,
    upstream: Mapping[str, str],
) -> None:
    """Verify a stage consumed the current outputs of its upstream stages.

    Args:
        stage_dir: Directory of the stage being checked.
        stage: Its name, for messages.
        upstream: Upstream stage name -> current output digest.

    Raises:
        StaleArtifactError: If an upstream stage changed since.
    """
    recorded = read_stage_manifest(stage_dir, stage)["inputs"]
    for name, digest in upstream.items():
        if recorded.get(name) != digest:
            raise StaleArtifactError(
                f"stage {stage!r} used older outputs of {name!r}",
                stage,
            )
