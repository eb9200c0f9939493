"""
Run directories: one append-only folder per command invocation, holding the
resolved config, a log, every artifact and a manifest listing them all.
"""

import logging
import secrets
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, List, Optional, Union

import yaml

from phenldiff.checkpoints import checkpoint_hash, code_version, sha256_file
from phenldiff.config import Settings, settings
from phenldiff.middleware.exceptions import MissingArtifactError, StorageError
from phenldiff.schemas import ArtifactEntry, ExperimentConfig, RunManifest
from phenldiff.services.training import determinism_mode

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.yaml"
LOCK_NAME = ".lock"
LOG_NAME = "run.log"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class RunDirectory:
    """
    A run folder under the output root.

    The folder is created exclusively and locked by a marker file while the
    command runs. close() writes the manifest, hashing every file in the
    folder, and removes the lock.
    """

    def __init__(
        self,
        command: str,
        config: ExperimentConfig,
        out: Optional[Union[str, Path]] = None,
        env: Optional[Settings] = None,
    ):
        env = env or settings
        root = Path(out) if out is not None else Path(env.OUTPUT_ROOT)
        stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
        self.run_id = f"{command}-{stamp}-{secrets.token_hex(3)}"
        self.path = root / self.run_id
        try:
            root.mkdir(parents=True, exist_ok=True)
            self.path.mkdir(exist_ok=False)
            with open(self.path / LOCK_NAME, "x", encoding="utf-8") as f:
                f.write(f"{command}\n")
        except FileExistsError:
            raise StorageError(self.path, "run directory already exists")
        except OSError as e:
            raise StorageError(self.path, f"cannot create run directory: {e}")

        self.manifest = RunManifest(
            run_id=self.run_id,
            command=command,
            config=config.resolved(),
            config_hash=config.config_hash(),
            seeds={"seed": config.seed},
            code_version=code_version(),
            determinism=determinism_mode(env),
            started_at=utc_now(),
        )
        self._handler: Optional[logging.Handler] = logging.FileHandler(self.path / LOG_NAME, encoding="utf-8")
        self._handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logging.getLogger().addHandler(self._handler)
        self.closed = False
        logger.info(f"Started run {self.run_id}", extra={"run_id": self.run_id, "command": command})

    def __enter__(self) -> "RunDirectory":
        return self

    def __exit__(self, exc_type: Any, exc: Any, tb: Any) -> None:
        if not self.closed:
            self.close("failed" if exc_type is not None else "succeeded")

    def file(self, relative: Union[str, Path]) -> Path:
        """Path inside the run folder, parents created."""
        target = self.path / relative
        target.parent.mkdir(parents=True, exist_ok=True)
        return target

    def folder(self, relative: Union[str, Path]) -> Path:
        target = self.path / relative
        target.mkdir(parents=True, exist_ok=True)
        return target

    def warn(self, message: str) -> None:
        if message not in self.manifest.warnings:
            self.manifest.warnings.append(message)

    def extend_warnings(self, messages: List[str]) -> None:
        for message in messages:
            self.warn(message)

    def record_seed(self, name: str, seed: int) -> None:
        self.manifest.seeds[name] = seed

    def record_dataset(self, name: str, content_hash: str) -> None:
        self.manifest.dataset_hashes[name] = content_hash

    def record_checkpoint(self, name: str, path: Path) -> None:
        self.manifest.checkpoints[name] = f"{path}@{checkpoint_hash(path)}"

    def summarize(self, **values: Any) -> None:
        self.manifest.summary.update(values)

    def write_yaml(self, relative: Union[str, Path], document: Any) -> Path:
        target = self.file(relative)
        with open(target, "w", encoding="utf-8") as f:
            yaml.safe_dump(document, f, sort_keys=False)
        return target

    def _detach_log(self) -> None:
        if self._handler is not None:
            logging.getLogger().removeHandler(self._handler)
            self._handler.close()
            self._handler = None

    def close(self, status: str = "succeeded") -> RunManifest:
        """Hash every file, write the manifest and release the lock."""
        logger.info(
            f"Run {self.run_id} finished: {status}",
            extra={"run_id": self.run_id, "status": status, "warnings": len(self.manifest.warnings)},
        )
        self._detach_log()
        skip = {self.path / MANIFEST_NAME, self.path / LOCK_NAME}
        artifacts = [
            ArtifactEntry(path=file.relative_to(self.path).as_posix(), sha256=sha256_file(file))
            for file in sorted(self.path.rglob("*"))
            if file.is_file() and file not in skip
        ]
        self.manifest.artifacts = artifacts
        self.manifest.status = status  # type: ignore[assignment]
        self.manifest.finished_at = utc_now()
        with open(self.path / MANIFEST_NAME, "w", encoding="utf-8") as f:
            yaml.safe_dump(self.manifest.model_dump(mode="json"), f, sort_keys=False)
        (self.path / LOCK_NAME).unlink(missing_ok=True)
        self.closed = True
        return self.manifest


def read_run_manifest(path: Union[str, Path]) -> RunManifest:
    """Load a finished run's manifest; a locked run is still being written."""
    run = Path(path)
    if (run / LOCK_NAME).exists():
        raise StorageError(run, "run is locked by a running command")
    target = run / MANIFEST_NAME
    if not target.exists():
        raise MissingArtifactError(str(target), "phenldiff <command> --out <root>")
    with open(target, "r", encoding="utf-8") as f:
        return RunManifest.model_validate(yaml.safe_load(f))


def verify_run(path: Union[str, Path]) -> List[str]:
    """Artifacts whose content no longer matches the manifest."""
    run = Path(path)
    manifest = read_run_manifest(run)
    changed = []
    for entry in manifest.artifacts:
        file = run / entry.path
        if not file.exists() or sha256_file(file) != entry.sha256:
            changed.append(entry.path)
    return changed
