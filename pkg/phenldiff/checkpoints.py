"""
Checkpoint persistence.

A checkpoint is a directory holding manifest.yaml plus one raw little-endian
blob per named tensor under tensors/. Reloading is bit-exact and every blob
is verified against the SHA-256 recorded in the manifest.
"""

import hashlib
import logging
import subprocess
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import yaml

from phenldiff.middleware.exceptions import MissingArtifactError, StorageError
from phenldiff.models import ClassConditionalUNet, Codec
from phenldiff.schemas import CheckpointManifest, CodecSpec, DenoiserSpec, ScheduleConfig, TensorEntry

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.yaml"
TENSOR_DIR = "tensors"

_DTYPES: Dict[torch.dtype, str] = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
}


def code_version() -> str:
    """git describe of the working tree, or 'unknown' outside a checkout."""
    try:
        result = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=5,
            cwd=Path(__file__).resolve().parent,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return result.stdout.strip() or "unknown"


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def save_checkpoint(
    path: Path,
    kind: str,
    tensors: Dict[str, torch.Tensor],
    spec: Optional[Dict[str, Any]] = None,
    training_config: Optional[Dict[str, Any]] = None,
    seed: Optional[int] = None,
    metadata: Optional[Dict[str, Any]] = None,
) -> CheckpointManifest:
    """
    Write tensors and their manifest.

    Args:
        path: Checkpoint directory (created; must not already hold a manifest)
        kind: codec | denoiser | adapter | extractor
        tensors: Named tensors to store

    Returns:
        The manifest that was written
    """
    path = Path(path)
    if (path / MANIFEST_NAME).exists():
        raise StorageError(path, "checkpoint already exists; checkpoints are never overwritten")
    tensor_dir = path / TENSOR_DIR
    tensor_dir.mkdir(parents=True, exist_ok=True)

    entries = []
    for name in sorted(tensors):
        tensor = tensors[name].detach().cpu().contiguous()
        if tensor.dtype not in _DTYPES:
            raise StorageError(path, f"unsupported dtype {tensor.dtype} for '{name}'")
        array = tensor.numpy().astype(_DTYPES[tensor.dtype], copy=False)
        data = array.tobytes(order="C")
        file_name = f"{name}.bin"
        (tensor_dir / file_name).write_bytes(data)
        entries.append(
            TensorEntry(
                name=name,
                file=f"{TENSOR_DIR}/{file_name}",
                shape=list(tensor.shape),
                dtype=str(tensor.dtype).replace("torch.", ""),
                sha256=sha256_bytes(data),
            )
        )

    manifest = CheckpointManifest(
        kind=kind,  # type: ignore[arg-type]
        spec=spec or {},
        tensors=entries,
        training_config=training_config or {},
        seed=seed,
        code_version=code_version(),
        metadata=metadata or {},
    )
    with open(path / MANIFEST_NAME, "w", encoding="utf-8") as f:
        yaml.safe_dump(manifest.model_dump(mode="json"), f, sort_keys=False)
    logger.info(f"Saved {kind} checkpoint with {len(entries)} tensors", extra={"path": str(path)})
    return manifest


def read_manifest(path: Path, producing_command: str = "phenldiff pretrain") -> CheckpointManifest:
    manifest_path = Path(path) / MANIFEST_NAME
    if not manifest_path.exists():
        raise MissingArtifactError(f"checkpoint at {path}", producing_command)
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            document = yaml.safe_load(f)
    except (OSError, yaml.YAMLError) as e:
        raise StorageError(manifest_path, f"unreadable manifest: {e}")
    return CheckpointManifest.model_validate(document)


def load_checkpoint(
    path: Path, producing_command: str = "phenldiff pretrain"
) -> Tuple[CheckpointManifest, Dict[str, torch.Tensor]]:
    """Read a checkpoint back, verifying every blob hash."""
    path = Path(path)
    manifest = read_manifest(path, producing_command)
    dtype_lookup = {str(k).replace("torch.", ""): v for k, v in _DTYPES.items()}
    tensors: Dict[str, torch.Tensor] = {}
    for entry in manifest.tensors:
        blob = path / entry.file
        try:
            data = blob.read_bytes()
        except OSError as e:
            raise StorageError(blob, f"cannot read tensor blob: {e}")
        if sha256_bytes(data) != entry.sha256:
            raise StorageError(blob, "tensor blob does not match its recorded hash")
        array = np.frombuffer(data, dtype=dtype_lookup[entry.dtype]).reshape(entry.shape)
        tensors[entry.name] = torch.from_numpy(array.astype(array.dtype.newbyteorder("="), copy=True))
    return manifest, tensors


def checkpoint_hash(path: Path) -> str:
    """Content hash of a checkpoint derived from its tensor hashes."""
    manifest = read_manifest(path)
    digest = hashlib.sha256(manifest.kind.encode("utf-8"))
    for entry in manifest.tensors:
        digest.update(f"{entry.name}:{entry.sha256}\n".encode("utf-8"))
    return digest.hexdigest()


def save_module(
    path: Path,
    kind: str,
    module: nn.Module,
    spec: Optional[Dict[str, Any]] = None,
    training_config: Optional[Dict[str, Any]] = None,
    seed: Optional[int] = None,
    metadata: Optional[Dict[str, Any]] = None,
) -> CheckpointManifest:
    return save_checkpoint(
        path, kind, dict(module.state_dict()), spec, training_config, seed, metadata
    )


def load_module_state(module: nn.Module, tensors: Dict[str, torch.Tensor]) -> nn.Module:
    expected = set(module.state_dict())
    if expected != set(tensors):
        missing = sorted(expected - set(tensors))
        unexpected = sorted(set(tensors) - expected)
        raise StorageError(
            "checkpoint",
            f"tensor names do not match the model (missing={missing[:5]}, unexpected={unexpected[:5]})",
        )
    module.load_state_dict(tensors, strict=True)
    return module


# Model-level helpers
def save_codec(path: Path, codec: Codec, seed: Optional[int] = None, **metadata: Any) -> CheckpointManifest:
    return save_module(
        path, "codec", codec,
        spec={"codec": codec.spec.model_dump(mode="json")},
        seed=seed,
        metadata=metadata,
    )


def load_codec(path: Path) -> Codec:
    manifest, tensors = load_checkpoint(path, producing_command="phenldiff train-codec")
    if manifest.kind != "codec":
        raise StorageError(path, f"expected a codec checkpoint, found '{manifest.kind}'")
    codec = Codec(CodecSpec.model_validate(manifest.spec["codec"]))
    load_module_state(codec, tensors)
    return codec.eval()


def denoiser_spec_document(
    denoiser: ClassConditionalUNet, schedule: Optional[ScheduleConfig] = None
) -> Dict[str, Any]:
    return {
        "denoiser": denoiser.spec.model_dump(mode="json"),
        "latent_shape": list(denoiser.latent_shape),
        "schedule": (schedule or ScheduleConfig()).model_dump(mode="json"),
    }


def save_denoiser(
    path: Path,
    denoiser: ClassConditionalUNet,
    schedule: Optional[ScheduleConfig] = None,
    training_config: Optional[Dict[str, Any]] = None,
    seed: Optional[int] = None,
    **metadata: Any,
) -> CheckpointManifest:
    return save_module(
        path, "denoiser", denoiser,
        spec=denoiser_spec_document(denoiser, schedule),
        training_config=training_config,
        seed=seed,
        metadata=metadata,
    )


def load_denoiser(path: Path) -> Tuple[ClassConditionalUNet, ScheduleConfig, CheckpointManifest]:
    manifest, tensors = load_checkpoint(path, producing_command="phenldiff pretrain")
    if manifest.kind != "denoiser":
        raise StorageError(path, f"expected a denoiser checkpoint, found '{manifest.kind}'")
    spec = DenoiserSpec.model_validate(manifest.spec["denoiser"])
    shape = tuple(manifest.spec["latent_shape"])
    denoiser = ClassConditionalUNet(spec, shape)  # type: ignore[arg-type]
    load_module_state(denoiser, tensors)
    schedule = ScheduleConfig.model_validate(manifest.spec.get("schedule", {}))
    return denoiser.eval(), schedule, manifest
