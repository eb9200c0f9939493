"""
Image datasets: the folder-per-condition layout shared by synthetic output and
user-supplied data, plus the in-memory handle every training stage consumes.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import yaml
from PIL import Image, UnidentifiedImageError

from phenldiff.middleware.exceptions import DataError, InsufficientDataError, ShapeError, StorageError
from phenldiff.schemas import DatasetManifest, PhenotypeParams

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".tif", ".tiff")
MANIFEST_NAME = "manifest.yaml"


def to_pixels(image: np.ndarray) -> torch.Tensor:
    """uint8 (H, W, C) array -> float32 (C, H, W) tensor in [-1, 1]."""
    array = np.asarray(image, dtype=np.float32)
    if array.ndim == 2:
        array = array[:, :, None]
    return torch.from_numpy(array / 127.5 - 1.0).permute(2, 0, 1).contiguous()


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """float (C, H, W) tensor in [-1, 1] -> uint8 (H, W, C) array."""
    array = ((image.detach().cpu().clamp(-1.0, 1.0) + 1.0) * 127.5).round()
    return array.permute(1, 2, 0).numpy().astype(np.uint8)


def save_png(image: torch.Tensor, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path, format="PNG")


def load_image(path: Path) -> torch.Tensor:
    try:
        with Image.open(path) as img:
            array = np.array(img.convert("RGB"))
    except (OSError, UnidentifiedImageError) as e:
        raise DataError(f"unreadable image file {path}: {e}")
    return to_pixels(array)


@dataclass
class ImageDataset:
    """Images (N, C, H, W) in [-1, 1] with condition labels in sorted-name order."""

    images: torch.Tensor
    labels: torch.Tensor
    ids: List[str]
    conditions: List[str]
    content_hash: str = ""
    params: List[Optional[PhenotypeParams]] = field(default_factory=list)
    name: str = "dataset"

    def __post_init__(self) -> None:
        if self.images.dim() != 4:
            raise ShapeError(("N", "C", "H", "W"), tuple(self.images.shape), "image batch")
        if len(self.ids) != self.images.shape[0] or self.labels.shape[0] != self.images.shape[0]:
            raise DataError("images, labels and ids disagree in length")
        if not self.params:
            self.params = [None] * len(self.ids)
        if not self.content_hash:
            self.content_hash = tensor_hash(self.images)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def counts(self) -> Dict[str, int]:
        return {name: int((self.labels == i).sum()) for i, name in enumerate(self.conditions)}

    def condition_of(self, index: int) -> str:
        return self.conditions[int(self.labels[index])]

    def subset(self, indices: Sequence[int], name: Optional[str] = None) -> "ImageDataset":
        idx = torch.as_tensor(list(indices), dtype=torch.long)
        return ImageDataset(
            images=self.images[idx],
            labels=self.labels[idx],
            ids=[self.ids[i] for i in indices],
            conditions=list(self.conditions),
            params=[self.params[i] for i in indices],
            name=name or self.name,
        )

    def of_condition(self, condition: str) -> "ImageDataset":
        if condition not in self.conditions:
            raise DataError(f"condition '{condition}' not in dataset ({', '.join(self.conditions)})")
        label = self.conditions.index(condition)
        indices = [i for i in range(len(self)) if int(self.labels[i]) == label]
        return self.subset(indices, name=f"{self.name}/{condition}")

    def restrict(self, conditions: Sequence[str]) -> "ImageDataset":
        """Keep only the named conditions, relabelled in sorted order."""
        keep = sorted(conditions)
        for name in keep:
            if name not in self.conditions:
                raise DataError(f"condition '{name}' not in dataset ({', '.join(self.conditions)})")
        indices = [i for i in range(len(self)) if self.condition_of(i) in keep]
        labels = torch.tensor([keep.index(self.condition_of(i)) for i in indices], dtype=torch.long)
        return ImageDataset(
            images=self.images[torch.as_tensor(indices, dtype=torch.long)],
            labels=labels,
            ids=[self.ids[i] for i in indices],
            conditions=keep,
            params=[self.params[i] for i in indices],
            name=self.name,
        )


def tensor_hash(images: torch.Tensor) -> str:
    array = images.detach().cpu().contiguous().numpy().astype("<f4", copy=False)
    return hashlib.sha256(array.tobytes()).hexdigest()


def _read_manifest(path: Path) -> Optional[DatasetManifest]:
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.exists():
        return None
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            return DatasetManifest.model_validate(yaml.safe_load(f))
    except (OSError, yaml.YAMLError) as e:
        raise StorageError(manifest_path, f"unreadable dataset manifest: {e}")


def ingest_dataset(path: Path, min_conditions: int = 2) -> ImageDataset:
    """
    Load and validate a folder-per-condition dataset.

    Args:
        path: Root folder holding one sub-folder per condition
        min_conditions: Fewest conditions accepted

    Returns:
        ImageDataset with a content hash over every file

    Raises:
        StorageError: If the folder does not exist
        DataError: On unreadable files or mixed geometries
        InsufficientDataError: If fewer than min_conditions conditions are present
    """
    root = Path(path)
    if not root.is_dir():
        raise StorageError(root, "dataset folder does not exist")

    folders = sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))
    files_by_condition = {
        folder.name: sorted(f for f in folder.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES)
        for folder in folders
    }
    conditions = [name for name, files in files_by_condition.items() if files]
    if len(conditions) < min_conditions:
        raise InsufficientDataError(min_conditions, len(conditions), "condition folders with images")

    manifest = _read_manifest(root)
    params_by_path: Dict[str, Optional[PhenotypeParams]] = {}
    if manifest is not None:
        params_by_path = {entry.path: entry.params for entry in manifest.entries}

    digest = hashlib.sha256()
    images, labels, ids, params = [], [], [], []
    geometry = None
    for label, condition in enumerate(conditions):
        for file in files_by_condition[condition]:
            data = file.read_bytes()
            rel = f"{condition}/{file.name}"
            digest.update(rel.encode("utf-8"))
            digest.update(hashlib.sha256(data).digest())
            image = load_image(file)
            if geometry is None:
                geometry = tuple(image.shape)
            elif tuple(image.shape) != geometry:
                raise DataError(f"mixed image geometries: {rel} is {tuple(image.shape)}, expected {geometry}")
            images.append(image)
            labels.append(label)
            ids.append(f"{condition}/{file.stem}")
            params.append(params_by_path.get(rel))

    dataset = ImageDataset(
        images=torch.stack(images),
        labels=torch.tensor(labels, dtype=torch.long),
        ids=ids,
        conditions=conditions,
        content_hash=digest.hexdigest(),
        params=params,
        name=manifest.name if manifest is not None else root.name,
    )
    logger.info(
        f"Ingested {len(dataset)} images across {len(conditions)} conditions from {root}",
        extra={"counts": dataset.counts(), "content_hash": dataset.content_hash},
    )
    return dataset
