from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from phenldiff.middleware.exceptions import DataError, InsufficientDataError, ShapeError, StorageError
from phenldiff.services.datasets import ImageDataset, ingest_dataset, to_pixels, to_uint8


def _write(path: Path, value: int, size: int = 8) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.full((size, size, 3), value, dtype=np.uint8)).save(path)


def test_pixel_conversions() -> None:
    array = np.array([[[0, 255, 51]]], dtype=np.uint8)
    pixels = to_pixels(array)
    assert pixels.shape == (3, 1, 1)
    assert pixels.flatten().tolist() == pytest.approx([-1.0, 1.0, 51 / 127.5 - 1.0])
    assert np.array_equal(to_uint8(pixels), array)
    assert to_uint8(torch.full((3, 1, 1), 5.0)).max() == 255


def test_ingest_folder_per_condition(tmp_path: Path) -> None:
    for i in range(2):
        _write(tmp_path / "treated" / f"{i}.png", 200)
        _write(tmp_path / "control" / f"{i}.png", 10)
    (tmp_path / "notes.txt").write_text("ignored")
    dataset = ingest_dataset(tmp_path)
    assert dataset.conditions == ["control", "treated"]
    assert dataset.ids == ["control/0", "control/1", "treated/0", "treated/1"]
    assert dataset.labels.tolist() == [0, 0, 1, 1]
    assert dataset.image_shape == (3, 8, 8)
    assert dataset.content_hash == ingest_dataset(tmp_path).content_hash


def test_content_hash_tracks_files(tmp_path: Path) -> None:
    for name in ("a", "b"):
        _write(tmp_path / name / "0.png", 0)
    before = ingest_dataset(tmp_path).content_hash
    _write(tmp_path / "a" / "0.png", 1)
    assert ingest_dataset(tmp_path).content_hash != before


def test_ingest_errors(tmp_path: Path) -> None:
    with pytest.raises(StorageError):
        ingest_dataset(tmp_path / "missing")

    _write(tmp_path / "only" / "0.png", 0)
    with pytest.raises(InsufficientDataError):
        ingest_dataset(tmp_path)

    _write(tmp_path / "other" / "0.png", 0, size=16)
    with pytest.raises(DataError):
        ingest_dataset(tmp_path)


def test_unreadable_image(tmp_path: Path) -> None:
    _write(tmp_path / "a" / "0.png", 0)
    (tmp_path / "b").mkdir()
    (tmp_path / "b" / "0.png").write_bytes(b"not a png")
    with pytest.raises(DataError):
        ingest_dataset(tmp_path)


def test_restrict_relabels(tiny_dataset: ImageDataset) -> None:
    only_b = tiny_dataset.restrict(["b"])
    assert only_b.conditions == ["b"]
    assert only_b.labels.tolist() == [0, 0, 0]
    assert only_b.ids == ["b/0003", "b/0004", "b/0005"]
    with pytest.raises(DataError):
        tiny_dataset.restrict(["c"])
    with pytest.raises(DataError):
        tiny_dataset.of_condition("c")


def test_dataset_validates_lengths(images16: torch.Tensor) -> None:
    with pytest.raises(DataError):
        ImageDataset(images=images16, labels=torch.zeros(5, dtype=torch.long), ids=["x"] * 6, conditions=["x"])
    with pytest.raises(ShapeError):
        ImageDataset(images=images16[0], labels=torch.zeros(3, dtype=torch.long), ids=["x"] * 3, conditions=["x"])
