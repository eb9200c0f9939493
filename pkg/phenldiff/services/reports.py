"""
Figures and tables written into run directories: image grids, similarity
histogram panels, measurement boxplots, loss curves and translation records.

Everything is rendered with the Agg backend and without timestamps in file
metadata, so the same inputs give byte-identical files.
"""

import logging
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
import torch  # noqa: E402
import yaml  # noqa: E402
from PIL import Image  # noqa: E402

from phenldiff.middleware.exceptions import InsufficientDataError, StorageError  # noqa: E402
from phenldiff.services.datasets import load_image, save_png, to_uint8  # noqa: E402
from phenldiff.services.diffusion import ClassCondition  # noqa: E402
from phenldiff.services.evaluation import SimilarityReport  # noqa: E402
from phenldiff.services.translation import TranslationRecord  # noqa: E402

logger = logging.getLogger(__name__)

PNG_METADATA = {"Software": None}
GENERALIZATION_COLOR = "tab:blue"
MEMORIZATION_COLOR = "tab:orange"


def _save_figure(fig: plt.Figure, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150, bbox_inches="tight", metadata=PNG_METADATA)
    plt.close(fig)
    return path


def tile_images(images: torch.Tensor, ncol: int, pad: int = 2) -> np.ndarray:
    """(N, C, H, W) in [-1, 1] -> one uint8 (rows*H, ncol*W, C) mosaic with white gutters."""
    if images.shape[0] == 0:
        raise InsufficientDataError(1, 0, "images for a grid")
    n, c, h, w = images.shape
    ncol = max(1, min(ncol, n))
    nrow = (n + ncol - 1) // ncol
    canvas = np.full((nrow * (h + pad) + pad, ncol * (w + pad) + pad, c), 255, dtype=np.uint8)
    for i in range(n):
        r, col = divmod(i, ncol)
        top, left = pad + r * (h + pad), pad + col * (w + pad)
        canvas[top : top + h, left : left + w] = to_uint8(images[i])
    return canvas


def save_grid(images: torch.Tensor, path: Path, ncol: int = 8) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(tile_images(images, ncol)).save(path, format="PNG")
    return path


def save_translation_grid(records: Sequence[TranslationRecord], path: Path, limit: int = 8) -> Path:
    """One row per record: source | translated | back-translated."""
    shown = list(records)[:limit]
    if not shown:
        raise InsufficientDataError(1, 0, "translation records")
    columns = ["source", "translated", "back-translated"]
    fig, axes = plt.subplots(len(shown), 3, figsize=(6, 2 * len(shown)), squeeze=False)
    for row, record in enumerate(shown):
        panels = [record.source_image, record.translated, record.back_translated]
        for col, image in enumerate(panels):
            ax = axes[row][col]
            ax.axis("off")
            if image is not None:
                ax.imshow(to_uint8(image))
            if row == 0:
                ax.set_title(columns[col], fontsize=9)
        axes[row][0].text(-2, 8, record.image_id, fontsize=6, ha="right", va="top")
    fig.suptitle(f"{shown[0].method}: {shown[0].source} -> {shown[0].target}", fontsize=10)
    return _save_figure(fig, path)


def save_sample_grid(
    generated: Mapping[str, torch.Tensor], real: Mapping[str, torch.Tensor], path: Path, per_row: int = 8
) -> Path:
    """Real and generated samples side by side, two rows per condition."""
    names = sorted(generated)
    fig, axes = plt.subplots(2 * len(names), 1, figsize=(per_row * 1.2, 2.6 * len(names)), squeeze=False)
    for i, name in enumerate(names):
        for offset, (label, images) in enumerate((("real", real[name]), ("generated", generated[name]))):
            ax = axes[2 * i + offset][0]
            ax.imshow(tile_images(images[:per_row], per_row))
            ax.set_title(f"{name} ({label})", fontsize=9)
            ax.axis("off")
    return _save_figure(fig, path)


def plot_similarity_grid(reports: Sequence[SimilarityReport], path: Path) -> Path:
    """Rows are subset sizes, columns strategies; each panel overlays both similarity histograms."""
    if not reports:
        raise InsufficientDataError(1, 0, "similarity reports")
    sizes = sorted({r.subset_size for r in reports})
    strategies: List[str] = []
    for r in reports:
        if r.strategy not in strategies:
            strategies.append(r.strategy)
    lookup = {(r.subset_size, r.strategy): r for r in reports}
    fig, axes = plt.subplots(
        len(sizes), len(strategies), figsize=(3 * len(strategies), 2.4 * len(sizes)), squeeze=False, sharex=True
    )
    for i, size in enumerate(sizes):
        for j, strategy in enumerate(strategies):
            ax = axes[i][j]
            report = lookup.get((size, strategy))
            if report is None:
                ax.axis("off")
                continue
            bins = np.linspace(-1.0, 1.0, report.bins + 1)
            ax.hist(report.generalization, bins=bins, alpha=0.6, color=GENERALIZATION_COLOR, label="same seed, two models")
            ax.hist(report.memorization, bins=bins, alpha=0.6, color=MEMORIZATION_COLOR, label="nearest training image")
            if i == 0:
                ax.set_title(strategy, fontsize=10)
            if j == 0:
                ax.set_ylabel(f"n = {size}")
    axes[0][0].legend(fontsize=6, loc="upper left")
    for ax in axes[-1]:
        ax.set_xlabel("cosine similarity")
    return _save_figure(fig, path)


def plot_boxplot(
    groups: Mapping[str, Sequence[Optional[float]]], path: Path, title: str = "", ylabel: str = ""
) -> Path:
    """One box per group; undefined values are left out."""
    names = list(groups)
    values = [[float(v) for v in groups[name] if v is not None and np.isfinite(v)] for name in names]
    fig, ax = plt.subplots(figsize=(1.6 * len(names) + 1.5, 3.5))
    ax.boxplot(values, showfliers=True)
    ax.set_xticks(range(1, len(names) + 1))
    ax.set_xticklabels(names, rotation=20, fontsize=8)
    ax.set_title(title, fontsize=10)
    ax.set_ylabel(ylabel)
    return _save_figure(fig, path)


def plot_losses(curves: Mapping[str, Sequence[float]], path: Path, title: str = "training loss") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3))
    for name, losses in curves.items():
        ax.plot(np.arange(len(losses)), losses, label=name, linewidth=0.8)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_title(title, fontsize=10)
    if len(curves) > 1:
        ax.legend(fontsize=7)
    return _save_figure(fig, path)


def write_table(frame: pd.DataFrame, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.6g")
    return path


def read_table(path: Path) -> pd.DataFrame:
    if not path.exists():
        raise StorageError(path, "table not found")
    return pd.read_csv(path)


# Translation records
def _record_dir(root: Path, record: TranslationRecord) -> Path:
    return root / record.method / f"g{record.guidance_scale:g}" / record.image_id.replace("/", "_")


def save_records(records: Sequence[TranslationRecord], root: Path) -> List[Path]:
    """Per record: record.yaml, source/translated/back PNGs and the latent code as .npy."""
    written = []
    for record in records:
        folder = _record_dir(root, record)
        folder.mkdir(parents=True, exist_ok=True)
        save_png(record.source_image, folder / "source.png")
        save_png(record.translated, folder / "translated.png")
        if record.back_translated is not None:
            save_png(record.back_translated, folder / "back.png")
        np.save(folder / "latent.npy", record.latent_code.numpy().astype("<f4"))
        with open(folder / "record.yaml", "w", encoding="utf-8") as f:
            yaml.safe_dump(record.document(), f, sort_keys=False)
        written.append(folder)
    return written


def load_records(root: Path) -> Dict[str, List[TranslationRecord]]:
    """Records saved by save_records, grouped by method and guidance scale, images as stored on disk."""
    root = Path(root)
    if not root.is_dir():
        raise StorageError(root, "translation records not found")
    grouped: Dict[str, List[TranslationRecord]] = {}
    for document_path in sorted(root.rglob("record.yaml")):
        folder = document_path.parent
        with open(document_path, "r", encoding="utf-8") as f:
            doc = yaml.safe_load(f)
        back = folder / "back.png"
        record = TranslationRecord(
            image_id=doc["image_id"],
            source_image=load_image(folder / "source.png"),
            source=ClassCondition(int(doc["source"])),
            target=ClassCondition(int(doc["target"])),
            latent_code=torch.from_numpy(np.load(folder / "latent.npy")),
            translated=load_image(folder / "translated.png"),
            steps=int(doc["steps"]),
            guidance_scale=float(doc["guidance_scale"]),
            seed=int(doc["seed"]),
            method=doc["method"],
            back_translated=load_image(back) if back.exists() else None,
            cycle_loss=doc["cycle_loss"],
        )
        grouped.setdefault(method_key(record.method, record.guidance_scale), []).append(record)
    return grouped


def method_key(method: str, guidance_scale: float) -> str:
    return f"{method}@{guidance_scale:g}"
