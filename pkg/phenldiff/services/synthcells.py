"""
Procedural microscopy-like images with known phenotype parameters.

Channel roles map onto RGB indices per condition: nucleus, marker,
organelle, cytoskeleton, neurite and second_marker. Every image is rendered
from a PhenotypeParams record and its own render seed, so datasets are pure
functions of (conditions, n, seed).
"""

import hashlib
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import torch
import yaml
from skimage import draw, filters
from tqdm import tqdm

from phenldiff.middleware.exceptions import ConfigError, DataError, StorageError
from phenldiff.schemas import ConditionSpec, DatasetEntry, DatasetManifest, MeasurementName, PhenotypeParams
from phenldiff.services.datasets import MANIFEST_NAME, ImageDataset, save_png, to_pixels, to_uint8
from phenldiff.services.training import derive_seed

logger = logging.getLogger(__name__)

CYTOPLASM_FACTOR = 1.8
MAX_NEURITES = 6
PLACEMENT_ATTEMPTS = 2000
# condition ranges are in pixels of a 64 px canvas; other sizes scale geometry
REFERENCE_SIZE = 64

Direction = Literal["increase", "decrease"]


@dataclass(frozen=True)
class RenderSettings:
    background: float = 0.05
    noise_sigma: float = 0.03
    blur_sigma: float = 0.6


@dataclass(frozen=True)
class DatasetPreset:
    name: str
    conditions: Tuple[ConditionSpec, ...]
    primary_measurement: MeasurementName
    measurement_channel: int
    expected_direction: Direction
    source: str = "untreated"
    target: str = "treated"

    def condition(self, name: str) -> ConditionSpec:
        for spec in self.conditions:
            if spec.name == name:
                return spec
        raise ConfigError("condition", f"preset '{self.name}' has no condition '{name}'")


def _preset(
    name: str,
    untreated: Dict[str, object],
    treated: Dict[str, object],
    channels: Dict[str, int],
    measurement: MeasurementName,
    channel: int,
    direction: Direction,
) -> DatasetPreset:
    return DatasetPreset(
        name=name,
        conditions=(
            ConditionSpec(name="untreated", channels=channels, **untreated),  # type: ignore[arg-type]
            ConditionSpec(name="treated", channels=channels, **treated),  # type: ignore[arg-type]
        ),
        primary_measurement=measurement,
        measurement_channel=channel,
        expected_direction=direction,
    )


_TOXICITY = {"nucleus": 2, "cytoskeleton": 0}
_TRANSLOCATION = {"nucleus": 2, "marker": 1}
_GOLGI = {"nucleus": 2, "organelle": 0}
_NEURO = {"nucleus": 2, "neurite": 1, "second_marker": 0}

PRESETS: Dict[str, DatasetPreset] = {
    preset.name: preset
    for preset in (
        _preset(
            "toxicity",
            {"cell_count": (8, 11), "marker_level": (0.6, 0.8)},
            {"cell_count": (3, 5), "marker_level": (0.3, 0.45)},
            _TOXICITY, "object_count", 2, "decrease",
        ),
        _preset(
            "toxicity-subtle",
            {"cell_count": (7, 10), "marker_level": (0.55, 0.75)},
            {"cell_count": (5, 8), "marker_level": (0.45, 0.65)},
            _TOXICITY, "object_count", 2, "decrease",
        ),
        _preset(
            "translocation",
            {"translocation_ratio": (0.15, 0.35), "marker_level": (0.25, 0.3)},
            {"translocation_ratio": (0.7, 0.9), "marker_level": (0.25, 0.3)},
            _TRANSLOCATION, "nuclear_cytoplasm_ratio", 1, "increase",
        ),
        _preset(
            "translocation-subtle",
            {"translocation_ratio": (0.2, 0.4), "marker_level": (0.25, 0.3)},
            {"translocation_ratio": (0.35, 0.55), "marker_level": (0.25, 0.3)},
            _TRANSLOCATION, "nuclear_cytoplasm_ratio", 1, "increase",
        ),
        _preset(
            "golgi",
            {"organelle_scatter": (0.8, 1.3)},
            {"organelle_scatter": (2.5, 4.0)},
            _GOLGI, "area_fraction", 0, "increase",
        ),
        _preset(
            "golgi-subtle",
            {"organelle_scatter": (0.8, 1.5)},
            {"organelle_scatter": (1.3, 2.2)},
            _GOLGI, "area_fraction", 0, "increase",
        ),
        _preset(
            "neuro",
            {"cell_count": (6, 8), "neurite_density": (0.6, 0.9), "marker_level": (0.2, 0.35)},
            {"cell_count": (3, 5), "neurite_density": (0.2, 0.4), "marker_level": (0.5, 0.7)},
            _NEURO, "area_fraction", 1, "decrease",
        ),
        _preset(
            "neuro-subtle",
            {"cell_count": (5, 8), "neurite_density": (0.5, 0.8), "marker_level": (0.25, 0.4)},
            {"cell_count": (4, 7), "neurite_density": (0.35, 0.65), "marker_level": (0.35, 0.5)},
            _NEURO, "area_fraction", 1, "decrease",
        ),
    )
}


def get_preset(name: str) -> DatasetPreset:
    if name not in PRESETS:
        raise ConfigError("dataset.preset", f"unknown preset '{name}' (choose from {', '.join(sorted(PRESETS))})")
    return PRESETS[name]


def _widen(bounds: Tuple[float, float], margin: float, upper: Optional[float]) -> Tuple[float, float]:
    low, high = bounds
    pad = (high - low) * margin
    low, high = max(0.0, low - pad), high + pad
    if upper is not None:
        high = min(upper, high)
    return (low, high)


def broad_conditions(margin: float = 0.25) -> List[ConditionSpec]:
    """One widened group per condition of every pronounced preset, the pretraining distribution."""
    groups = []
    for preset in PRESETS.values():
        if preset.name.endswith("-subtle"):
            continue
        for spec in preset.conditions:
            low, high = spec.cell_count
            groups.append(
                spec.model_copy(
                    update={
                        "name": f"{preset.name}-{spec.name}",
                        "cell_count": (max(0, low - 1), high + 1),
                        "radius": _widen(spec.radius, margin, None),
                        "translocation_ratio": _widen(spec.translocation_ratio, margin, 1.0),
                        "organelle_scatter": _widen(spec.organelle_scatter, margin, None),
                        "neurite_density": _widen(spec.neurite_density, margin, 1.0),
                        "marker_level": _widen(spec.marker_level, margin, 1.0),
                    }
                )
            )
    return groups


def sample_params(spec: ConditionSpec, rng: np.random.Generator, size: int = 64) -> PhenotypeParams:
    """Draw one image's parameters from a condition's ranges, placing non-overlapping nuclei."""
    scale = size / REFERENCE_SIZE
    low, high = spec.cell_count
    count = int(rng.integers(low, high + 1))
    centers: List[Tuple[float, float]] = []
    radii: List[float] = []
    attempts = 0
    while len(centers) < count:
        attempts += 1
        if attempts > PLACEMENT_ATTEMPTS:
            raise DataError(f"canvas of {size} px too small for {count} cells of condition '{spec.name}'")
        r = float(rng.uniform(*spec.radius)) * scale
        margin = r + scale
        if size - 2 * margin <= 0:
            raise DataError(f"canvas of {size} px too small for radius {r:.1f}")
        y, x = (float(v) for v in rng.uniform(margin, size - margin, size=2))
        if all(math.hypot(y - cy, x - cx) >= r + cr + 2.0 * scale for (cy, cx), cr in zip(centers, radii)):
            centers.append((y, x))
            radii.append(r)
    return PhenotypeParams(
        cell_count=count,
        centers=centers,
        radii=radii,
        translocation_ratio=float(rng.uniform(*spec.translocation_ratio)),
        organelle_scatter=float(rng.uniform(*spec.organelle_scatter)),
        neurite_density=float(rng.uniform(*spec.neurite_density)),
        marker_level=float(rng.uniform(*spec.marker_level)),
        render_seed=int(rng.integers(0, 2**31 - 1)),
    )


def cell_masks(params: PhenotypeParams, size: int) -> Tuple[np.ndarray, np.ndarray]:
    """Nucleus disks and the cytoplasm rings around them (rings exclude every nucleus)."""
    nucleus = np.zeros((size, size), dtype=bool)
    body = np.zeros((size, size), dtype=bool)
    for (cy, cx), r in zip(params.centers, params.radii):
        if not (0 <= cy < size and 0 <= cx < size):
            raise DataError(f"cell centre ({cy:.1f}, {cx:.1f}) lies outside the {size} px canvas")
        rr, cc = draw.disk((cy, cx), r, shape=(size, size))
        nucleus[rr, cc] = True
        rr, cc = draw.disk((cy, cx), r * CYTOPLASM_FACTOR, shape=(size, size))
        body[rr, cc] = True
    return nucleus, body & ~nucleus


def render_layers(params: PhenotypeParams, spec: ConditionSpec, size: int = 64) -> Dict[str, np.ndarray]:
    """Noise-free [0, 1] intensity layer per channel role."""
    rng = np.random.default_rng(params.render_seed)
    scale = size / REFERENCE_SIZE
    nucleus, cytoplasm = cell_masks(params, size)
    layers: Dict[str, np.ndarray] = {"nucleus": nucleus.astype(np.float64) * 0.9}

    if "marker" in spec.channels:
        marker = np.zeros((size, size))
        n_area, c_area = nucleus.sum(), cytoplasm.sum()
        mass = params.marker_level * (n_area + c_area)
        if n_area:
            marker[nucleus] = params.translocation_ratio * mass / n_area
        if c_area:
            marker[cytoplasm] = (1.0 - params.translocation_ratio) * mass / c_area
        layers["marker"] = marker

    if "organelle" in spec.channels:
        organelle = np.zeros((size, size))
        for (cy, cx), r in zip(params.centers, params.radii):
            for _ in range(spec.puncta_per_cell):
                py, px = rng.normal((cy, cx), params.organelle_scatter * scale)
                rr, cc = draw.disk((py, px), max(scale, 0.5), shape=(size, size))
                organelle[rr, cc] = 1.0
        layers["organelle"] = organelle

    body = nucleus | cytoplasm
    if "cytoskeleton" in spec.channels:
        layers["cytoskeleton"] = body * params.marker_level

    if "second_marker" in spec.channels:
        layers["second_marker"] = body * params.marker_level

    if "neurite" in spec.channels:
        neurite = np.zeros((size, size))
        for (cy, cx), r in zip(params.centers, params.radii):
            rr, cc = draw.disk((cy, cx), r * 1.2, shape=(size, size))
            neurite[rr, cc] = 0.8
            n_branches = int(round(params.neurite_density * MAX_NEURITES))
            for _ in range(n_branches):
                angle = rng.uniform(0, 2 * np.pi)
                length = rng.uniform(8.0, 16.0) * scale
                ey = int(np.clip(round(cy + length * np.sin(angle)), 0, size - 1))
                ex = int(np.clip(round(cx + length * np.cos(angle)), 0, size - 1))
                rr, cc = draw.line(int(round(cy)), int(round(cx)), ey, ex)
                neurite[rr, cc] = 0.8
        layers["neurite"] = neurite

    return {role: np.clip(layer, 0.0, 1.0) for role, layer in layers.items()}


def render_image(
    params: PhenotypeParams,
    spec: ConditionSpec,
    size: int = 64,
    render: Optional[RenderSettings] = None,
) -> torch.Tensor:
    """Compose the role layers into a 3-channel [-1, 1] image with background, blur and noise."""
    render = render or RenderSettings()
    rng = np.random.default_rng(derive_seed(params.render_seed, "noise"))
    layers = render_layers(params, spec, size)
    image = np.zeros((3, size, size))
    for role, index in spec.channels.items():
        if role not in layers:
            raise ConfigError("channels", f"unknown channel role '{role}'")
        if not 0 <= index < 3:
            raise ConfigError("channels", f"channel index {index} outside [0, 3)")
        image[index] = np.maximum(image[index], layers[role])
    for index in range(3):
        channel = image[index] + render.background
        if render.blur_sigma > 0:
            channel = filters.gaussian(channel, sigma=render.blur_sigma, preserve_range=True)
        if render.noise_sigma > 0:
            channel = channel + rng.normal(0.0, render.noise_sigma, channel.shape)
        image[index] = channel
    pixels = np.clip(image, 0.0, 1.0) * 2.0 - 1.0
    return torch.from_numpy(pixels.astype(np.float32))


def quantize(image: torch.Tensor) -> torch.Tensor:
    """Round-trip through 8 bits so in-memory images equal the PNGs on disk."""
    return to_pixels(to_uint8(image))


def synthesize(
    conditions: Sequence[ConditionSpec],
    n_per_condition: int,
    seed: int,
    size: int = 64,
    name: str = "synthetic",
    render: Optional[RenderSettings] = None,
) -> ImageDataset:
    """Render n images per condition in memory; labels follow sorted condition names."""
    names = sorted(spec.name for spec in conditions)
    if len(set(names)) != len(names):
        raise ConfigError("conditions", "condition names must be unique")
    by_name = {spec.name: spec for spec in conditions}
    images, labels, ids, params = [], [], [], []
    for label, cond_name in enumerate(names):
        spec = by_name[cond_name]
        for index in tqdm(range(n_per_condition), desc=f"render {cond_name}", leave=False):
            rng = np.random.default_rng(derive_seed(seed, name, cond_name, index))
            p = sample_params(spec, rng, size)
            images.append(quantize(render_image(p, spec, size, render)))
            labels.append(label)
            ids.append(f"{cond_name}/{index:04d}")
            params.append(p)
    return ImageDataset(
        images=torch.stack(images) if images else torch.empty(0, 3, size, size),
        labels=torch.tensor(labels, dtype=torch.long),
        ids=ids,
        conditions=names,
        params=params,  # type: ignore[arg-type]
        name=name,
    )


def generate_dataset(
    conditions: Sequence[ConditionSpec],
    n_per_condition: int,
    seed: int,
    out_dir: Path,
    size: int = 64,
    name: str = "synthetic",
) -> DatasetManifest:
    """
    Write <out_dir>/<condition>/<index>.png plus manifest.yaml with every image's parameters.

    Raises:
        StorageError: If out_dir already holds a dataset or cannot be written
    """
    out_dir = Path(out_dir)
    if (out_dir / MANIFEST_NAME).exists():
        raise StorageError(out_dir, "a dataset already exists here")
    dataset = synthesize(conditions, n_per_condition, seed, size, name)
    entries = []
    try:
        for i, image_id in enumerate(dataset.ids):
            rel = f"{image_id}.png"
            path = out_dir / rel
            save_png(dataset.images[i], path)
            entries.append(
                DatasetEntry(
                    id=image_id,
                    condition=dataset.condition_of(i),
                    path=rel,
                    sha256=hashlib.sha256(path.read_bytes()).hexdigest(),
                    params=dataset.params[i],
                )
            )
        manifest = DatasetManifest(
            name=name, seed=seed, image_size=size, conditions=dataset.conditions, entries=entries
        )
        with open(out_dir / MANIFEST_NAME, "w", encoding="utf-8") as f:
            yaml.safe_dump(manifest.model_dump(mode="json"), f, sort_keys=False)
    except OSError as e:
        raise StorageError(out_dir, f"cannot write dataset: {e}")
    logger.info(
        f"Generated {len(entries)} images for {len(dataset.conditions)} conditions",
        extra={"out_dir": str(out_dir), "seed": seed},
    )
    return manifest
