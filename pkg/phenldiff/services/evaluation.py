"""
Memorization and quality metrics: same-seed cross-model similarity, nearest
training neighbours, and Frechet distances in a locally trained feature space.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from tqdm import tqdm

from phenldiff.config import Settings, settings
from phenldiff.middleware.exceptions import (
    ConfigError,
    InsufficientDataError,
    NumericalError,
    ShapeError,
    UndefinedMeasureError,
)
from phenldiff.models import FeatureExtractor
from phenldiff.schemas import ExtractorConfig
from phenldiff.services.datasets import ImageDataset
from phenldiff.services.diffusion import ClassCondition, DiffusionStepPlan
from phenldiff.services.training import LatentDiffusion, batch_stream, derive_seed, make_generator, seed_everything
from phenldiff.services.translation import TranslationRecord, identity_preservation, random_pair_baseline

logger = logging.getLogger(__name__)

COVARIANCE_SHRINKAGE = 1e-6
FRECHET_TOLERANCE = 1e-8


# Subsets
def disjoint_subsets(dataset: ImageDataset, n: int, seed: int) -> Tuple[ImageDataset, ImageDataset]:
    """
    Two non-overlapping subsets of n images each.

    Conditions are interleaved round-robin from per-condition shuffles so
    both subsets stay balanced across conditions.
    """
    if n < 1:
        raise ConfigError("subset_size", f"subset size must be positive, got {n}")
    if len(dataset) < 2 * n:
        raise InsufficientDataError(2 * n, len(dataset), "images for two disjoint subsets")
    generator = make_generator(derive_seed(seed, "subsets", n))
    pools = []
    for label in range(len(dataset.conditions)):
        members = [i for i in range(len(dataset)) if int(dataset.labels[i]) == label]
        order = torch.randperm(len(members), generator=generator).tolist()
        pools.append([members[j] for j in order])
    interleaved: List[int] = []
    for position in range(max(len(p) for p in pools)):
        interleaved.extend(p[position] for p in pools if position < len(p))
    subset_a = dataset.subset(interleaved[:n], name=f"{dataset.name}[A{n}]")
    subset_b = dataset.subset(interleaved[n : 2 * n], name=f"{dataset.name}[B{n}]")
    return subset_a, subset_b


# Similarity
def standardize(images: torch.Tensor) -> torch.Tensor:
    """Flatten each image and scale it to zero mean, unit variance."""
    flat = images.reshape(images.shape[0], -1).double()
    flat = flat - flat.mean(dim=1, keepdim=True)
    std = flat.std(dim=1, keepdim=True)
    return flat / torch.where(std > 0, std, torch.ones_like(std))


def cosine_sim(a: torch.Tensor, b: torch.Tensor) -> float:
    a, b = a.reshape(-1).double(), b.reshape(-1).double()
    if a.shape != b.shape:
        raise ShapeError(tuple(a.shape), tuple(b.shape), "similarity vector")
    na, nb = torch.linalg.vector_norm(a), torch.linalg.vector_norm(b)
    if na == 0 or nb == 0:
        raise UndefinedMeasureError("cosine_similarity", "zero vector")
    return float(torch.clamp(a @ b / (na * nb), -1.0, 1.0))


def _unit_rows(x: torch.Tensor) -> torch.Tensor:
    norms = torch.linalg.vector_norm(x, dim=1, keepdim=True)
    if bool((norms == 0).any()):
        raise UndefinedMeasureError("cosine_similarity", "zero vector among inputs")
    return x / norms


def nearest_neighbors(queries: torch.Tensor, references: torch.Tensor) -> Tuple[List[int], List[float]]:
    """Exact brute-force nearest reference (by cosine) for every query."""
    if references.shape[0] == 0:
        raise InsufficientDataError(1, 0, "reference vectors")
    if queries.shape[1:] != references.shape[1:]:
        raise ShapeError(tuple(references.shape[1:]), tuple(queries.shape[1:]), "query vector")
    sims = _unit_rows(queries.double()) @ _unit_rows(references.double()).T
    values, indices = sims.max(dim=1)
    return indices.tolist(), values.clamp(-1.0, 1.0).tolist()


def memorization_similarities(generated: torch.Tensor, training: torch.Tensor) -> List[float]:
    """Per generated image, the max similarity to any training image in standardized pixel space."""
    if training.shape[0] == 0:
        raise InsufficientDataError(1, 0, "training images")
    _, sims = nearest_neighbors(standardize(generated), standardize(training))
    return sims


def _check_compatible(model_a: LatentDiffusion, model_b: LatentDiffusion) -> None:
    if model_a.latent_shape != model_b.latent_shape:
        raise ShapeError(model_a.latent_shape, model_b.latent_shape, "latent geometry")
    if model_a.denoiser.spec.num_classes != model_b.denoiser.spec.num_classes:
        raise ConfigError("num_classes", "models register different condition sets")


def generalization_histogram(
    model_a: LatentDiffusion,
    model_b: LatentDiffusion,
    seeds: Sequence[int],
    cond: ClassCondition,
    plan: DiffusionStepPlan,
) -> List[float]:
    """Cosine similarity of the two models' samples for each shared seed."""
    if not seeds:
        raise InsufficientDataError(1, 0, "seeds")
    _check_compatible(model_a, model_b)
    values = []
    for s in tqdm(seeds, desc="generalization", leave=False):
        a = standardize(model_a.generate(cond, [s], plan)).cpu()
        b = standardize(model_b.generate(cond, [s], plan)).cpu()
        values.append(cosine_sim(a, b))
    return values


def memorization_histogram(
    model: LatentDiffusion,
    training: torch.Tensor,
    seeds: Sequence[int],
    cond: ClassCondition,
    plan: DiffusionStepPlan,
) -> List[float]:
    if training.shape[0] == 0:
        raise InsufficientDataError(1, 0, "training images")
    generated = model.generate(cond, list(seeds), plan).cpu()
    return memorization_similarities(generated, training)


@dataclass
class SimilarityReport:
    strategy: str
    subset_size: int
    generalization: List[float]
    memorization: List[float]
    bins: int = 40

    def __post_init__(self) -> None:
        for name in ("generalization", "memorization"):
            values = getattr(self, name)
            if not values:
                raise InsufficientDataError(1, 0, f"{name} similarities")
            if min(values) < -1.0 - 1e-9 or max(values) > 1.0 + 1e-9:
                raise NumericalError(f"{name} similarity outside [-1, 1]")

    @staticmethod
    def _stats(values: Sequence[float]) -> Dict[str, float]:
        ordered = np.sort(np.asarray(values, dtype=np.float64))
        return {"median": float(np.median(ordered)), "fraction_above_0.9": float(np.mean(ordered > 0.9))}

    def summary(self) -> Dict[str, Any]:
        gen, mem = self._stats(self.generalization), self._stats(self.memorization)
        return {
            "strategy": self.strategy,
            "subset_size": self.subset_size,
            "generalization_median": gen["median"],
            "generalization_above_0.9": gen["fraction_above_0.9"],
            "memorization_median": mem["median"],
            "memorization_above_0.9": mem["fraction_above_0.9"],
        }


def directional_laws(reports: Sequence[SimilarityReport]) -> Dict[str, bool]:
    """Memorization medians non-increasing and generalization medians non-decreasing with subset size."""
    ordered = sorted(reports, key=lambda r: r.subset_size)
    mem = [r.summary()["memorization_median"] for r in ordered]
    gen = [r.summary()["generalization_median"] for r in ordered]
    return {
        "memorization_non_increasing": all(b <= a for a, b in zip(mem, mem[1:])),
        "generalization_non_decreasing": all(b >= a for a, b in zip(gen, gen[1:])),
    }


# Feature extractor
@dataclass
class ExtractorResult:
    extractor: FeatureExtractor
    accuracy: float
    losses: List[float]
    conditions: List[str]


def train_feature_extractor(
    dataset: ImageDataset,
    config: ExtractorConfig,
    seed: int,
    env: Optional[Settings] = None,
) -> ExtractorResult:
    """Train a small condition classifier whose penultimate layer serves as the feature space."""
    env = env or settings
    if len(dataset.conditions) < 2 or min(dataset.counts().values()) < 1:
        raise InsufficientDataError(2, len(dataset.conditions), "conditions for the feature extractor")
    seed_everything(seed, env)
    device = torch.device(env.DEVICE)
    order = torch.randperm(len(dataset), generator=make_generator(derive_seed(seed, "extractor-split")))
    n_val = max(1, int(len(dataset) * config.val_fraction)) if len(dataset) > 2 else 0
    val_idx, train_idx = order[:n_val], order[n_val:]
    images, labels = dataset.images, dataset.labels

    extractor = FeatureExtractor(dataset.image_shape[0], len(dataset.conditions), config.feature_dim).to(device)
    optimizer = torch.optim.Adam(extractor.parameters(), lr=config.learning_rate)
    batch_size = min(config.batch_size, len(train_idx))
    steps_per_epoch = max(1, len(train_idx) // batch_size)
    batches = batch_stream([images[train_idx], labels[train_idx]], batch_size, derive_seed(seed, "extractor"), env)

    losses: List[float] = []
    extractor.train()
    for _ in tqdm(range(config.epochs), desc="extractor", leave=False):
        for _ in range(steps_per_epoch):
            x, y = next(batches)
            loss = F.cross_entropy(extractor(x.to(device)), y.to(device))
            if not torch.isfinite(loss):
                raise NumericalError("non-finite extractor loss")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss))
    extractor.eval()

    eval_idx = val_idx if n_val else train_idx
    with torch.no_grad():
        predictions = extractor(images[eval_idx].to(device)).argmax(dim=1).cpu()
    accuracy = float((predictions == labels[eval_idx]).double().mean())
    logger.info(
        f"Feature extractor held-out accuracy {accuracy:.3f} (chance {1 / len(dataset.conditions):.3f})",
        extra={"feature_dim": config.feature_dim},
    )
    return ExtractorResult(extractor, accuracy, losses, list(dataset.conditions))


def extract_features(extractor: FeatureExtractor, images: torch.Tensor, batch_size: int = 64) -> np.ndarray:
    device = next(extractor.parameters()).device
    chunks = [
        extractor.features(images[i : i + batch_size].to(device)).cpu().double().numpy()
        for i in range(0, images.shape[0], batch_size)
    ]
    return np.concatenate(chunks) if chunks else np.empty((0, extractor.feature_dim))


# Frechet distance
@dataclass
class FrechetInputs:
    features_a: np.ndarray
    features_b: np.ndarray
    extractor_id: str = "local"
    extractor_hash: str = ""
    warnings: List[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.features_a = np.atleast_2d(np.asarray(self.features_a, dtype=np.float64))
        self.features_b = np.atleast_2d(np.asarray(self.features_b, dtype=np.float64))
        if self.features_a.shape[1] != self.features_b.shape[1]:
            raise ShapeError(self.features_a.shape[1:], self.features_b.shape[1:], "feature dimension")
        d = self.features_a.shape[1]
        for name, features in (("a", self.features_a), ("b", self.features_b)):
            n = features.shape[0]
            if n < 2:
                raise InsufficientDataError(2, n, f"feature rows in set {name}")
            if n < d:
                message = f"set {name} has n={n} < d={d}; covariance relies on shrinkage"
                logger.warning(message)
                self.warnings.append(message)


def _sqrtm_psd(matrix: np.ndarray) -> np.ndarray:
    symmetric = (matrix + matrix.T) / 2.0
    eigenvalues, eigenvectors = np.linalg.eigh(symmetric)
    return (eigenvectors * np.sqrt(np.clip(eigenvalues, 0.0, None))) @ eigenvectors.T


def frechet_distance(inputs: FrechetInputs) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)) with shrunk unbiased covariances."""
    a, b = inputs.features_a, inputs.features_b
    d = a.shape[1]
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    shrink = COVARIANCE_SHRINKAGE * np.eye(d)
    sigma_a = np.atleast_2d(np.cov(a, rowvar=False, ddof=1)) + shrink
    sigma_b = np.atleast_2d(np.cov(b, rowvar=False, ddof=1)) + shrink

    root_a = _sqrtm_psd(sigma_a)
    product = root_a @ sigma_b @ root_a
    eigenvalues = np.linalg.eigvalsh((product + product.T) / 2.0)
    trace_sqrt = float(np.sum(np.sqrt(np.clip(eigenvalues, 0.0, None))))

    value = float(np.sum((mu_a - mu_b) ** 2) + np.trace(sigma_a) + np.trace(sigma_b) - 2.0 * trace_sqrt)
    if not np.isfinite(value):
        raise NumericalError("non-finite Frechet distance")
    if value < 0:
        if value < -FRECHET_TOLERANCE * max(1.0, float(np.trace(sigma_a) + np.trace(sigma_b))):
            logger.warning(f"Frechet distance {value:.3e} clamped to 0")
        value = 0.0
    return value


def evaluate_translation_quality(
    translated: Dict[str, List[TranslationRecord]],
    real_target: torch.Tensor,
    extractor: FeatureExtractor,
    dataset_name: str = "dataset",
    extractor_hash: str = "",
    seed: int = 0,
) -> pd.DataFrame:
    """
    One report row per method: Frechet distance to the real target set, mean
    cycle loss and mean identity preservation.

    A real-vs-real row (two random halves of the target set) records the
    sampling-noise floor.
    """
    if real_target.shape[0] < 2:
        raise InsufficientDataError(2, real_target.shape[0], "real target images")
    real_features = extract_features(extractor, real_target)
    rows = []

    order = torch.randperm(real_target.shape[0], generator=make_generator(derive_seed(seed, "floor"))).numpy()
    half = len(order) // 2
    if half >= 2:
        floor = FrechetInputs(real_features[order[:half]], real_features[order[half:]], extractor_hash=extractor_hash)
        # identity column: mask overlap of unrelated real images
        chance = random_pair_baseline(real_target, derive_seed(seed, "pairs"))
        rows.append(
            {
                "dataset": dataset_name, "method": "real_vs_real", "n": half,
                "frechet": frechet_distance(floor), "cycle_loss": np.nan,
                "identity_preservation": float(np.mean(chance)) if chance else np.nan,
                "warnings": "; ".join(floor.warnings),
            }
        )

    for method in sorted(translated):
        records = translated[method]
        if not records:
            raise InsufficientDataError(1, 0, f"translated images for '{method}'")
        images = torch.stack([r.translated for r in records])
        inputs = FrechetInputs(extract_features(extractor, images), real_features, extractor_hash=extractor_hash)
        cycles = [r.cycle_loss for r in records if r.cycle_loss is not None]
        identities = []
        for r in records:
            try:
                identities.append(identity_preservation(r))
            except UndefinedMeasureError:
                inputs.warnings.append(f"identity preservation undefined for {r.image_id}")
        rows.append(
            {
                "dataset": dataset_name,
                "method": method,
                "n": len(records),
                "frechet": frechet_distance(inputs),
                "cycle_loss": float(np.mean(cycles)) if cycles else np.nan,
                "identity_preservation": float(np.mean(identities)) if identities else np.nan,
                "warnings": "; ".join(inputs.warnings),
            }
        )
    return pd.DataFrame(rows, columns=["dataset", "method", "n", "frechet", "cycle_loss", "identity_preservation", "warnings"])
