"""
Training loops for the codec and the denoiser, and the LatentDiffusion bundle
that ties codec, denoiser and schedule together for generation.
"""

import hashlib
import logging
import random
from dataclasses import dataclass, field
from typing import Iterable, Iterator, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.data import DataLoader, TensorDataset
from tqdm import tqdm

from phenldiff.config import Settings, settings
from phenldiff.middleware.exceptions import InsufficientDataError, NumericalError, ShapeError
from phenldiff.models import ClassConditionalUNet, Codec, build_denoiser
from phenldiff.schemas import CodecSpec, CodecTrainingConfig, DenoiserSpec, Determinism, TrainingConfig
from phenldiff.services.datasets import ImageDataset
from phenldiff.services.diffusion import (
    ClassCondition,
    DiffusionStepPlan,
    NoiseSchedule,
    ddim_sample,
    ddpm_sample,
    relative_l2,
    training_loss,
)

logger = logging.getLogger(__name__)

DETERMINISM_WARN_ONLY: Determinism = "warn_only"


# Seeding
def derive_seed(seed: int, *keys: object) -> int:
    """Stable child seed for a named sub-task."""
    text = ":".join([str(seed)] + [str(k) for k in keys])
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:4], "little")


def make_generator(seed: int) -> torch.Generator:
    generator = torch.Generator(device="cpu")
    generator.manual_seed(int(seed))
    return generator


def determinism_mode(env: Optional[Settings] = None) -> Determinism:
    return DETERMINISM_WARN_ONLY if (env or settings).DETERMINISTIC else "off"


def seed_everything(seed: int, env: Optional[Settings] = None) -> None:
    """
    Seed the global RNGs used for weight initialisation.

    With DETERMINISTIC set, kernels without a deterministic implementation
    still run and only warn; run manifests record this as "warn_only".
    """
    env = env or settings
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    if env.DETERMINISTIC:
        torch.use_deterministic_algorithms(True, warn_only=True)


def batch_stream(
    tensors: Sequence[torch.Tensor], batch_size: int, seed: int, env: Settings
) -> Iterator[List[torch.Tensor]]:
    """Endless seed-shuffled batches; each pass reshuffles from the same generator."""
    loader = DataLoader(
        TensorDataset(*tensors),
        batch_size=min(batch_size, len(tensors[0])),
        shuffle=True,
        generator=make_generator(seed),
        num_workers=env.NUM_WORKERS,
    )
    while True:
        for batch in loader:
            yield list(batch)


def window_means(losses: Sequence[float], fraction: float = 0.1) -> tuple:
    """Mean of the first and last `fraction` of a loss curve."""
    if not losses:
        return (float("nan"), float("nan"))
    k = max(1, int(len(losses) * fraction))
    return (float(np.mean(losses[:k])), float(np.mean(losses[-k:])))


# Codec
@dataclass
class CodecTrainingResult:
    codec: Codec
    epoch_losses: List[float]
    validation_error: float
    n_validation: int
    warnings: List[str] = field(default_factory=list)


def train_codec(
    dataset: ImageDataset,
    spec: CodecSpec,
    config: CodecTrainingConfig,
    seed: int,
    env: Optional[Settings] = None,
) -> CodecTrainingResult:
    """
    Train the autoencoder with a reconstruction + latent-norm objective.

    The latent scale is fixed after training so encoded latents have unit
    variance over the training split.
    """
    env = env or settings
    if len(dataset) == 0:
        raise InsufficientDataError(1, 0, "images for codec training")
    if dataset.image_shape != spec.image_shape:
        raise ShapeError(spec.image_shape, dataset.image_shape, "dataset image")

    seed_everything(seed, env)
    device = torch.device(env.DEVICE)
    order = torch.randperm(len(dataset), generator=make_generator(derive_seed(seed, "codec-split")))
    n_val = int(len(dataset) * config.val_fraction) if len(dataset) > 1 else 0
    val_idx, train_idx = order[:n_val], order[n_val:]
    train_images = dataset.images[train_idx]
    val_images = dataset.images[val_idx] if n_val else train_images

    codec = Codec(spec).to(device)
    optimizer = torch.optim.Adam(codec.parameters(), lr=config.learning_rate)
    batch_size = min(config.batch_size, len(train_images))
    steps_per_epoch = max(1, len(train_images) // batch_size)
    batches = batch_stream([train_images], batch_size, derive_seed(seed, "codec-batches"), env)

    epoch_losses: List[float] = []
    codec.train()
    for epoch in tqdm(range(config.epochs), desc="codec", leave=False):
        running = 0.0
        for _ in range(steps_per_epoch):
            (x,) = next(batches)
            x = x.to(device)
            recon, latents = codec.reconstruct(x)
            loss = spec.reconstruction_weight * F.mse_loss(recon, x) + spec.regularization_weight * latents.pow(2).mean()
            if not torch.isfinite(loss):
                raise NumericalError("non-finite codec loss", target=f"epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            running += float(loss)
        epoch_losses.append(running / steps_per_epoch)
        if epoch % max(1, config.log_every) == 0:
            logger.info(f"codec epoch {epoch}: loss {epoch_losses[-1]:.5f}", extra={"stage": "codec", "step": epoch})
    codec.eval()

    with torch.no_grad():
        latents = codec.encoder(train_images.to(device))
        std = float(latents.std())
        if not np.isfinite(std) or std <= 0:
            raise NumericalError("latent standard deviation is degenerate")
        codec.latent_scale.fill_(1.0 / std)
        recon = codec.decode(codec.encode(val_images.to(device)))
    validation_error = relative_l2(val_images.to(device), recon)

    warnings = []
    if validation_error > config.reconstruction_budget:
        message = (
            f"codec validation reconstruction error {validation_error:.4f} exceeds "
            f"budget {config.reconstruction_budget}"
        )
        logger.warning(message, extra={"stage": "codec"})
        warnings.append(message)
    logger.info(f"codec trained: validation relative L2 {validation_error:.4f} on {len(val_images)} images")
    return CodecTrainingResult(codec, epoch_losses, validation_error, len(val_images), warnings)


# Denoiser
def dropout_labels(
    labels: torch.Tensor, p_uncond: float, null_label: int, generator: torch.Generator
) -> torch.Tensor:
    """Replace labels with the null token at rate p_uncond."""
    if p_uncond <= 0:
        return labels
    drop = torch.rand(labels.shape, generator=generator) < p_uncond
    return torch.where(drop, torch.full_like(labels, null_label), labels)


def train_denoiser(
    denoiser: ClassConditionalUNet,
    latents: torch.Tensor,
    labels: torch.Tensor,
    parameters: Iterable[nn.Parameter],
    schedule: NoiseSchedule,
    steps: int,
    batch_size: int,
    learning_rate: float,
    p_uncond: float,
    grad_clip: float,
    seed: int,
    log_every: int = 100,
    desc: str = "denoiser",
    env: Optional[Settings] = None,
) -> List[float]:
    """Optimise only `parameters` on the latent diffusion loss; returns the per-step loss curve."""
    env = env or settings
    if latents.shape[0] == 0:
        raise InsufficientDataError(1, 0, "latents for denoiser training")
    params = list(parameters)
    optimizer = torch.optim.Adam(params, lr=learning_rate)
    device = next(denoiser.parameters()).device
    batches = batch_stream([latents, labels], batch_size, derive_seed(seed, desc, "batches"), env)
    noise_gen = make_generator(derive_seed(seed, desc, "noise"))

    losses: List[float] = []
    denoiser.train()
    for step in tqdm(range(steps), desc=desc, leave=False):
        z0, y = next(batches)
        y = dropout_labels(y, p_uncond, denoiser.null_label, noise_gen)
        t = torch.randint(1, schedule.T + 1, (z0.shape[0],), generator=noise_gen)
        noise = torch.randn(z0.shape, generator=noise_gen)
        loss = training_loss(denoiser, z0.to(device), y.to(device), t.to(device), noise.to(device), schedule)
        optimizer.zero_grad()
        loss.backward()
        if grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(params, grad_clip)
        optimizer.step()
        losses.append(float(loss))
        if step % max(1, log_every) == 0:
            logger.info(f"{desc} step {step}: loss {losses[-1]:.5f}", extra={"stage": desc, "step": step, "loss": losses[-1]})
    denoiser.eval()
    return losses


@dataclass
class PretrainResult:
    denoiser: ClassConditionalUNet
    losses: List[float]


def pretrain_base(
    dataset: ImageDataset,
    codec: Codec,
    spec: DenoiserSpec,
    schedule: NoiseSchedule,
    config: TrainingConfig,
    seed: int,
    env: Optional[Settings] = None,
) -> PretrainResult:
    """
    Pretrain the base denoiser on a broad dataset.

    Broad groups share the registered class slots (group index mod
    num_classes) and every label is dropped to the null token at rate
    p_uncond so the unconditional path is trained too.
    """
    env = env or settings
    if len(dataset) == 0:
        raise InsufficientDataError(1, 0, "images for pretraining")
    seed_everything(seed, env)
    device = torch.device(env.DEVICE)
    latents = encode_in_batches(codec, dataset.images, device)
    labels = dataset.labels % spec.num_classes

    denoiser = build_denoiser(spec, codec.spec).to(device)
    losses = train_denoiser(
        denoiser,
        latents.cpu(),
        labels,
        denoiser.parameters(),
        schedule,
        steps=config.steps,
        batch_size=config.batch_size,
        learning_rate=config.learning_rate,
        p_uncond=config.p_uncond,
        grad_clip=config.grad_clip,
        seed=seed,
        log_every=config.log_every,
        desc="pretrain",
        env=env,
    )
    first, last = window_means(losses)
    logger.info(f"pretraining finished: loss {first:.4f} -> {last:.4f}", extra={"stage": "pretrain"})
    return PretrainResult(denoiser, losses)


def encode_in_batches(
    codec: Codec, images: torch.Tensor, device: torch.device, batch_size: int = 64
) -> torch.Tensor:
    chunks = [codec.encode(images[i : i + batch_size].to(device)) for i in range(0, images.shape[0], batch_size)]
    return torch.cat(chunks) if chunks else torch.empty(0)


# Generation
@dataclass
class LatentDiffusion:
    """Codec + denoiser + schedule: the pieces needed to go between pixels and noise."""

    codec: Codec
    denoiser: ClassConditionalUNet
    schedule: NoiseSchedule

    @property
    def latent_shape(self) -> tuple:
        return tuple(self.codec.spec.latent_shape)

    @property
    def device(self) -> torch.device:
        return next(self.denoiser.parameters()).device

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        return self.codec.encode(images.to(self.device))

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        return self.codec.decode(latents.to(self.device))

    def noise(self, seeds: Sequence[int]) -> torch.Tensor:
        """One standard-normal latent per seed; the same seed gives the same noise for every model."""
        return torch.stack(
            [torch.randn(self.latent_shape, generator=make_generator(s)) for s in seeds]
        ).to(self.device)

    def generate(
        self,
        cond: ClassCondition,
        seeds: Sequence[int],
        plan: DiffusionStepPlan,
        guidance_scale: float = 1.0,
        ancestral: bool = False,
    ) -> torch.Tensor:
        """Decode one sample per seed; DDIM by default, the full ancestral chain on request."""
        images = []
        for s in seeds:
            z_T = self.noise([s])
            generator = make_generator(derive_seed(s, "sampling"))
            if ancestral:
                z0 = ddpm_sample(self.denoiser, z_T, cond, self.schedule, generator, guidance_scale)
            else:
                z0 = ddim_sample(
                    self.denoiser, z_T, cond, plan, self.schedule,
                    guidance_scale=guidance_scale,
                    generator=generator if plan.eta > 0 else None,
                )
            images.append(self.decode(z0))
        return torch.cat(images) if images else torch.empty(0)
