"""
Phenotype translation: invert a source-condition image to its noise code with
DDIM, then regenerate that code under the target condition.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Literal, Optional, Sequence

import numpy as np
import torch
from skimage.filters import threshold_otsu

from phenldiff.middleware.exceptions import (
    ConfigError,
    ShapeError,
    UndefinedMeasureError,
    UnregisteredConditionError,
)
from phenldiff.schemas import TranslationConfig
from phenldiff.services.diffusion import (
    ClassCondition,
    DiffusionStepPlan,
    ddim_invert,
    ddim_sample,
)
from phenldiff.services.training import LatentDiffusion, derive_seed, make_generator

logger = logging.getLogger(__name__)

Method = Literal["inversion", "random_latent"]


def raw_pixels(image: torch.Tensor) -> torch.Tensor:
    """[-1, 1] floats back to the 0..255 scale of the stored 8-bit images."""
    return (image.double() + 1.0) * 127.5


def pixel_l2(a: torch.Tensor, b: torch.Tensor) -> float:
    if a.shape != b.shape:
        raise ShapeError(tuple(a.shape), tuple(b.shape), "image")
    return float(torch.linalg.vector_norm(raw_pixels(a.cpu()) - raw_pixels(b.cpu())))


@dataclass
class TranslationRecord:
    """One translation with everything needed to re-run it."""

    image_id: str
    source_image: torch.Tensor
    source: ClassCondition
    target: ClassCondition
    latent_code: torch.Tensor
    translated: torch.Tensor
    steps: int
    guidance_scale: float
    seed: int
    method: Method = "inversion"
    back_translated: Optional[torch.Tensor] = None
    cycle_loss: Optional[float] = None

    def __post_init__(self) -> None:
        if self.source_image.shape != self.translated.shape:
            raise ShapeError(tuple(self.source_image.shape), tuple(self.translated.shape), "translated image")
        if (self.back_translated is None) != (self.cycle_loss is None):
            raise ConfigError("cycle_loss", "cycle loss is recorded exactly when a back-translation ran")

    def document(self) -> Dict[str, Any]:
        return {
            "image_id": self.image_id,
            "source": str(self.source),
            "target": str(self.target),
            "method": self.method,
            "steps": self.steps,
            "guidance_scale": self.guidance_scale,
            "seed": self.seed,
            "cycle_loss": self.cycle_loss,
        }


class PhenotypeTranslator:
    """Translates images between conditions of one fine-tuned model."""

    def __init__(self, model: LatentDiffusion, config: Optional[TranslationConfig] = None):
        self.model = model
        self.config = config or TranslationConfig()
        self.plan = DiffusionStepPlan.inversion(model.schedule.T, self.config.steps)

    def _check(self, image: torch.Tensor) -> None:
        expected = tuple(self.model.codec.spec.image_shape)
        if tuple(image.shape) != expected:
            raise ShapeError(expected, tuple(image.shape), "image")

    def _guidance(self, guidance_scale: Optional[float]) -> float:
        return self.config.guidance_scale if guidance_scale is None else guidance_scale

    def invert(self, image: torch.Tensor, source: ClassCondition) -> torch.Tensor:
        self._check(image)
        z0 = self.model.encode(image[None])
        return ddim_invert(self.model.denoiser, z0, source, self.plan, self.model.schedule)

    def generate_from(
        self, code: torch.Tensor, target: ClassCondition, guidance_scale: float
    ) -> torch.Tensor:
        z0 = ddim_sample(
            self.model.denoiser, code, target, self.plan.reversed(), self.model.schedule,
            guidance_scale=guidance_scale,
            clip_x0=self.config.clip_x0,
        )
        return self.model.decode(z0)[0]

    def translate(
        self,
        image: torch.Tensor,
        source: ClassCondition,
        target: ClassCondition,
        guidance_scale: Optional[float] = None,
        seed: int = 0,
        image_id: str = "image",
        with_cycle: bool = False,
    ) -> TranslationRecord:
        """
        Translate one (C, H, W) image from source to target.

        Args:
            image: Pixel tensor in [-1, 1]
            source: Condition the image belongs to
            target: Condition to translate into
            guidance_scale: Overrides the configured scale
            with_cycle: Also translate back and record the cycle loss

        Returns:
            TranslationRecord
        """
        self._validate_conditions(source, target)
        scale = self._guidance(guidance_scale)
        code = self.invert(image, source)
        translated = self.generate_from(code, target, scale)
        back, cycle = None, None
        if with_cycle:
            back = self.generate_from(self.invert(translated, target), source, scale)
            cycle = pixel_l2(image, back)
        return TranslationRecord(
            image_id=image_id,
            source_image=image.detach().cpu(),
            source=source,
            target=target,
            latent_code=code[0].detach().cpu(),
            translated=translated.detach().cpu(),
            steps=self.config.steps,
            guidance_scale=scale,
            seed=seed,
            back_translated=None if back is None else back.detach().cpu(),
            cycle_loss=cycle,
        )

    def cycle_loss(
        self,
        image: torch.Tensor,
        source: ClassCondition,
        target: ClassCondition,
        guidance_scale: Optional[float] = None,
    ) -> float:
        """L2 norm over raw pixels between an image and its source->target->source round trip."""
        record = self.translate(image, source, target, guidance_scale, with_cycle=True)
        return float(record.cycle_loss)  # type: ignore[arg-type]

    def random_latent_translate(
        self,
        image: torch.Tensor,
        source: ClassCondition,
        target: ClassCondition,
        seed: int,
        guidance_scale: Optional[float] = None,
        image_id: str = "image",
        with_cycle: bool = False,
    ) -> TranslationRecord:
        """Baseline that ignores the input and samples the target from fresh noise."""
        self._check(image)
        self._validate_conditions(source, target)
        scale = self._guidance(guidance_scale)
        code = self.model.noise([seed])
        translated = self.generate_from(code, target, scale)
        back, cycle = None, None
        if with_cycle:
            back = self.generate_from(self.model.noise([derive_seed(seed, "back")]), source, scale)
            cycle = pixel_l2(image, back)
        return TranslationRecord(
            image_id=image_id,
            source_image=image.detach().cpu(),
            source=source,
            target=target,
            latent_code=code[0].detach().cpu(),
            translated=translated.detach().cpu(),
            steps=self.config.steps,
            guidance_scale=scale,
            seed=seed,
            method="random_latent",
            back_translated=None if back is None else back.detach().cpu(),
            cycle_loss=cycle,
        )

    def _validate_conditions(self, *conds: ClassCondition) -> None:
        n = self.model.denoiser.spec.num_classes
        for cond in conds:
            if cond.null_flag:
                raise ConfigError("condition", "translation needs registered conditions, not the null token")
            if not 0 <= cond.label < n:
                raise UnregisteredConditionError(cond.label, n)


def translate_batch(
    translator: PhenotypeTranslator,
    images: torch.Tensor,
    image_ids: Sequence[str],
    source: ClassCondition,
    target: ClassCondition,
    seed: int,
    method: Method = "inversion",
    guidance_scale: Optional[float] = None,
    with_cycle: bool = True,
) -> List[TranslationRecord]:
    """Translate a batch image by image; each image gets its own seed derived from its id."""
    records = []
    for image, image_id in zip(images, image_ids):
        image_seed = derive_seed(seed, image_id)
        if method == "inversion":
            record = translator.translate(
                image, source, target, guidance_scale, image_seed, image_id, with_cycle
            )
        else:
            record = translator.random_latent_translate(
                image, source, target, image_seed, guidance_scale, image_id, with_cycle
            )
        records.append(record)
    if with_cycle and records:
        mean_cycle = float(np.mean([r.cycle_loss for r in records]))
        logger.info(
            f"Translated {len(records)} images ({method}), mean cycle loss {mean_cycle:.2f}",
            extra={"method": method, "source": str(source), "target": str(target)},
        )
    return records


def foreground_mask(image: torch.Tensor) -> np.ndarray:
    """Per-channel Otsu masks of a (C, H, W) image, stacked."""
    pixels = ((image.detach().cpu().double() + 1.0) / 2.0).numpy()
    masks = []
    for channel in pixels:
        if np.ptp(channel) == 0:
            masks.append(np.zeros_like(channel, dtype=bool))
            continue
        masks.append(channel > threshold_otsu(channel))
    return np.stack(masks)


def mask_correlation(a: torch.Tensor, b: torch.Tensor) -> float:
    """Pearson correlation between the foreground masks of two images."""
    ma = foreground_mask(a).ravel().astype(np.float64)
    mb = foreground_mask(b).ravel().astype(np.float64)
    if ma.std() == 0 or mb.std() == 0:
        raise UndefinedMeasureError("identity_preservation", "a foreground mask is constant")
    return float(np.clip(np.corrcoef(ma, mb)[0, 1], -1.0, 1.0))


def identity_preservation(record: TranslationRecord) -> float:
    return mask_correlation(record.source_image, record.translated)


def random_pair_baseline(images: torch.Tensor, seed: int, n_pairs: int = 100) -> List[float]:
    """Mask correlations of random distinct image pairs, the overlap expected by chance."""
    n = images.shape[0]
    if n < 2:
        return []
    rng = make_generator(seed)
    values = []
    for _ in range(n_pairs):
        i, j = torch.randperm(n, generator=rng)[:2].tolist()
        try:
            values.append(mask_correlation(images[i], images[j]))
        except UndefinedMeasureError:
            continue
    return values
