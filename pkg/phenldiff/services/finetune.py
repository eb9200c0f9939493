"""
Fine-tuning a pretrained denoiser on a small class-labelled dataset with one
of four strategies, and rebuilding fine-tuned models from checkpoints.
"""

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn as nn

from phenldiff.checkpoints import (
    checkpoint_hash,
    denoiser_spec_document,
    load_checkpoint,
    load_codec,
    load_denoiser,
    save_checkpoint,
    save_denoiser,
)
from phenldiff.config import Settings, settings
from phenldiff.middleware.exceptions import ConfigError, InsufficientDataError, StorageError
from phenldiff.models import ClassConditionalUNet, build_denoiser, resolve_selector
from phenldiff.schemas import CheckpointManifest, FinetuneConfig, ScheduleConfig
from phenldiff.services.adapters import (
    Adapter,
    attach_lora,
    attach_svdiff,
    freeze,
    load_adapter_state,
    requires_grad_count,
)
from phenldiff.services.datasets import ImageDataset
from phenldiff.services.diffusion import schedule_from_config
from phenldiff.services.training import (
    LatentDiffusion,
    encode_in_batches,
    seed_everything,
    train_denoiser,
    window_means,
)

logger = logging.getLogger(__name__)


@dataclass
class FinetuneResult:
    denoiser: ClassConditionalUNet
    strategy: str
    conditions: List[str]
    losses: List[float]
    trainable: int
    adapter: Optional[Adapter] = None
    from_scratch: bool = False
    warnings: List[str] = field(default_factory=list)

    @property
    def loss_windows(self) -> Tuple[float, float]:
        return window_means(self.losses)


def prepare_strategy(
    denoiser: ClassConditionalUNet, config: FinetuneConfig
) -> Tuple[List[nn.Parameter], Optional[Adapter]]:
    """Set requires_grad according to the strategy and return the parameters to optimise."""
    if config.strategy == "full":
        for p in denoiser.parameters():
            p.requires_grad_(True)
        return list(denoiser.parameters()), None

    if config.strategy == "attention":
        selected = set(resolve_selector(denoiser, "attention_only").addresses)
        freeze(denoiser)
        params = []
        for name, p in denoiser.named_parameters():
            if name in selected:
                p.requires_grad_(True)
                params.append(p)
        return params, None

    if config.strategy == "lora":
        _, lora = attach_lora(denoiser, rank=config.rank or 4, alpha=config.alpha)
        return lora.parameters(), lora

    if config.strategy == "svdiff":
        _, svdiff = attach_svdiff(denoiser)
        return svdiff.parameters(), svdiff

    raise ConfigError("strategy", f"unknown strategy '{config.strategy}'")


def registered_conditions(dataset: ImageDataset, config: FinetuneConfig, num_classes: int) -> List[str]:
    """Condition names in slot order; each needs at least one image."""
    names = sorted(config.conditions) if config.conditions else list(dataset.conditions)
    if len(names) > num_classes:
        raise ConfigError(
            "finetune.conditions",
            f"{len(names)} conditions but the base model registers only {num_classes} class slots",
        )
    counts = dataset.counts()
    for name in names:
        if counts.get(name, 0) < 1:
            raise InsufficientDataError(1, counts.get(name, 0), f"images for condition '{name}'")
    return names


def finetune_model(
    base: LatentDiffusion,
    dataset: ImageDataset,
    config: FinetuneConfig,
    seed: int,
    env: Optional[Settings] = None,
) -> FinetuneResult:
    """
    Fine-tune a copy of the base denoiser; the base itself is left untouched.

    With from_scratch the same architecture starts from random weights
    instead, the baseline against which pretraining is judged.
    """
    env = env or settings
    spec = base.denoiser.spec
    conditions = registered_conditions(dataset, config, spec.num_classes)
    data = dataset.restrict(conditions)

    seed_everything(seed, env)
    if config.from_scratch:
        denoiser = build_denoiser(spec, base.codec.spec).to(base.device)
    else:
        denoiser = copy.deepcopy(base.denoiser)
    params, adapter = prepare_strategy(denoiser, config)
    trainable = requires_grad_count(denoiser)
    logger.info(
        f"Fine-tuning with strategy '{config.strategy}': {trainable} trainable parameters",
        extra={"strategy": config.strategy, "trainable": trainable, "conditions": conditions},
    )

    latents = encode_in_batches(base.codec, data.images, base.device).cpu()
    desc = "scratch" if config.from_scratch else f"finetune-{config.strategy}"
    losses = train_denoiser(
        denoiser,
        latents,
        data.labels,
        params,
        base.schedule,
        steps=config.steps,
        batch_size=config.batch_size,
        learning_rate=config.learning_rate or 1e-4,
        p_uncond=config.p_uncond,
        grad_clip=config.grad_clip,
        seed=seed,
        log_every=config.log_every,
        desc=desc,
        env=env,
    )
    result = FinetuneResult(
        denoiser=denoiser,
        strategy=config.strategy,
        conditions=conditions,
        losses=losses,
        trainable=trainable,
        adapter=adapter,
        from_scratch=config.from_scratch,
    )
    first, last = result.loss_windows
    if not last < first:
        message = f"fine-tuning loss did not decrease ({first:.4f} -> {last:.4f})"
        logger.warning(message, extra={"strategy": config.strategy})
        result.warnings.append(message)
    return result


def save_finetuned(
    path: Path,
    result: FinetuneResult,
    config: FinetuneConfig,
    schedule: ScheduleConfig,
    seed: int,
    base_path: Optional[Path],
    dataset_hash: str,
) -> CheckpointManifest:
    """Adapter strategies store only their deltas; full and attention store every weight."""
    metadata = {
        "strategy": result.strategy,
        "from_scratch": result.from_scratch,
        "conditions": result.conditions,
        "trainable_parameters": result.trainable,
        "dataset_hash": dataset_hash,
        "base_path": str(base_path) if base_path is not None else None,
        "base_hash": checkpoint_hash(base_path) if base_path is not None and not result.from_scratch else None,
    }
    training_config = config.model_dump(mode="json")
    if result.adapter is not None:
        metadata["targets"] = list(result.adapter.targets)
        metadata["adapter"] = "lora" if result.strategy == "lora" else "svdiff"
        return save_checkpoint(
            path, "adapter", result.adapter.state(),
            spec=denoiser_spec_document(result.denoiser, schedule),
            training_config=training_config,
            seed=seed,
            metadata=metadata,
        )
    return save_denoiser(path, result.denoiser, schedule, training_config, seed, **metadata)


def load_finetuned(
    path: Path, base_path: Optional[Path] = None
) -> Tuple[ClassConditionalUNet, ScheduleConfig, CheckpointManifest]:
    """
    Rebuild a fine-tuned denoiser.

    Adapter checkpoints are re-attached to their base, whose hash must match
    the one recorded at fine-tuning time.
    """
    manifest, tensors = load_checkpoint(path, producing_command="phenldiff finetune")
    if manifest.kind == "denoiser":
        return load_denoiser(path)
    if manifest.kind != "adapter":
        raise StorageError(path, f"expected a fine-tuned checkpoint, found '{manifest.kind}'")

    meta = manifest.metadata
    base_dir = Path(base_path) if base_path is not None else Path(meta["base_path"])
    actual = checkpoint_hash(base_dir)
    if actual != meta.get("base_hash"):
        raise StorageError(base_dir, "base checkpoint does not match the hash recorded by the adapter")
    denoiser, schedule, _ = load_denoiser(base_dir)
    config = FinetuneConfig.model_validate(manifest.training_config)
    if meta["adapter"] == "lora":
        _, adapter = attach_lora(denoiser, rank=config.rank or 4, alpha=config.alpha, targets=meta["targets"])
    else:
        _, adapter = attach_svdiff(denoiser, targets=meta["targets"])  # type: ignore[assignment]
    load_adapter_state(adapter, tensors)
    return denoiser.eval(), schedule, manifest


def load_latent_diffusion(
    codec_path: Path, model_path: Path, base_path: Optional[Path] = None, env: Optional[Settings] = None
) -> Tuple[LatentDiffusion, CheckpointManifest]:
    """Codec + base or fine-tuned denoiser, ready for generation, with the denoiser's manifest."""
    env = env or settings
    codec = load_codec(codec_path)
    denoiser, schedule_config, manifest = load_finetuned(model_path, base_path)
    device = torch.device(env.DEVICE)
    model = LatentDiffusion(codec.to(device), denoiser.to(device), schedule_from_config(schedule_config))
    return model, manifest


def condition_slots(manifest: CheckpointManifest, num_classes: int) -> Dict[str, int]:
    """Condition name -> class slot for a fine-tuned checkpoint."""
    names = manifest.metadata.get("conditions") or [str(i) for i in range(num_classes)]
    return {name: i for i, name in enumerate(names)}
