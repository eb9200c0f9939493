from pathlib import Path

import pytest
import torch

from phenldiff.config import Settings
from phenldiff.models import ClassConditionalUNet, Codec
from phenldiff.schemas import CodecSpec, DenoiserSpec
from phenldiff.services.datasets import ImageDataset
from phenldiff.services.diffusion import NoiseSchedule, build_schedule
from phenldiff.services.training import LatentDiffusion


@pytest.fixture
def env(tmp_path: Path) -> Settings:
    return Settings(OUTPUT_ROOT=str(tmp_path / "runs"), DEVICE="cpu", NUM_WORKERS=0, DETERMINISTIC=True)


@pytest.fixture
def codec_spec() -> CodecSpec:
    return CodecSpec(image_size=16, latent_channels=2, base_width=8, downsample_factor=4)


@pytest.fixture
def denoiser_spec() -> DenoiserSpec:
    return DenoiserSpec(base_width=8, channel_mults=(1, 2), num_res_blocks=1, num_heads=2, emb_dim=32)


@pytest.fixture
def small_schedule() -> NoiseSchedule:
    return build_schedule(T=50)


@pytest.fixture
def denoiser(denoiser_spec: DenoiserSpec, codec_spec: CodecSpec) -> ClassConditionalUNet:
    torch.manual_seed(0)
    return ClassConditionalUNet(denoiser_spec, codec_spec.latent_shape).eval()


@pytest.fixture
def tiny_model(codec_spec: CodecSpec, denoiser: ClassConditionalUNet, small_schedule: NoiseSchedule) -> LatentDiffusion:
    torch.manual_seed(1)
    return LatentDiffusion(Codec(codec_spec).eval(), denoiser, small_schedule)


@pytest.fixture
def images16() -> torch.Tensor:
    generator = torch.Generator().manual_seed(3)
    return torch.rand((6, 3, 16, 16), generator=generator) * 2 - 1


@pytest.fixture
def tiny_dataset(images16: torch.Tensor) -> ImageDataset:
    labels = torch.tensor([0, 0, 0, 1, 1, 1])
    ids = [f"{'a' if int(y) == 0 else 'b'}/{i:04d}" for i, y in enumerate(labels)]
    return ImageDataset(images=images16, labels=labels, ids=ids, conditions=["a", "b"], name="tiny")
