"""
Network modules: the latent codec, the class-conditional denoiser and the
feature extractor used for Frechet scores.

Parameter addresses are the dotted names from named_parameters(); attention
blocks are AttentionBlock instances so selectors can find them by type.
"""

import math
from dataclasses import dataclass
from typing import List, Literal, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from phenldiff.middleware.exceptions import (
    ConfigError,
    NumericalError,
    ShapeError,
    UnregisteredConditionError,
)
from phenldiff.schemas import CodecSpec, DenoiserSpec
from phenldiff.services.diffusion import ClassCondition

SelectorMode = Literal["all", "attention_only", "adapter_targets"]
TargetScope = Literal["attention", "all_matrices"]

ATTENTION_PROJECTIONS = ("to_q", "to_k", "to_v", "to_out")


def _groups(channels: int) -> int:
    return math.gcd(8, channels)


def _check_geometry(x: torch.Tensor, expected: Tuple[int, ...], what: str) -> None:
    if x.dim() != 4 or tuple(x.shape[1:]) != tuple(expected):
        raise ShapeError(("B",) + tuple(expected), tuple(x.shape), what)


# Codec
class Codec(nn.Module):
    """Deterministic regularized autoencoder between pixel and latent space."""

    def __init__(self, spec: CodecSpec):
        super().__init__()
        self.spec = spec
        width = spec.base_width
        n_down = int(math.log2(spec.downsample_factor))

        encoder: List[nn.Module] = [nn.Conv2d(spec.channels, width, 3, padding=1), nn.SiLU()]
        for _ in range(n_down):
            encoder += [
                nn.Conv2d(width, width, 3, stride=2, padding=1),
                nn.SiLU(),
                nn.Conv2d(width, width, 3, padding=1),
                nn.SiLU(),
            ]
        encoder.append(nn.Conv2d(width, spec.latent_channels, 3, padding=1))
        self.encoder = nn.Sequential(*encoder)

        decoder: List[nn.Module] = [nn.Conv2d(spec.latent_channels, width, 3, padding=1), nn.SiLU()]
        for _ in range(n_down):
            decoder += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(width, width, 3, padding=1),
                nn.SiLU(),
                nn.Conv2d(width, width, 3, padding=1),
                nn.SiLU(),
            ]
        decoder.append(nn.Conv2d(width, spec.channels, 3, padding=1))
        self.decoder = nn.Sequential(*decoder)

        # rescales latents to unit variance once the codec is trained
        self.register_buffer("latent_scale", torch.tensor(1.0))

    def reconstruct(self, images: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Unscaled encode/decode pass used while training the codec."""
        latents = self.encoder(images)
        return self.decoder(latents), latents

    @torch.no_grad()
    def encode(self, images: torch.Tensor) -> torch.Tensor:
        _check_geometry(images, self.spec.image_shape, "image")
        latents = self.encoder(images) * self.latent_scale
        if not torch.isfinite(latents).all():
            raise NumericalError("encoder produced non-finite latents")
        return latents

    @torch.no_grad()
    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        _check_geometry(latents, self.spec.latent_shape, "latent")
        images = self.decoder(latents / self.latent_scale)
        if not torch.isfinite(images).all():
            raise NumericalError("decoder produced non-finite pixels")
        return images.clamp(-1.0, 1.0)


# Denoiser
def timestep_embedding(timesteps: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal timestep embeddings."""
    half_dim = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half_dim, device=timesteps.device, dtype=torch.float32) / half_dim
    )
    args = timesteps[:, None].float() * freqs[None]
    embedding = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        embedding = F.pad(embedding, (0, 1))
    return embedding


class ResBlock(nn.Module):
    """Residual block conditioned on the summed time + class embedding."""

    def __init__(self, in_channels: int, out_channels: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_channels), in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, out_channels)
        self.norm2 = nn.GroupNorm(_groups(out_channels), out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.skip: nn.Module = (
            nn.Conv2d(in_channels, out_channels, 1) if in_channels != out_channels else nn.Identity()
        )

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class AttentionBlock(nn.Module):
    """Self-attention over spatial tokens with the class embedding as an extra context token."""

    def __init__(self, channels: int, emb_dim: int, num_heads: int):
        super().__init__()
        if channels % num_heads:
            raise ConfigError("num_heads", f"{num_heads} heads do not divide {channels} channels")
        self.num_heads = num_heads
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(channels, channels, bias=False)
        self.to_v = nn.Linear(channels, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)
        self.context_proj = nn.Linear(emb_dim, channels)

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape
        return x.reshape(b, n, self.num_heads, c // self.num_heads).transpose(1, 2)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)
        ctx = self.context_proj(context)[:, None, :]
        kv_tokens = torch.cat([tokens, ctx], dim=1)
        q = self._heads(self.to_q(tokens))
        k = self._heads(self.to_k(kv_tokens))
        v = self._heads(self.to_v(kv_tokens))
        out = F.scaled_dot_product_attention(q, k, v)
        out = out.transpose(1, 2).reshape(b, h * w, c)
        out = self.to_out(out)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class DownLevel(nn.Module):
    def __init__(
        self, in_ch: int, out_ch: int, n_res: int, emb_dim: int,
        attention: bool, num_heads: int, downsample: bool,
    ):
        super().__init__()
        self.res = nn.ModuleList(
            [ResBlock(in_ch if i == 0 else out_ch, out_ch, emb_dim) for i in range(n_res)]
        )
        self.attn = AttentionBlock(out_ch, emb_dim, num_heads) if attention else None
        self.downsample = nn.Conv2d(out_ch, out_ch, 3, stride=2, padding=1) if downsample else None


class UpLevel(nn.Module):
    def __init__(
        self, in_ch: int, skip_ch: int, out_ch: int, n_res: int, emb_dim: int,
        attention: bool, num_heads: int, upsample: bool,
    ):
        super().__init__()
        self.res = nn.ModuleList(
            [
                ResBlock(in_ch + skip_ch if i == 0 else out_ch, out_ch, emb_dim)
                for i in range(n_res)
            ]
        )
        self.attn = AttentionBlock(out_ch, emb_dim, num_heads) if attention else None
        self.upsample = nn.Conv2d(out_ch, out_ch, 3, padding=1) if upsample else None


class MidBlock(nn.Module):
    def __init__(self, channels: int, emb_dim: int, attention: bool, num_heads: int):
        super().__init__()
        self.res1 = ResBlock(channels, channels, emb_dim)
        self.attn = AttentionBlock(channels, emb_dim, num_heads) if attention else None
        self.res2 = ResBlock(channels, channels, emb_dim)


class ClassConditionalUNet(nn.Module):
    """Noise predictor eps_theta(z_t, t, c) over the codec's latent geometry."""

    def __init__(self, spec: DenoiserSpec, latent_shape: Tuple[int, int, int]):
        super().__init__()
        self.spec = spec
        self.latent_shape = tuple(latent_shape)
        self.null_label = spec.null_label
        width, emb = spec.base_width, spec.emb_dim
        latent_channels = latent_shape[0]

        self.time_mlp = nn.Sequential(nn.Linear(width, emb), nn.SiLU(), nn.Linear(emb, emb))
        self.class_embedding = nn.Embedding(spec.num_classes + 1, emb)
        self.in_conv = nn.Conv2d(latent_channels, width, 3, padding=1)

        n_levels = len(spec.channel_mults)
        channels = [width * m for m in spec.channel_mults]
        self.down = nn.ModuleList()
        ch = width
        for level, out_ch in enumerate(channels):
            self.down.append(
                DownLevel(
                    ch, out_ch, spec.num_res_blocks, emb,
                    attention=level in spec.attention_levels,
                    num_heads=spec.num_heads,
                    downsample=level < n_levels - 1,
                )
            )
            ch = out_ch

        self.mid = MidBlock(ch, emb, spec.mid_attention, spec.num_heads)

        self.up = nn.ModuleList()
        for level in reversed(range(n_levels)):
            out_ch = channels[level]
            self.up.append(
                UpLevel(
                    ch, channels[level], out_ch, spec.num_res_blocks, emb,
                    attention=level in spec.attention_levels,
                    num_heads=spec.num_heads,
                    upsample=level > 0,
                )
            )
            ch = out_ch

        self.out_norm = nn.GroupNorm(_groups(ch), ch)
        self.out_conv = nn.Conv2d(ch, latent_channels, 3, padding=1)

    def embed(self, t: torch.Tensor, labels: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        class_emb = self.class_embedding(labels)
        time_emb = self.time_mlp(timestep_embedding(t, self.spec.base_width))
        return time_emb + class_emb, class_emb

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        emb, context = self.embed(t, labels)
        h = self.in_conv(z_t)
        skips = []
        for level in self.down:
            for block in level.res:
                h = block(h, emb)
            if level.attn is not None:
                h = level.attn(h, context)
            skips.append(h)
            if level.downsample is not None:
                h = level.downsample(h)

        h = self.mid.res1(h, emb)
        if self.mid.attn is not None:
            h = self.mid.attn(h, context)
        h = self.mid.res2(h, emb)

        for level in self.up:
            h = torch.cat([h, skips.pop()], dim=1)
            for block in level.res:
                h = block(h, emb)
            if level.attn is not None:
                h = level.attn(h, context)
            if level.upsample is not None:
                h = level.upsample(F.interpolate(h, scale_factor=2, mode="nearest"))

        return self.out_conv(F.silu(self.out_norm(h)))

    @torch.no_grad()
    def predict(self, z_t: torch.Tensor, t: int, cond: ClassCondition) -> torch.Tensor:
        """Validated single-condition prediction for a batch of latents."""
        _check_geometry(z_t, self.latent_shape, "latent")
        if not cond.null_flag and not 0 <= cond.label < self.spec.num_classes:
            raise UnregisteredConditionError(cond.label, self.spec.num_classes)
        ts = torch.full((z_t.shape[0],), t, dtype=torch.long, device=z_t.device)
        labels = torch.full((z_t.shape[0],), cond.index(self.null_label), dtype=torch.long, device=z_t.device)
        eps = self(z_t, ts, labels)
        if not torch.isfinite(eps).all():
            raise NumericalError("non-finite noise prediction", timestep=t, condition=str(cond))
        return eps


# Parameter selection
@dataclass(frozen=True)
class ParameterSelector:
    mode: str
    addresses: Tuple[str, ...]


def attention_block_prefixes(model: nn.Module) -> List[str]:
    return [name for name, module in model.named_modules() if isinstance(module, AttentionBlock)]


def resolve_adapter_targets(model: nn.Module, scope: TargetScope = "attention") -> List[str]:
    """Addresses of the 2-D weight matrices an adapter attaches to."""
    targets = []
    for name, module in model.named_modules():
        if not isinstance(module, (nn.Linear, nn.Conv2d)):
            continue
        if scope == "attention" and name.rsplit(".", 1)[-1] not in ATTENTION_PROJECTIONS:
            continue
        targets.append(f"{name}.weight")
    return targets


def resolve_selector(
    model: nn.Module, mode: str, scope: TargetScope = "attention"
) -> ParameterSelector:
    """Resolve a selector mode to a deterministic list of parameter addresses."""
    names = [name for name, _ in model.named_parameters()]
    if mode == "all":
        addresses = names
    elif mode == "attention_only":
        prefixes = tuple(f"{p}." for p in attention_block_prefixes(model))
        addresses = [n for n in names if prefixes and n.startswith(prefixes)]
    elif mode == "adapter_targets":
        addresses = resolve_adapter_targets(model, scope)
    else:
        raise ConfigError("mode", f"unknown selector mode '{mode}'")
    return ParameterSelector(mode=mode, addresses=tuple(addresses))


# Feature extractor
class FeatureExtractor(nn.Module):
    """Small convolutional classifier whose penultimate layer feeds Frechet scores."""

    def __init__(self, channels: int, num_classes: int, feature_dim: int = 64):
        super().__init__()
        self.feature_dim = feature_dim
        self.body = nn.Sequential(
            nn.Conv2d(channels, 16, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
            nn.Linear(64, feature_dim),
            nn.SiLU(),
        )
        self.head = nn.Linear(feature_dim, num_classes)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.head(self.body(images))

    @torch.no_grad()
    def features(self, images: torch.Tensor) -> torch.Tensor:
        return self.body(images)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def build_denoiser(spec: DenoiserSpec, codec_spec: CodecSpec) -> ClassConditionalUNet:
    return ClassConditionalUNet(spec, codec_spec.latent_shape)


def module_at(model: nn.Module, address: str) -> Optional[nn.Module]:
    """Module owning a dotted address; a trailing '.weight' is ignored."""
    path = address[: -len(".weight")] if address.endswith(".weight") else address
    module: nn.Module = model
    for part in path.split("."):
        if not hasattr(module, part):
            return None
        module = getattr(module, part)
    return module
