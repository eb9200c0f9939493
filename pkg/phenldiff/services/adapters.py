"""
Parameter-efficient adapters: LoRA low-rank updates and SVDiff spectral shifts.

Both wrap a frozen Linear or Conv2d and rebuild its weight on every forward
pass from the frozen base plus a small trainable state. Convolution kernels
are treated as (out, in * kh * kw) matrices.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from phenldiff.middleware.exceptions import AdapterError, ConfigError, NumericalError
from phenldiff.models import (
    module_at,
    parameter_count,
    resolve_adapter_targets,
    resolve_selector,
)

logger = logging.getLogger(__name__)

Target = Union[nn.Linear, nn.Conv2d]

SVD_TOLERANCE = 1e-5


def _matrix_shape(module: Target) -> Tuple[int, int]:
    weight = module.weight
    return weight.shape[0], weight[0].numel()


class AdaptedLayer(nn.Module):
    """A frozen base layer whose weight is recomputed from adapter state."""

    def __init__(self, base: Target, address: str):
        super().__init__()
        if not isinstance(base, (nn.Linear, nn.Conv2d)):
            raise ConfigError("targets", f"'{address}' is not a Linear or Conv2d weight")
        self.base = base
        self.address = address
        for p in self.base.parameters():
            p.requires_grad_(False)

    @property
    def base_matrix(self) -> torch.Tensor:
        return self.base.weight.reshape(self.base.weight.shape[0], -1)

    def delta_matrix(self) -> torch.Tensor:
        raise NotImplementedError

    def effective_weight(self) -> torch.Tensor:
        return self.delta_matrix().reshape(self.base.weight.shape)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        weight = self.effective_weight()
        if isinstance(self.base, nn.Linear):
            return F.linear(x, weight, self.base.bias)
        return self.base._conv_forward(x, weight, self.base.bias)

    def adapter_state(self) -> Dict[str, torch.Tensor]:
        return {name: p for name, p in self.named_parameters() if not name.startswith("base.")}


class LoraLayer(AdaptedLayer):
    """W' = W + (alpha / r) B A with A (r x k) and B (d x r); B starts at zero."""

    def __init__(self, base: Target, address: str, rank: int, alpha: float):
        super().__init__(base, address)
        d, k = _matrix_shape(base)
        if rank < 1 or rank >= min(d, k):
            raise ConfigError("rank", f"rank {rank} must lie in [1, {min(d, k)}) for '{address}' ({d}x{k})")
        self.rank = rank
        self.scaling = alpha / rank
        self.lora_A = nn.Parameter(torch.empty(rank, k, dtype=base.weight.dtype, device=base.weight.device))
        self.lora_B = nn.Parameter(torch.zeros(d, rank, dtype=base.weight.dtype, device=base.weight.device))
        nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))

    def delta_matrix(self) -> torch.Tensor:
        return self.base_matrix + self.scaling * (self.lora_B @ self.lora_A)


class SvdiffLayer(AdaptedLayer):
    """W' = U diag(relu(S + delta)) Vh from a one-time SVD of the frozen weight."""

    def __init__(self, base: Target, address: str):
        super().__init__(base, address)
        weight = self.base_matrix.detach()
        norm = float(torch.linalg.matrix_norm(weight.double()))
        if norm == 0.0:
            raise NumericalError("cannot decompose an all-zero weight", target=address)
        try:
            U, S, Vh = torch.linalg.svd(weight.double(), full_matrices=False)
        except RuntimeError as e:
            raise NumericalError(f"singular value decomposition failed: {e}", target=address)
        error = float(torch.linalg.matrix_norm(U @ torch.diag(S) @ Vh - weight.double())) / norm
        if not math.isfinite(error) or error > SVD_TOLERANCE:
            raise NumericalError(f"SVD reconstruction error {error:.2e} exceeds {SVD_TOLERANCE}", target=address)
        dtype = weight.dtype
        self.register_buffer("U", U.to(dtype))
        self.register_buffer("S", S.to(dtype))
        self.register_buffer("Vh", Vh.to(dtype))
        self.delta = nn.Parameter(torch.zeros_like(self.S))

    def shifted_singular_values(self) -> torch.Tensor:
        return F.relu(self.S + self.delta)

    def delta_matrix(self) -> torch.Tensor:
        return (self.U * self.shifted_singular_values()) @ self.Vh


@dataclass
class LoraAdapter:
    rank: int
    alpha: float
    targets: Tuple[str, ...]
    layers: Dict[str, LoraLayer] = field(default_factory=dict, repr=False)

    def state(self) -> Dict[str, torch.Tensor]:
        return {
            f"{address}.{name}": tensor.detach()
            for address, layer in self.layers.items()
            for name, tensor in layer.adapter_state().items()
        }

    def parameters(self) -> List[nn.Parameter]:
        return [p for layer in self.layers.values() for p in (layer.lora_A, layer.lora_B)]


@dataclass
class SvdiffAdapter:
    targets: Tuple[str, ...]
    layers: Dict[str, SvdiffLayer] = field(default_factory=dict, repr=False)

    def state(self) -> Dict[str, torch.Tensor]:
        return {f"{address}.delta": layer.delta.detach() for address, layer in self.layers.items()}

    def parameters(self) -> List[nn.Parameter]:
        return [layer.delta for layer in self.layers.values()]


Adapter = Union[LoraAdapter, SvdiffAdapter]


def _replace(model: nn.Module, address: str, new: nn.Module) -> None:
    path = address[: -len(".weight")] if address.endswith(".weight") else address
    parent_path, _, child = path.rpartition(".")
    parent = module_at(model, parent_path) if parent_path else model
    if parent is None:
        raise ConfigError("targets", f"no module at '{parent_path}'")
    setattr(parent, child, new)


def _target_module(model: nn.Module, address: str) -> nn.Module:
    module = module_at(model, address)
    if module is None:
        raise ConfigError("targets", f"'{address}' does not resolve to a module")
    if isinstance(module, AdaptedLayer):
        raise AdapterError(f"'{address}' already carries an adapter")
    return module


def freeze(model: nn.Module) -> None:
    for p in model.parameters():
        p.requires_grad_(False)


def attach_lora(
    model: nn.Module,
    rank: int = 4,
    alpha: Optional[float] = None,
    targets: Optional[Sequence[str]] = None,
) -> Tuple[nn.Module, LoraAdapter]:
    """
    Wrap each target weight in a LoraLayer and freeze everything else.

    Args:
        model: Model to adapt in place
        rank: Rank r of the update
        alpha: Scale numerator; defaults to r
        targets: Weight addresses; defaults to the attention projections

    Returns:
        The adapted model and its adapter
    """
    alpha = float(rank) if alpha is None else float(alpha)
    addresses = tuple(targets) if targets is not None else tuple(resolve_adapter_targets(model, "attention"))
    if not addresses:
        raise ConfigError("targets", "no adapter targets resolved")
    layers = {address: LoraLayer(_target_module(model, address), address, rank, alpha) for address in addresses}
    freeze(model)
    for address, layer in layers.items():
        _replace(model, address, layer)
        layer.lora_A.requires_grad_(True)
        layer.lora_B.requires_grad_(True)
    adapter = LoraAdapter(rank=rank, alpha=alpha, targets=addresses, layers=layers)
    logger.info(f"Attached LoRA (r={rank}, alpha={alpha}) to {len(addresses)} weights")
    return model, adapter


def attach_svdiff(
    model: nn.Module, targets: Optional[Sequence[str]] = None
) -> Tuple[nn.Module, SvdiffAdapter]:
    """Decompose each target weight once and train only its singular-value shifts."""
    addresses = tuple(targets) if targets is not None else tuple(resolve_adapter_targets(model, "all_matrices"))
    if not addresses:
        raise ConfigError("targets", "no adapter targets resolved")
    layers = {address: SvdiffLayer(_target_module(model, address), address) for address in addresses}
    freeze(model)
    for address, layer in layers.items():
        _replace(model, address, layer)
        layer.delta.requires_grad_(True)
    logger.info(f"Attached SVDiff shifts to {len(addresses)} weights")
    return model, SvdiffAdapter(targets=addresses, layers=layers)


def adapted_layers(model: nn.Module) -> Dict[str, AdaptedLayer]:
    return {name: module for name, module in model.named_modules() if isinstance(module, AdaptedLayer)}


@torch.no_grad()
def merge_adapter(model: nn.Module) -> nn.Module:
    """Fold every attached adapter into its base weight and drop the wrappers."""
    layers = adapted_layers(model)
    if not layers:
        raise AdapterError("no adapter attached; nothing to merge")
    for name, layer in layers.items():
        base = layer.base
        base.weight.copy_(layer.effective_weight())
        _replace(model, name, base)
    logger.info(f"Merged {len(layers)} adapted weights")
    return model


def load_adapter_state(adapter: Adapter, tensors: Dict[str, torch.Tensor]) -> None:
    expected = adapter.state()
    if set(expected) != set(tensors):
        raise AdapterError("adapter checkpoint does not match the attached targets")
    with torch.no_grad():
        for layer_address, layer in adapter.layers.items():
            for name, param in layer.adapter_state().items():
                param.copy_(tensors[f"{layer_address}.{name}"])


def trainable_count(model: nn.Module, strategy: str, rank: int = 4) -> int:
    """Analytic trainable-parameter count of a strategy on an unadapted model."""
    if strategy == "full":
        return parameter_count(model)
    if strategy == "attention":
        selected = set(resolve_selector(model, "attention_only").addresses)
        return sum(p.numel() for name, p in model.named_parameters() if name in selected)
    if strategy == "lora":
        shapes = [_matrix_shape(module_at(model, a)) for a in resolve_adapter_targets(model, "attention")]  # type: ignore[arg-type]
        return sum(rank * (d + k) for d, k in shapes)
    if strategy == "svdiff":
        shapes = [_matrix_shape(module_at(model, a)) for a in resolve_adapter_targets(model, "all_matrices")]  # type: ignore[arg-type]
        return sum(min(d, k) for d, k in shapes)
    raise ConfigError("strategy", f"unknown strategy '{strategy}'")


def requires_grad_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
