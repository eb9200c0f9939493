import copy

import pytest
import torch
import torch.nn as nn

from phenldiff.middleware.exceptions import AdapterError, ConfigError
from phenldiff.models import ClassConditionalUNet, parameter_count
from phenldiff.schemas import DenoiserSpec
from phenldiff.services.adapters import (
    LoraLayer,
    SvdiffLayer,
    adapted_layers,
    attach_lora,
    attach_svdiff,
    load_adapter_state,
    merge_adapter,
    requires_grad_count,
    trainable_count,
)


def _outputs(model: nn.Module) -> torch.Tensor:
    generator = torch.Generator().manual_seed(11)
    z = torch.randn(3, *model.latent_shape, generator=generator)
    with torch.no_grad():
        return model(z, torch.tensor([3, 20, 45]), torch.tensor([0, 1, 2]))


def test_lora_starts_as_identity(denoiser: ClassConditionalUNet) -> None:
    reference = _outputs(denoiser)
    model, adapter = attach_lora(copy.deepcopy(denoiser), rank=2)
    assert len(adapter.layers) == 4
    assert torch.allclose(_outputs(model), reference, atol=1e-6)


def test_lora_effective_weight() -> None:
    torch.manual_seed(0)
    base = nn.Linear(6, 5)
    layer = LoraLayer(base, "proj.weight", rank=2, alpha=3.0)
    with torch.no_grad():
        layer.lora_B.copy_(torch.randn(5, 2))
    expected = base.weight + 1.5 * layer.lora_B @ layer.lora_A
    assert torch.allclose(layer.effective_weight(), expected)
    x = torch.randn(4, 6)
    assert torch.allclose(layer(x), x @ expected.T + base.bias, atol=1e-6)


def test_lora_rank_bounds() -> None:
    with pytest.raises(ConfigError) as err:
        LoraLayer(nn.Linear(4, 4), "proj.weight", rank=4, alpha=4.0)
    assert err.value.field == "rank"
    with pytest.raises(ConfigError):
        LoraLayer(nn.Linear(4, 4), "proj.weight", rank=0, alpha=1.0)


def test_lora_freezes_everything_else(denoiser: ClassConditionalUNet) -> None:
    model, adapter = attach_lora(copy.deepcopy(denoiser), rank=4)
    trainable = {name for name, p in model.named_parameters() if p.requires_grad}
    assert trainable == {f"{a[: -len('.weight')]}.lora_{m}" for a in adapter.targets for m in "AB"}
    assert requires_grad_count(model) == trainable_count(denoiser, "lora", rank=4)


def test_merge_matches_adapted_output(denoiser: ClassConditionalUNet) -> None:
    model, adapter = attach_lora(copy.deepcopy(denoiser), rank=2)
    with torch.no_grad():
        for layer in adapter.layers.values():
            layer.lora_B.normal_(std=0.1)
    adapted = _outputs(model)
    merged = merge_adapter(model)
    assert not adapted_layers(merged)
    assert torch.allclose(_outputs(merged), adapted, atol=1e-5)
    with pytest.raises(AdapterError):
        merge_adapter(merged)


def test_attaching_twice_is_rejected(denoiser: ClassConditionalUNet) -> None:
    model, _ = attach_lora(copy.deepcopy(denoiser), rank=2)
    with pytest.raises(AdapterError):
        attach_lora(model, rank=2)


def test_svdiff_starts_as_identity(denoiser: ClassConditionalUNet) -> None:
    reference = _outputs(denoiser)
    model, adapter = attach_svdiff(copy.deepcopy(denoiser))
    assert all(isinstance(layer, SvdiffLayer) for layer in adapter.layers.values())
    assert torch.allclose(_outputs(model), reference, atol=1e-4)
    assert requires_grad_count(model) == trainable_count(denoiser, "svdiff")


def test_svdiff_shift_clamps_at_zero() -> None:
    torch.manual_seed(0)
    layer = SvdiffLayer(nn.Linear(5, 3), "proj.weight")
    with torch.no_grad():
        layer.delta.fill_(-1e3)
    assert torch.equal(layer.shifted_singular_values(), torch.zeros(3))
    assert torch.count_nonzero(layer.effective_weight()) == 0


def test_svdiff_unit_shift_on_a_diagonal_matrix() -> None:
    linear = nn.Linear(2, 2, bias=False)
    with torch.no_grad():
        linear.weight.copy_(torch.diag(torch.tensor([3.0, 1.0])))
    layer = SvdiffLayer(linear, "proj.weight")
    assert torch.allclose(layer.S, torch.tensor([3.0, 1.0]))
    with torch.no_grad():
        layer.delta.fill_(1.0)
    # singular values 3, 1 shift to 4, 2 along the same singular vectors
    assert torch.allclose(layer.effective_weight(), torch.diag(torch.tensor([4.0, 2.0])), atol=1e-6)
    x = torch.tensor([[1.0, -2.0]])
    assert torch.allclose(layer(x), torch.tensor([[4.0, -4.0]]), atol=1e-6)


def test_svdiff_conv_kernel_is_a_matrix() -> None:
    torch.manual_seed(0)
    layer = SvdiffLayer(nn.Conv2d(2, 4, 3), "conv.weight")
    # (4, 2*3*3) has rank at most 4
    assert layer.delta.shape == (4,)
    assert torch.allclose(layer.effective_weight(), layer.base.weight, atol=1e-5)


def test_adapter_state_roundtrip_and_mismatch(denoiser: ClassConditionalUNet) -> None:
    model, adapter = attach_lora(copy.deepcopy(denoiser), rank=2)
    with torch.no_grad():
        for layer in adapter.layers.values():
            layer.lora_B.normal_()
    state = {k: v.clone() for k, v in adapter.state().items()}

    other, other_adapter = attach_lora(copy.deepcopy(denoiser), rank=2)
    load_adapter_state(other_adapter, state)
    assert torch.allclose(_outputs(other), _outputs(model))

    state.pop(next(iter(state)))
    with pytest.raises(AdapterError):
        load_adapter_state(other_adapter, state)


def test_trainable_count_ordering_on_default_model() -> None:
    torch.manual_seed(0)
    model = ClassConditionalUNet(DenoiserSpec(), (4, 16, 16))
    counts = {s: trainable_count(model, s) for s in ("lora", "svdiff", "attention", "full")}
    assert counts["lora"] < counts["svdiff"] < counts["attention"] < counts["full"]
    # four 64x64 projections in the middle block
    assert counts["lora"] == 4 * 4 * (64 + 64)
    assert counts["full"] == parameter_count(model)


def test_trainable_count_rejects_unknown_strategy(denoiser: ClassConditionalUNet) -> None:
    with pytest.raises(ConfigError):
        trainable_count(denoiser, "dreambooth")
