from pathlib import Path

import numpy as np
import pytest
import torch
from pydantic import ValidationError
from scipy.stats import spearmanr

from phenldiff.middleware.exceptions import ConfigError, DataError, StorageError
from phenldiff.schemas import ConditionSpec
from phenldiff.services.datasets import ingest_dataset
from phenldiff.services.quantify import direction_recovered, group_compare, measure_value
from phenldiff.services.synthcells import (
    PRESETS,
    RenderSettings,
    broad_conditions,
    cell_masks,
    generate_dataset,
    get_preset,
    render_image,
    render_layers,
    sample_params,
    synthesize,
)

PRONOUNCED = [name for name in PRESETS if not name.endswith("-subtle")]


def _values(preset_name: str, n: int = 16, size: int = 64):
    preset = get_preset(preset_name)
    dataset = synthesize(preset.conditions, n, seed=0, size=size, name=preset_name)
    out = {}
    for condition in (preset.source, preset.target):
        subset = dataset.of_condition(condition)
        out[condition] = [
            measure_value(image, preset.primary_measurement, preset.measurement_channel)
            for image in subset.images
        ]
    return preset, out


def test_presets_pair_untreated_with_treated() -> None:
    for preset in PRESETS.values():
        assert [c.name for c in preset.conditions] == ["untreated", "treated"]
        assert preset.expected_direction in ("increase", "decrease")
    with pytest.raises(ConfigError):
        get_preset("mitosis")


def test_condition_spec_validation() -> None:
    with pytest.raises(ValidationError):
        ConditionSpec(name="x", cell_count=(5, 2))
    with pytest.raises(ValidationError):
        ConditionSpec(name="x", translocation_ratio=(0.5, 1.5))
    with pytest.raises(ValidationError):
        ConditionSpec(name="x", channels={"marker": 1})


def test_sampled_nuclei_do_not_overlap() -> None:
    spec = get_preset("toxicity").condition("untreated")
    params = sample_params(spec, np.random.default_rng(0), size=64)
    assert spec.cell_count[0] <= params.cell_count <= spec.cell_count[1]
    assert len(params.centers) == len(params.radii) == params.cell_count
    for i in range(params.cell_count):
        for j in range(i):
            gap = np.hypot(*np.subtract(params.centers[i], params.centers[j]))
            assert gap >= params.radii[i] + params.radii[j]


def test_crowded_canvas_is_rejected() -> None:
    spec = ConditionSpec(name="crowded", cell_count=(40, 40), radius=(6.0, 6.0))
    with pytest.raises(DataError):
        sample_params(spec, np.random.default_rng(0), size=32)


def test_marker_mass_splits_by_translocation_ratio() -> None:
    spec = get_preset("translocation").condition("treated")
    params = sample_params(spec, np.random.default_rng(1))
    layers = render_layers(params, spec)
    nucleus, cytoplasm = cell_masks(params, 64)
    marker = layers["marker"]
    share = marker[nucleus].sum() / (marker[nucleus].sum() + marker[cytoplasm].sum())
    # clipping at 1.0 only ever lowers the nuclear share
    assert share <= params.translocation_ratio + 1e-9
    assert not (nucleus & cytoplasm).any()


def test_render_is_deterministic_and_in_range() -> None:
    spec = get_preset("neuro").condition("untreated")
    params = sample_params(spec, np.random.default_rng(2))
    image = render_image(params, spec)
    assert image.shape == (3, 64, 64)
    assert image.dtype == torch.float32
    assert image.min() >= -1 and image.max() <= 1
    assert torch.equal(image, render_image(params, spec))
    clean = render_image(params, spec, render=RenderSettings(background=0.0, noise_sigma=0.0, blur_sigma=0.0))
    assert float(clean[2].min()) == -1.0


def test_synthesize_is_a_function_of_its_seed() -> None:
    preset = get_preset("golgi")
    a = synthesize(preset.conditions, 3, seed=4, size=32)
    b = synthesize(preset.conditions, 3, seed=4, size=32)
    c = synthesize(preset.conditions, 3, seed=5, size=32)
    assert torch.equal(a.images, b.images)
    assert not torch.equal(a.images, c.images)
    assert a.conditions == ["treated", "untreated"]
    assert a.ids[0] == "treated/0000"
    assert a.counts() == {"treated": 3, "untreated": 3}
    assert all(p is not None for p in a.params)


def test_duplicate_condition_names() -> None:
    spec = ConditionSpec(name="same")
    with pytest.raises(ConfigError):
        synthesize([spec, spec], 1, seed=0)


@pytest.mark.parametrize("preset_name", ["translocation", "toxicity"])
def test_pronounced_presets_show_their_phenotype(preset_name: str) -> None:
    preset, values = _values(preset_name)
    alternative = "less" if preset.expected_direction == "increase" else "greater"
    result = group_compare(values[preset.source], values[preset.target], alternative=alternative)
    assert result.p_value < 0.01


@pytest.mark.slow
@pytest.mark.parametrize("preset_name", PRONOUNCED)
def test_every_pronounced_preset_separates_at_full_size(preset_name: str) -> None:
    preset, values = _values(preset_name, n=100)
    result = group_compare(values[preset.source], values[preset.target])
    assert result.p_value < 1e-3
    assert direction_recovered(result, preset.expected_direction, alpha=1e-3)


def test_nuclear_ratio_tracks_translocation() -> None:
    spec = ConditionSpec(name="sweep", translocation_ratio=(0.1, 0.9), marker_level=(0.25, 0.3))
    dataset = synthesize([spec], 40, seed=2, size=64)
    truth = [p.translocation_ratio for p in dataset.params]
    measured = [measure_value(image, "nuclear_cytoplasm_ratio", 1) for image in dataset.images]
    assert all(v is not None for v in measured)
    assert spearmanr(truth, measured).statistic > 0.9


def test_broad_conditions_cover_every_pronounced_preset() -> None:
    groups = broad_conditions()
    names = {g.name for g in groups}
    assert len(groups) == 8
    assert "golgi-treated" in names and "neuro-untreated" in names
    narrow = get_preset("translocation").condition("treated")
    broad = next(g for g in groups if g.name == "translocation-treated")
    assert broad.translocation_ratio[0] < narrow.translocation_ratio[0]
    assert broad.translocation_ratio[1] <= 1.0


def test_generated_dataset_matches_memory(tmp_path: Path) -> None:
    preset = get_preset("translocation")
    manifest = generate_dataset(preset.conditions, 2, seed=1, out_dir=tmp_path / "data", size=32)
    assert len(manifest.entries) == 4
    assert (tmp_path / "data" / "untreated" / "0001.png").exists()

    ingested = ingest_dataset(tmp_path / "data")
    in_memory = synthesize(preset.conditions, 2, seed=1, size=32)
    assert ingested.ids == in_memory.ids
    assert torch.equal(ingested.images, in_memory.images)
    assert ingested.params[0] == in_memory.params[0]

    with pytest.raises(StorageError):
        generate_dataset(preset.conditions, 2, seed=1, out_dir=tmp_path / "data", size=32)

    again = generate_dataset(preset.conditions, 2, seed=1, out_dir=tmp_path / "again", size=32)
    assert [e.sha256 for e in again.entries] == [e.sha256 for e in manifest.entries]
    assert again.model_dump() == manifest.model_dump()
