import numpy as np
import pytest
import scipy.linalg
import torch

from phenldiff.config import Settings
from phenldiff.middleware.exceptions import (
    ConfigError,
    InsufficientDataError,
    NumericalError,
    UndefinedMeasureError,
)
from phenldiff.schemas import ExtractorConfig, TranslationConfig
from phenldiff.services.datasets import ImageDataset
from phenldiff.services.diffusion import ClassCondition, DiffusionStepPlan
from phenldiff.services.evaluation import (
    COVARIANCE_SHRINKAGE,
    FrechetInputs,
    SimilarityReport,
    cosine_sim,
    directional_laws,
    disjoint_subsets,
    evaluate_translation_quality,
    extract_features,
    frechet_distance,
    generalization_histogram,
    memorization_similarities,
    nearest_neighbors,
    standardize,
    train_feature_extractor,
)
from phenldiff.services.training import LatentDiffusion
from phenldiff.services.translation import PhenotypeTranslator, translate_batch


def test_disjoint_subsets_are_balanced(tiny_dataset: ImageDataset) -> None:
    a, b = disjoint_subsets(tiny_dataset, 3, seed=0)
    assert len(a) == len(b) == 3
    assert not set(a.ids) & set(b.ids)
    for subset in (a, b):
        counts = subset.counts()
        assert abs(counts["a"] - counts["b"]) <= 1
    again, _ = disjoint_subsets(tiny_dataset, 3, seed=0)
    assert again.ids == a.ids


def test_disjoint_subsets_need_enough_images(tiny_dataset: ImageDataset) -> None:
    with pytest.raises(InsufficientDataError):
        disjoint_subsets(tiny_dataset, 4, seed=0)
    with pytest.raises(ConfigError):
        disjoint_subsets(tiny_dataset, 0, seed=0)


def test_cosine_sim() -> None:
    assert cosine_sim(torch.tensor([1.0, 0.0]), torch.tensor([2.0, 0.0])) == pytest.approx(1.0)
    assert cosine_sim(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 3.0])) == pytest.approx(0.0)
    assert cosine_sim(torch.tensor([1.0, 1.0]), torch.tensor([-1.0, -1.0])) == pytest.approx(-1.0)
    with pytest.raises(UndefinedMeasureError):
        cosine_sim(torch.zeros(2), torch.ones(2))


def test_standardize_rows() -> None:
    x = torch.randn(4, 3, 5, 5, generator=torch.Generator().manual_seed(0)) * 3 + 2
    flat = standardize(x)
    assert flat.shape == (4, 75)
    assert torch.allclose(flat.mean(dim=1), torch.zeros(4, dtype=torch.float64), atol=1e-12)
    assert torch.allclose(flat.std(dim=1), torch.ones(4, dtype=torch.float64))


def test_nearest_neighbors_match_a_scan() -> None:
    rng = np.random.default_rng(0)
    queries = rng.normal(size=(7, 5))
    references = rng.normal(size=(11, 5))
    indices, sims = nearest_neighbors(torch.from_numpy(queries), torch.from_numpy(references))
    for q, i, s in zip(queries, indices, sims):
        scan = [float(q @ r / (np.linalg.norm(q) * np.linalg.norm(r))) for r in references]
        assert i == int(np.argmax(scan))
        assert s == pytest.approx(max(scan))


def test_memorized_images_score_one() -> None:
    generator = torch.Generator().manual_seed(1)
    generated = torch.rand(3, 3, 8, 8, generator=generator)
    training = torch.cat([torch.rand(5, 3, 8, 8, generator=generator), generated * 0.5 + 0.1])
    assert memorization_similarities(generated, training) == pytest.approx([1.0, 1.0, 1.0])


def test_same_model_generalizes_perfectly(tiny_model: LatentDiffusion) -> None:
    plan = DiffusionStepPlan.sampling(tiny_model.schedule.T, 4)
    values = generalization_histogram(tiny_model, tiny_model, [0, 1], ClassCondition(0), plan)
    assert values == pytest.approx([1.0, 1.0])
    with pytest.raises(InsufficientDataError):
        generalization_histogram(tiny_model, tiny_model, [], ClassCondition(0), plan)


def test_similarity_report() -> None:
    report = SimilarityReport("lora", 8, generalization=[0.2, 0.95, 0.5], memorization=[0.99, 0.91, 0.3])
    summary = report.summary()
    assert summary["generalization_median"] == pytest.approx(0.5)
    assert summary["memorization_above_0.9"] == pytest.approx(2 / 3)
    with pytest.raises(NumericalError):
        SimilarityReport("lora", 8, generalization=[1.5], memorization=[0.1])
    with pytest.raises(InsufficientDataError):
        SimilarityReport("lora", 8, generalization=[], memorization=[0.1])


def test_directional_laws() -> None:
    small = SimilarityReport("lora", 8, generalization=[0.1], memorization=[0.9])
    large = SimilarityReport("lora", 128, generalization=[0.6], memorization=[0.4])
    assert directional_laws([large, small]) == {
        "memorization_non_increasing": True,
        "generalization_non_decreasing": True,
    }
    backwards = SimilarityReport("lora", 128, generalization=[0.0], memorization=[0.95])
    assert directional_laws([small, backwards]) == {
        "memorization_non_increasing": False,
        "generalization_non_decreasing": False,
    }


def test_frechet_of_a_set_with_itself() -> None:
    x = np.random.default_rng(0).normal(size=(50, 4))
    assert frechet_distance(FrechetInputs(x, x)) == pytest.approx(0.0, abs=1e-8)


def test_frechet_one_dimensional_closed_form() -> None:
    rng = np.random.default_rng(1)
    a = rng.normal(1.0, 2.0, size=(40, 1))
    b = rng.normal(-0.5, 0.5, size=(30, 1))
    va = a.var(ddof=1) + COVARIANCE_SHRINKAGE
    vb = b.var(ddof=1) + COVARIANCE_SHRINKAGE
    expected = (a.mean() - b.mean()) ** 2 + va + vb - 2 * np.sqrt(va * vb)
    assert frechet_distance(FrechetInputs(a, b)) == pytest.approx(expected, rel=1e-9)


def test_frechet_matches_scipy_sqrtm() -> None:
    rng = np.random.default_rng(2)
    a = rng.normal(size=(60, 3)) @ rng.normal(size=(3, 3))
    b = rng.normal(size=(45, 3)) + 0.3
    shrink = COVARIANCE_SHRINKAGE * np.eye(3)
    sa = np.cov(a, rowvar=False) + shrink
    sb = np.cov(b, rowvar=False) + shrink
    covmean = scipy.linalg.sqrtm(sa @ sb).real
    expected = np.sum((a.mean(0) - b.mean(0)) ** 2) + np.trace(sa + sb - 2 * covmean)
    assert frechet_distance(FrechetInputs(a, b)) == pytest.approx(expected, rel=1e-6)


@pytest.mark.parametrize("d", [1, 8, 64])
def test_frechet_is_symmetric(d: int) -> None:
    rng = np.random.default_rng(d)
    a = rng.normal(size=(200, d))
    b = 5.0 * rng.normal(size=(150, d)) + 1.0
    ab = frechet_distance(FrechetInputs(a, b))
    ba = frechet_distance(FrechetInputs(b, a))
    assert abs(ab - ba) <= 1e-10


def test_frechet_inputs_validation() -> None:
    with pytest.raises(InsufficientDataError):
        FrechetInputs(np.zeros((1, 3)), np.zeros((5, 3)))
    inputs = FrechetInputs(np.random.default_rng(0).normal(size=(3, 8)), np.random.default_rng(1).normal(size=(9, 8)))
    assert any("n=3 < d=8" in w for w in inputs.warnings)
    assert frechet_distance(inputs) >= 0


def test_feature_extractor_training(tiny_dataset: ImageDataset, env: Settings) -> None:
    result = train_feature_extractor(tiny_dataset, ExtractorConfig(feature_dim=8, epochs=2, batch_size=4), seed=0, env=env)
    assert 0.0 <= result.accuracy <= 1.0
    assert result.conditions == ["a", "b"]
    features = extract_features(result.extractor, tiny_dataset.images)
    assert features.shape == (6, 8)

    single = tiny_dataset.restrict(["a"])
    with pytest.raises(InsufficientDataError):
        train_feature_extractor(single, ExtractorConfig(epochs=1), seed=0, env=env)


def test_translation_quality_table(tiny_model: LatentDiffusion, tiny_dataset: ImageDataset, env: Settings) -> None:
    extractor = train_feature_extractor(tiny_dataset, ExtractorConfig(feature_dim=4, epochs=1, batch_size=4), seed=0, env=env).extractor
    translator = PhenotypeTranslator(tiny_model, TranslationConfig(steps=4))
    source = tiny_dataset.of_condition("a")
    records = translate_batch(translator, source.images, source.ids, ClassCondition(0), ClassCondition(1), seed=0)
    target = torch.cat([tiny_dataset.of_condition("b").images] * 2)

    frame = evaluate_translation_quality({"inversion": records}, target, extractor, "tiny", seed=0)
    assert list(frame["method"]) == ["real_vs_real", "inversion"]
    row = frame.set_index("method").loc["inversion"]
    assert row["n"] == 3
    assert row["frechet"] >= 0
    assert row["cycle_loss"] == pytest.approx(np.mean([r.cycle_loss for r in records]))

    with pytest.raises(InsufficientDataError):
        evaluate_translation_quality({"inversion": []}, target, extractor)
