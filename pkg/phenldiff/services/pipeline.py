"""
Experiment stages behind the CLI commands.

Each stage writes its artifacts under a prefix of a run directory, records
seeds, hashes and warnings in the run manifest and returns the in-memory
objects the next stage needs, so `end_to_end` can chain them in one run.
"""

import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch

from phenldiff.checkpoints import checkpoint_hash, load_codec, load_denoiser, save_codec, save_denoiser, save_module
from phenldiff.config import Settings, settings
from phenldiff.middleware.exceptions import ConfigError, StageError
from phenldiff.models import Codec
from phenldiff.schemas import ExperimentConfig, FinetuneConfig, GroupComparison, MeasurementName
from phenldiff.services.datasets import ImageDataset, ingest_dataset
from phenldiff.services.diffusion import ClassCondition, DiffusionStepPlan, schedule_from_config
from phenldiff.services.evaluation import (
    SimilarityReport,
    directional_laws,
    disjoint_subsets,
    evaluate_translation_quality,
    generalization_histogram,
    memorization_histogram,
    train_feature_extractor,
)
from phenldiff.services.finetune import FinetuneResult, finetune_model, save_finetuned
from phenldiff.services.quantify import direction_recovered, group_compare, measure_images, rows_frame
from phenldiff.services.reports import (
    load_records,
    method_key,
    plot_boxplot,
    plot_losses,
    plot_similarity_grid,
    read_table,
    save_grid,
    save_records,
    save_sample_grid,
    save_translation_grid,
    write_table,
)
from phenldiff.services.runs import RunDirectory, read_run_manifest, verify_run
from phenldiff.services.synthcells import Direction, broad_conditions, generate_dataset, get_preset, synthesize
from phenldiff.services.training import (
    LatentDiffusion,
    derive_seed,
    make_generator,
    pretrain_base,
    train_codec,
)
from phenldiff.services.translation import PhenotypeTranslator, TranslationRecord, translate_batch

logger = logging.getLogger(__name__)

ALPHA = 0.01
SAMPLES_PER_ROW = 8


def _rel(prefix: str, name: str) -> str:
    return f"{prefix}/{name}" if prefix else name


@contextmanager
def stage(name: str) -> Iterator[None]:
    """Attribute any failure inside the block to a named stage."""
    logger.info(f"Stage {name} started", extra={"stage": name})
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        logger.warning(f"Stage {name} failed: {exc}", extra={"stage": name})
        raise StageError(name, exc) from exc
    logger.info(f"Stage {name} finished", extra={"stage": name})


# Measurement definition
@dataclass(frozen=True)
class MeasurementPlan:
    """Which measurement shows the phenotype and which way it should move from source to target."""

    measurement: MeasurementName
    channel: int
    direction: Direction
    source: str
    target: str
    nucleus_channel: int = 2

    @property
    def alternative(self) -> str:
        # group A = source, group B = target
        return "less" if self.direction == "increase" else "greater"


def measurement_plan(
    config: ExperimentConfig,
    measurement: Optional[str] = None,
    channel: Optional[int] = None,
    direction: Optional[str] = None,
    source: Optional[str] = None,
    target: Optional[str] = None,
) -> MeasurementPlan:
    """Preset defaults, overridden field by field; datasets without a preset must name every field."""
    base: Dict[str, Any] = {}
    if config.dataset.preset is not None:
        preset = get_preset(config.dataset.preset)
        base = {
            "measurement": preset.primary_measurement,
            "channel": preset.measurement_channel,
            "direction": preset.expected_direction,
            "source": preset.source,
            "target": preset.target,
        }
    overrides = {
        "measurement": measurement,
        "channel": channel,
        "direction": direction,
        "source": source,
        "target": target,
    }
    merged = {**base, **{k: v for k, v in overrides.items() if v is not None}}
    for name in overrides:
        if name not in merged:
            raise ConfigError(name, f"'{name}' is required when the dataset has no preset")
    if merged["direction"] not in ("increase", "decrease"):
        raise ConfigError("direction", f"expected increase or decrease, got '{merged['direction']}'")
    if merged["source"] == merged["target"]:
        raise ConfigError("target", "source and target conditions must differ")
    return MeasurementPlan(**merged)


# Datasets
def narrow_dataset(
    config: ExperimentConfig, seed: int, data: Optional[Path] = None, min_per_condition: int = 0
) -> ImageDataset:
    """The fine-tuning dataset: a folder when given, otherwise the configured preset rendered in memory."""
    path = data if data is not None else config.dataset.path
    if path is not None:
        return ingest_dataset(Path(path))
    preset = get_preset(config.dataset.preset)  # type: ignore[arg-type]
    return synthesize(
        preset.conditions,
        max(config.dataset.n_per_condition, min_per_condition),
        derive_seed(seed, "narrow"),
        size=config.codec.image_size,
        name=preset.name,
    )


def broad_dataset(config: ExperimentConfig, seed: int, data: Optional[Path] = None) -> ImageDataset:
    if data is not None:
        return ingest_dataset(Path(data))
    return synthesize(
        broad_conditions(),
        config.dataset.broad_n_per_group,
        derive_seed(seed, "broad"),
        size=config.codec.image_size,
        name="broad",
    )


def load_base(codec_path: Path, base_path: Path, env: Optional[Settings] = None) -> LatentDiffusion:
    env = env or settings
    device = torch.device(env.DEVICE)
    codec = load_codec(codec_path)
    denoiser, schedule_config, _ = load_denoiser(base_path)
    return LatentDiffusion(codec.to(device), denoiser.to(device), schedule_from_config(schedule_config))


def _record_dataset(run: RunDirectory, role: str, dataset: ImageDataset) -> None:
    run.record_dataset(f"{role}:{dataset.name}", dataset.content_hash)


# Stages
def synth_stage(
    run: RunDirectory,
    config: ExperimentConfig,
    seed: int,
    preset: Optional[str] = None,
    n_per_condition: Optional[int] = None,
    broad: bool = False,
    prefix: str = "",
) -> ImageDataset:
    """Render a preset (or the broad distribution) to a folder-per-condition dataset and ingest it back."""
    out_dir = run.folder(_rel(prefix, "dataset"))
    if broad:
        conditions = broad_conditions()
        name = "broad"
        n = n_per_condition or config.dataset.broad_n_per_group
    else:
        chosen = get_preset(preset or config.dataset.preset or "")
        conditions = list(chosen.conditions)
        name = chosen.name
        n = n_per_condition or config.dataset.n_per_condition
    generate_dataset(conditions, n, seed, out_dir, size=config.codec.image_size, name=name)
    dataset = ingest_dataset(out_dir)
    run.record_seed("synth", seed)
    _record_dataset(run, "synth", dataset)
    run.summarize(dataset=name, counts=dataset.counts(), dataset_path=str(out_dir))
    return dataset


def codec_stage(
    run: RunDirectory, config: ExperimentConfig, seed: int, dataset: ImageDataset, env: Settings, prefix: str = ""
) -> Tuple[Codec, Path]:
    result = train_codec(dataset, config.codec, config.codec_training, seed, env)
    path = run.folder(_rel(prefix, "checkpoints/codec"))
    save_codec(path, result.codec, seed, validation_error=result.validation_error, dataset_hash=dataset.content_hash)
    write_table(pd.DataFrame({"epoch": range(len(result.epoch_losses)), "loss": result.epoch_losses}),
                run.file(_rel(prefix, "codec_losses.csv")))
    run.record_seed("codec", seed)
    _record_dataset(run, "codec", dataset)
    run.record_checkpoint("codec", path)
    run.extend_warnings(result.warnings)
    run.summarize(codec_validation_error=result.validation_error, codec_validation_images=result.n_validation)
    return result.codec, path


def _sampling_plan(config: ExperimentConfig, model: LatentDiffusion) -> DiffusionStepPlan:
    return DiffusionStepPlan.sampling(model.schedule.T, min(config.evaluation.sampling_steps, model.schedule.T))


def pretrain_stage(
    run: RunDirectory,
    config: ExperimentConfig,
    seed: int,
    codec: Codec,
    dataset: ImageDataset,
    env: Settings,
    prefix: str = "",
) -> Tuple[LatentDiffusion, Path]:
    schedule = schedule_from_config(config.schedule)
    result = pretrain_base(dataset, codec, config.denoiser, schedule, config.pretrain, seed, env)
    path = run.folder(_rel(prefix, "checkpoints/base"))
    save_denoiser(
        path, result.denoiser, config.schedule, config.pretrain.model_dump(mode="json"), seed,
        dataset_hash=dataset.content_hash,
    )
    write_table(pd.DataFrame({"step": range(len(result.losses)), "loss": result.losses}),
                run.file(_rel(prefix, "losses.csv")))
    plot_losses({"pretrain": result.losses}, run.file(_rel(prefix, "losses.png")), "pretraining loss")

    model = LatentDiffusion(codec, result.denoiser, schedule)
    plan = _sampling_plan(config, model)
    samples = [
        model.generate(ClassCondition(slot), [derive_seed(seed, "samples", slot, i) for i in range(SAMPLES_PER_ROW)], plan).cpu()
        for slot in range(config.denoiser.num_classes)
    ]
    save_grid(torch.cat(samples), run.file(_rel(prefix, "samples.png")), ncol=SAMPLES_PER_ROW)

    run.record_seed("pretrain", seed)
    _record_dataset(run, "pretrain", dataset)
    run.record_checkpoint("base", path)
    run.summarize(pretrain_final_loss=float(np.mean(result.losses[-max(1, len(result.losses) // 10):])))
    return model, path


def strategy_config(base: FinetuneConfig, strategy: str) -> FinetuneConfig:
    """The fine-tune config for one strategy column; 'scratch' is full fine-tuning from random weights."""
    document = base.model_dump(exclude={"strategy", "rank", "alpha", "learning_rate", "from_scratch"})
    if strategy == base.strategy:
        return base
    if strategy == "scratch":
        return FinetuneConfig.model_validate({**document, "strategy": "full", "from_scratch": True})
    return FinetuneConfig.model_validate({**document, "strategy": strategy})


def finetune_stage(
    run: RunDirectory,
    config: ExperimentConfig,
    seed: int,
    base: LatentDiffusion,
    base_path: Optional[Path],
    dataset: ImageDataset,
    finetune_config: FinetuneConfig,
    env: Settings,
    prefix: str = "",
) -> Tuple[LatentDiffusion, FinetuneResult, Path]:
    result = finetune_model(base, dataset, finetune_config, seed, env)
    path = run.folder(_rel(prefix, "checkpoints/finetuned"))
    save_finetuned(path, result, finetune_config, config.schedule, seed, base_path, dataset.content_hash)
    write_table(pd.DataFrame({"step": range(len(result.losses)), "loss": result.losses}),
                run.file(_rel(prefix, "losses.csv")))
    plot_losses({result.strategy: result.losses}, run.file(_rel(prefix, "losses.png")), "fine-tuning loss")

    model = LatentDiffusion(base.codec, result.denoiser, base.schedule)
    plan = _sampling_plan(config, model)
    generated, real = {}, {}
    for slot, name in enumerate(result.conditions):
        seeds = [derive_seed(seed, "samples", name, i) for i in range(SAMPLES_PER_ROW)]
        generated[name] = model.generate(ClassCondition(slot), seeds, plan).cpu()
        real[name] = dataset.of_condition(name).images[:SAMPLES_PER_ROW]
    save_sample_grid(generated, real, run.file(_rel(prefix, "samples.png")), SAMPLES_PER_ROW)

    first, last = result.loss_windows
    run.record_seed("finetune", seed)
    _record_dataset(run, "finetune", dataset)
    run.record_checkpoint("finetuned", path)
    run.extend_warnings(result.warnings)
    run.summarize(
        strategy=result.strategy,
        from_scratch=result.from_scratch,
        conditions=result.conditions,
        trainable_parameters=result.trainable,
        loss_first_window=first,
        loss_last_window=last,
    )
    return model, result, path


@dataclass
class TranslationOutcome:
    records: Dict[str, List[TranslationRecord]]
    measurements: pd.DataFrame
    comparisons: Dict[str, GroupComparison]
    recovered: Dict[str, bool]
    primary: str
    warnings: List[str] = field(default_factory=list)

    @property
    def headline(self) -> str:
        comparison = self.comparisons[self.primary]
        p = comparison.p_value
        verdict = "yes" if self.recovered[self.primary] else "no"
        return f"phenotype recovered: {verdict}, " + (f"p < {ALPHA}" if p < ALPHA else f"p = {p:.3g}")


def _measure_group(
    images: Sequence[torch.Tensor], ids: Sequence[str], group: str, plan: MeasurementPlan
) -> pd.DataFrame:
    rows = measure_images(images, ids, group, plan.measurement, plan.channel, plan.nucleus_channel)
    return rows_frame(rows).rename(columns={"condition": "group"})


def _compare(frame: pd.DataFrame, group_a: str, group_b: str, plan: MeasurementPlan) -> GroupComparison:
    a = [None if pd.isna(v) else float(v) for v in frame.loc[frame["group"] == group_a, "value"]]
    b = [None if pd.isna(v) else float(v) for v in frame.loc[frame["group"] == group_b, "value"]]
    return group_compare(a, b, alternative=plan.alternative)  # type: ignore[arg-type]


def comparisons_frame(comparisons: Dict[str, GroupComparison], recovered: Dict[str, bool]) -> pd.DataFrame:
    rows = []
    for name in sorted(comparisons):
        c = comparisons[name]
        rows.append(
            {
                "comparison": name,
                "n_a": c.group_a.n,
                "median_a": c.group_a.median,
                "iqr_a": c.group_a.iqr,
                "n_b": c.group_b.n,
                "median_b": c.group_b.median,
                "iqr_b": c.group_b.iqr,
                "u_statistic": c.u_statistic,
                "p_value": c.p_value,
                "alternative": c.alternative,
                "effect_size": c.effect_size,
                "recovered": recovered[name],
                "warnings": "; ".join(c.warnings),
            }
        )
    return pd.DataFrame(rows)


def translate_stage(
    run: RunDirectory,
    config: ExperimentConfig,
    seed: int,
    model: LatentDiffusion,
    conditions: Sequence[str],
    dataset: ImageDataset,
    plan: MeasurementPlan,
    baseline: bool = True,
    guidance_sweep: Optional[Sequence[float]] = None,
    n_translate: Optional[int] = None,
    prefix: str = "",
) -> TranslationOutcome:
    """
    Translate n source images to the target condition at every guidance
    scale, optionally alongside the random-latent baseline, and compare the
    phenotype measurement of real and translated groups.
    """
    slots = {name: i for i, name in enumerate(conditions)}
    for name in (plan.source, plan.target):
        if name not in slots:
            raise ConfigError("condition", f"'{name}' is not registered with the model (registered: {list(conditions)})")
    source, target = ClassCondition(slots[plan.source]), ClassCondition(slots[plan.target])

    pool = dataset.of_condition(plan.source)
    n = min(n_translate or config.translation.n_translate, len(pool))
    pick = torch.randperm(len(pool), generator=make_generator(derive_seed(seed, "translate-pick")))[:n]
    chosen = pool.subset(sorted(pick.tolist()))

    translator = PhenotypeTranslator(model, config.translation)
    scales = [config.translation.guidance_scale]
    for scale in guidance_sweep if guidance_sweep is not None else config.translation.guidance_sweep:
        if scale not in scales:
            scales.append(scale)

    records: Dict[str, List[TranslationRecord]] = {}
    for scale in scales:
        records[method_key("inversion", scale)] = translate_batch(
            translator, chosen.images, chosen.ids, source, target, seed, "inversion", scale
        )
    if baseline:
        records[method_key("random_latent", scales[0])] = translate_batch(
            translator, chosen.images, chosen.ids, source, target, seed, "random_latent", scales[0]
        )
    for batch in records.values():
        save_records(batch, run.folder(_rel(prefix, "records")))

    real_source = dataset.of_condition(plan.source)
    real_target = dataset.of_condition(plan.target)
    frames = [
        _measure_group(list(real_source.images), real_source.ids, f"real:{plan.source}", plan),
        _measure_group(list(real_target.images), real_target.ids, f"real:{plan.target}", plan),
        _measure_group(list(chosen.images), chosen.ids, "translation_source", plan),
    ]
    for key, batch in records.items():
        frames.append(_measure_group([r.translated for r in batch], [r.image_id for r in batch], f"translated:{key}", plan))
    measurements = pd.concat(frames, ignore_index=True)

    comparisons = {"real": _compare(measurements, f"real:{plan.source}", f"real:{plan.target}", plan)}
    for key in records:
        comparisons[key] = _compare(measurements, "translation_source", f"translated:{key}", plan)
    recovered = {name: direction_recovered(c, plan.direction, ALPHA) for name, c in comparisons.items()}

    primary = method_key("inversion", scales[0])
    outcome = TranslationOutcome(records, measurements, comparisons, recovered, primary)
    for c in comparisons.values():
        outcome.warnings.extend(c.warnings)

    write_table(measurements, run.file(_rel(prefix, "measurements.csv")))
    write_table(comparisons_frame(comparisons, recovered), run.file(_rel(prefix, "comparisons.csv")))
    cycle_rows = [
        {"method": key, "image_id": r.image_id, "guidance_scale": r.guidance_scale, "cycle_loss": r.cycle_loss}
        for key, batch in records.items()
        for r in batch
    ]
    write_table(pd.DataFrame(cycle_rows), run.file(_rel(prefix, "translations.csv")))
    save_translation_grid(records[primary], run.file(_rel(prefix, "translation_grid.png")))
    plot_boxplot(
        {name: frame["value"].tolist() for name, frame in measurements.groupby("group", sort=True)},
        run.file(_rel(prefix, "measurements.png")),
        title=f"{plan.measurement} (channel {plan.channel})",
        ylabel=plan.measurement,
    )

    run.record_seed("translate", seed)
    _record_dataset(run, "translate", dataset)
    run.extend_warnings(outcome.warnings)
    run.summarize(
        headline=outcome.headline,
        measurement=plan.measurement,
        direction=plan.direction,
        translated_p_value=comparisons[primary].p_value,
        translated_effect_size=comparisons[primary].effect_size,
        real_p_value=comparisons["real"].p_value,
        real_effect_size=comparisons["real"].effect_size,
        real_and_translated_agree=bool(
            np.sign(comparisons["real"].effect_size) == np.sign(comparisons[primary].effect_size)
        ),
        recovered=recovered,
        mean_cycle_loss={key: float(np.mean([r.cycle_loss for r in batch])) for key, batch in records.items()},
    )
    logger.info(outcome.headline, extra={"stage": "translate", "measurement": plan.measurement})
    return outcome


def measure_stage(
    run: RunDirectory, dataset: ImageDataset, plan: MeasurementPlan, prefix: str = ""
) -> Tuple[pd.DataFrame, GroupComparison]:
    """Measure every image of a dataset and compare the source and target conditions."""
    frames = [
        _measure_group(list(dataset.of_condition(name).images), dataset.of_condition(name).ids, name, plan)
        for name in dataset.conditions
    ]
    measurements = pd.concat(frames, ignore_index=True)
    comparison = _compare(measurements, plan.source, plan.target, plan)
    recovered = direction_recovered(comparison, plan.direction, ALPHA)
    write_table(measurements, run.file(_rel(prefix, "measurements.csv")))
    write_table(comparisons_frame({"real": comparison}, {"real": recovered}), run.file(_rel(prefix, "comparisons.csv")))
    plot_boxplot(
        {name: frame["value"].tolist() for name, frame in measurements.groupby("group", sort=True)},
        run.file(_rel(prefix, "measurements.png")),
        title=f"{plan.measurement} (channel {plan.channel})",
        ylabel=plan.measurement,
    )
    _record_dataset(run, "measure", dataset)
    run.extend_warnings(comparison.warnings)
    run.summarize(
        measurement=plan.measurement,
        p_value=comparison.p_value,
        effect_size=comparison.effect_size,
        direction=plan.direction,
        direction_recovered=recovered,
    )
    return measurements, comparison


def _similarity_frame(reports: Sequence[SimilarityReport]) -> pd.DataFrame:
    rows = []
    for report in reports:
        for kind in ("generalization", "memorization"):
            rows.extend(
                {"strategy": report.strategy, "subset_size": report.subset_size, "kind": kind, "value": v}
                for v in getattr(report, kind)
            )
    return pd.DataFrame(rows, columns=["strategy", "subset_size", "kind", "value"])


def reports_from_frame(frame: pd.DataFrame, bins: int = 40) -> List[SimilarityReport]:
    reports = []
    for (strategy, size), group in frame.groupby(["strategy", "subset_size"], sort=False):
        reports.append(
            SimilarityReport(
                strategy=str(strategy),
                subset_size=int(size),
                generalization=group.loc[group["kind"] == "generalization", "value"].astype(float).tolist(),
                memorization=group.loc[group["kind"] == "memorization", "value"].astype(float).tolist(),
                bins=bins,
            )
        )
    return reports


def eval_mem_stage(
    run: RunDirectory,
    config: ExperimentConfig,
    seed: int,
    base: LatentDiffusion,
    dataset: ImageDataset,
    sizes: Sequence[int],
    strategies: Sequence[str],
    env: Settings,
    prefix: str = "",
) -> List[SimilarityReport]:
    """
    For every subset size, fine-tune two models per strategy on disjoint
    subsets and collect same-seed cross-model similarities and nearest
    training-image similarities.
    """
    evaluation = config.evaluation
    plan = _sampling_plan(config, base)
    n_cond = len(dataset.conditions)
    gen_per_cond = max(1, evaluation.n_seeds // n_cond)
    mem_per_cond = max(1, evaluation.n_samples // n_cond)

    reports = []
    for size in sizes:
        subset_a, subset_b = disjoint_subsets(dataset, size, derive_seed(seed, "eval-mem"))
        run.record_dataset(f"eval-mem:A{size}", subset_a.content_hash)
        run.record_dataset(f"eval-mem:B{size}", subset_b.content_hash)
        for strategy in strategies:
            ft_config = strategy_config(config.finetune, strategy)
            train_seed = derive_seed(seed, "eval-mem", strategy, size)
            model_a = finetune_model(base, subset_a, ft_config, train_seed, env)
            model_b = finetune_model(base, subset_b, ft_config, train_seed, env)
            run.extend_warnings(model_a.warnings + model_b.warnings)
            diffusion_a = LatentDiffusion(base.codec, model_a.denoiser, base.schedule)
            diffusion_b = LatentDiffusion(base.codec, model_b.denoiser, base.schedule)

            generalization: List[float] = []
            memorization: List[float] = []
            for slot in range(len(model_a.conditions)):
                cond = ClassCondition(slot)
                gen_seeds = [derive_seed(seed, "generalization", slot, i) for i in range(gen_per_cond)]
                mem_seeds = [derive_seed(seed, "memorization", slot, i) for i in range(mem_per_cond)]
                generalization += generalization_histogram(diffusion_a, diffusion_b, gen_seeds, cond, plan)
                memorization += memorization_histogram(diffusion_a, subset_a.images, mem_seeds, cond, plan)
            report = SimilarityReport(strategy, size, generalization, memorization, evaluation.similarity_bins)
            reports.append(report)
            logger.info(
                f"eval-mem {strategy} n={size}: {report.summary()}",
                extra={"stage": "eval-mem", "strategy": strategy, "subset_size": size},
            )

    write_table(_similarity_frame(reports), run.file(_rel(prefix, "similarities.csv")))
    write_table(pd.DataFrame([r.summary() for r in reports]), run.file(_rel(prefix, "similarity_stats.csv")))
    plot_similarity_grid(reports, run.file(_rel(prefix, "similarity_grid.png")))
    laws = {
        strategy: directional_laws([r for r in reports if r.strategy == strategy])
        for strategy in strategies
    }
    run.record_seed("eval-mem", seed)
    _record_dataset(run, "eval-mem", dataset)
    run.summarize(sizes=list(sizes), strategies=list(strategies), directional_laws=laws)
    return reports


def eval_quality_stage(
    run: RunDirectory,
    config: ExperimentConfig,
    seed: int,
    dataset: ImageDataset,
    translated: Dict[str, List[TranslationRecord]],
    plan: MeasurementPlan,
    env: Settings,
    prefix: str = "",
) -> pd.DataFrame:
    """Frechet distance, cycle loss and identity preservation per translation method."""
    extractor = train_feature_extractor(dataset, config.extractor, derive_seed(seed, "extractor"), env)
    path = run.folder(_rel(prefix, "checkpoints/extractor"))
    save_module(
        path, "extractor", extractor.extractor,
        spec={"extractor": config.extractor.model_dump(mode="json"), "conditions": extractor.conditions},
        seed=seed,
        metadata={"accuracy": extractor.accuracy, "dataset_hash": dataset.content_hash},
    )
    run.record_checkpoint("extractor", path)
    extractor_hash = checkpoint_hash(path)

    real_target = dataset.of_condition(plan.target).images
    table = evaluate_translation_quality(
        translated, real_target, extractor.extractor, dataset.name, extractor_hash, seed
    )
    write_table(table, run.file(_rel(prefix, "quality.csv")))

    comparisons: Dict[str, Dict[str, bool]] = {}
    by_method = table.set_index("method")
    for key in translated:
        method, _, scale = key.partition("@")
        baseline = method_key("random_latent", float(scale))
        if method != "inversion" or baseline not in by_method.index:
            continue
        ours, theirs = by_method.loc[key], by_method.loc[baseline]
        comparisons[key] = {
            "lower_cycle_loss": bool(ours["cycle_loss"] < theirs["cycle_loss"]),
            "lower_frechet": bool(ours["frechet"] < theirs["frechet"]),
            "higher_identity_preservation": bool(ours["identity_preservation"] > theirs["identity_preservation"]),
        }
    for warnings in table["warnings"]:
        if isinstance(warnings, str) and warnings:
            run.extend_warnings(warnings.split("; "))
    run.record_seed("eval-quality", seed)
    _record_dataset(run, "eval-quality", dataset)
    run.summarize(extractor_accuracy=extractor.accuracy, versus_random_latent=comparisons)
    return table


def report_stage(run: RunDirectory, source: Path, prefix: str = "") -> Dict[str, Any]:
    """
    Re-render figures and summary tables from a finished run's tables and
    records. Outputs depend only on the source run's files.
    """
    source = Path(source)
    manifest = read_run_manifest(source)
    for path in verify_run(source):
        run.warn(f"source artifact changed since its run finished: {path}")
    bins = int(manifest.config.get("evaluation", {}).get("similarity_bins", 40))
    rendered: List[str] = []

    for table_path in sorted(source.rglob("measurements.csv")):
        frame = read_table(table_path)
        name = table_path.parent.relative_to(source).as_posix().replace("/", "_") or "root"
        plot_boxplot(
            {group: sub["value"].tolist() for group, sub in frame.groupby("group", sort=True)},
            run.file(_rel(prefix, f"{name}_measurements.png")),
            title=str(frame["measurement"].iloc[0]) if len(frame) else "",
            ylabel="value",
        )
        summary = frame.groupby("group", sort=True)["value"].describe()
        write_table(summary.reset_index(), run.file(_rel(prefix, f"{name}_summary.csv")))
        rendered.append(f"{name}_measurements.png")

    for records_dir in sorted(p for p in source.rglob("records") if p.is_dir()):
        grouped = load_records(records_dir)
        name = records_dir.parent.relative_to(source).as_posix().replace("/", "_") or "root"
        for key in sorted(grouped):
            safe = key.replace("@", "_g")
            save_translation_grid(grouped[key], run.file(_rel(prefix, f"{name}_{safe}_grid.png")))
            rendered.append(f"{name}_{safe}_grid.png")

    for table_path in sorted(source.rglob("similarities.csv")):
        reports = reports_from_frame(read_table(table_path), bins)
        plot_similarity_grid(reports, run.file(_rel(prefix, "similarity_grid.png")))
        write_table(pd.DataFrame([r.summary() for r in reports]), run.file(_rel(prefix, "similarity_stats.csv")))
        rendered.append("similarity_grid.png")

    for table_path in sorted(source.rglob("losses.csv")):
        frame = read_table(table_path)
        name = table_path.parent.relative_to(source).as_posix().replace("/", "_") or "root"
        plot_losses({name: frame["loss"].tolist()}, run.file(_rel(prefix, f"{name}_losses.png")))
        rendered.append(f"{name}_losses.png")

    run.summarize(source_run=manifest.run_id, source_command=manifest.command, rendered=rendered)
    if manifest.summary.get("headline"):
        run.summarize(headline=manifest.summary["headline"])
    return {"rendered": rendered}


# End to end
def end_to_end(
    config: ExperimentConfig,
    seed: Optional[int] = None,
    out: Optional[Path] = None,
    env: Optional[Settings] = None,
) -> Dict[str, Any]:
    """
    synth -> train-codec -> pretrain (broad) -> finetune (narrow) ->
    translate -> measure -> report, in a single run directory.

    Returns the run summary, whose headline states whether the expected
    phenotype direction was recovered.
    """
    env = env or settings
    if config.dataset.preset is None:
        raise ConfigError("dataset.preset", "the end-to-end run needs a preset with a known phenotype")
    seed = config.seed if seed is None else seed
    plan = measurement_plan(config)

    with RunDirectory("run", config, out, env) as run:
        with stage("synth"):
            narrow = synth_stage(run, config, derive_seed(seed, "synth"), prefix="synth")
            broad = broad_dataset(config, seed)
            _record_dataset(run, "broad", broad)
        with stage("train-codec"):
            codec, _ = codec_stage(run, config, derive_seed(seed, "codec"), broad, env, prefix="codec")
        with stage("pretrain"):
            base, base_path = pretrain_stage(run, config, derive_seed(seed, "pretrain"), codec, broad, env, prefix="pretrain")
        with stage("finetune"):
            model, result, _ = finetune_stage(
                run, config, derive_seed(seed, "finetune"), base, base_path, narrow, config.finetune, env, prefix="finetune"
            )
        with stage("translate"):
            outcome = translate_stage(
                run, config, derive_seed(seed, "translate"), model, result.conditions, narrow, plan, prefix="translate"
            )
        with stage("measure"):
            measure_stage(run, narrow, plan, prefix="measure")
        with stage("report"):
            write_table(
                comparisons_frame(outcome.comparisons, outcome.recovered), run.file("report/comparisons.csv")
            )
        run.summarize(
            headline=outcome.headline,
            preset=config.dataset.preset,
            phenotype_recovered=outcome.recovered[outcome.primary],
            real_direction_recovered=outcome.recovered["real"],
            translated_p_value=outcome.comparisons[outcome.primary].p_value,
            real_p_value=outcome.comparisons["real"].p_value,
        )
        summary = dict(run.manifest.summary)
        summary["run_dir"] = str(run.path)
    logger.info(summary["headline"], extra={"run_id": run.run_id})
    return summary
