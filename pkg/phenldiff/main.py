"""
Command-line entry point.

Every command loads and validates the experiment config before any compute,
writes one run directory and exits with a categorized code on failure.
"""

import logging
from pathlib import Path
from typing import Any, Callable, List, Optional

import click
import yaml

from phenldiff.checkpoints import load_codec
from phenldiff.config import settings
from phenldiff.middleware.error_handler import handle_errors
from phenldiff.middleware.exceptions import ConfigError, MissingArtifactError
from phenldiff.schemas import DatasetConfig, EvaluationConfig, ExperimentConfig
from phenldiff.services import pipeline
from phenldiff.services.finetune import condition_slots, load_latent_diffusion
from phenldiff.services.reports import load_records
from phenldiff.services.runs import LOG_FORMAT, RunDirectory
from phenldiff.services.synthcells import get_preset

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.yaml"


def configure_logging(level: Optional[str] = None) -> None:
    logging.basicConfig(level=(level or settings.LOG_LEVEL).upper(), format=LOG_FORMAT, force=True)


def load_config(
    config_path: Optional[Path], seed: Optional[int], preset: Optional[str] = None, data: Optional[Path] = None
) -> ExperimentConfig:
    """The validated config with command-line overrides applied."""
    config = ExperimentConfig.load(config_path)
    updates: dict = {}
    if seed is not None:
        updates["seed"] = seed
    if preset is not None:
        get_preset(preset)
        updates["dataset"] = DatasetConfig(
            preset=preset,
            n_per_condition=config.dataset.n_per_condition,
            broad_n_per_group=config.dataset.broad_n_per_group,
        )
    elif data is not None and config.dataset.preset is None:
        updates["dataset"] = config.dataset.model_copy(update={"path": str(data)})
    return config.model_copy(update=updates) if updates else config


def parse_list(text: Optional[str], cast: Callable[[str], Any], option: str) -> Optional[List[Any]]:
    if text is None:
        return None
    try:
        values = [cast(part.strip()) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(option, f"cannot parse '{text}'")
    if not values:
        raise ConfigError(option, "empty list")
    return values


def common_options(func: Callable) -> Callable:
    """--config, --seed and --out, shared by every command."""
    options = [
        click.option("--config", "config_path", type=click.Path(path_type=Path), default=None, help="Experiment YAML"),
        click.option("--seed", type=int, default=None, help="Overrides the config seed"),
        click.option("--out", type=click.Path(path_type=Path), default=None, help="Output root for the run directory"),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def open_run(command: str, config: ExperimentConfig, out: Optional[Path]) -> RunDirectory:
    run = RunDirectory(command, config, out)
    run.write_yaml(CONFIG_FILE, config.resolved())
    return run


def report_run(run: RunDirectory) -> None:
    click.echo(f"run: {run.path}")
    headline = run.manifest.summary.get("headline")
    if headline:
        click.echo(headline)
    for warning in run.manifest.warnings:
        click.echo(f"warning: {warning}")


def require(path: Optional[Path], what: str, producing_command: str) -> Path:
    if path is None:
        raise MissingArtifactError(what, producing_command)
    return path


@click.group()
@click.option("--log-level", default=None, help="Overrides PHENLDIFF_LOG_LEVEL")
def cli(log_level: Optional[str]) -> None:
    """Latent diffusion phenotype translation experiments."""
    configure_logging(log_level)


@cli.command()
@common_options
@click.option("--preset", default=None, help="Synthetic preset name")
@click.option("--n", "n_per_condition", type=int, default=None, help="Images per condition")
@click.option("--broad", is_flag=True, help="Render the broad pretraining distribution instead")
@handle_errors
def synth(
    config_path: Optional[Path], seed: Optional[int], out: Optional[Path],
    preset: Optional[str], n_per_condition: Optional[int], broad: bool,
) -> None:
    """Render a synthetic folder-per-condition dataset."""
    config = load_config(config_path, seed, preset)
    with open_run("synth", config, out) as run:
        pipeline.synth_stage(run, config, config.seed, preset, n_per_condition, broad)
    report_run(run)


@cli.command("train-codec")
@common_options
@click.option("--data", type=click.Path(path_type=Path), default=None, help="Dataset folder (default: broad synthetic)")
@handle_errors
def train_codec(config_path: Optional[Path], seed: Optional[int], out: Optional[Path], data: Optional[Path]) -> None:
    """Train the image codec."""
    config = load_config(config_path, seed)
    dataset = pipeline.broad_dataset(config, config.seed, data)
    with open_run("train-codec", config, out) as run:
        pipeline.codec_stage(run, config, config.seed, dataset, settings)
    report_run(run)


@cli.command()
@common_options
@click.option("--codec", "codec_path", type=click.Path(path_type=Path), default=None, help="Codec checkpoint")
@click.option("--data", type=click.Path(path_type=Path), default=None, help="Dataset folder (default: broad synthetic)")
@handle_errors
def pretrain(
    config_path: Optional[Path], seed: Optional[int], out: Optional[Path],
    codec_path: Optional[Path], data: Optional[Path],
) -> None:
    """Pretrain the base denoiser on the broad distribution."""
    config = load_config(config_path, seed)
    codec = load_codec(require(codec_path, "codec checkpoint (--codec)", "phenldiff train-codec"))
    dataset = pipeline.broad_dataset(config, config.seed, data)
    with open_run("pretrain", config, out) as run:
        pipeline.pretrain_stage(run, config, config.seed, codec, dataset, settings)
    report_run(run)


@cli.command()
@common_options
@click.option("--codec", "codec_path", type=click.Path(path_type=Path), default=None)
@click.option("--base", "base_path", type=click.Path(path_type=Path), default=None, help="Pretrained base checkpoint")
@click.option("--data", type=click.Path(path_type=Path), default=None, help="Dataset folder (default: preset)")
@click.option("--preset", default=None)
@click.option("--strategy", type=click.Choice(["full", "attention", "lora", "svdiff"]), default=None)
@click.option("--from-scratch", is_flag=True, help="Train the same architecture from random weights")
@click.option("--steps", type=int, default=None)
@handle_errors
def finetune(
    config_path: Optional[Path], seed: Optional[int], out: Optional[Path],
    codec_path: Optional[Path], base_path: Optional[Path], data: Optional[Path],
    preset: Optional[str], strategy: Optional[str], from_scratch: bool, steps: Optional[int],
) -> None:
    """Fine-tune the base denoiser on a small class-labelled dataset."""
    config = load_config(config_path, seed, preset, data)
    ft_config = config.finetune
    if from_scratch:
        ft_config = pipeline.strategy_config(ft_config, "scratch")
    elif strategy is not None:
        ft_config = pipeline.strategy_config(ft_config, strategy)
    if steps is not None:
        ft_config = ft_config.model_copy(update={"steps": steps})
    config = config.model_copy(update={"finetune": ft_config})

    base_path = require(base_path, "base checkpoint (--base)", "phenldiff pretrain")
    base = pipeline.load_base(require(codec_path, "codec checkpoint (--codec)", "phenldiff train-codec"), base_path)
    dataset = pipeline.narrow_dataset(config, config.seed, data)
    with open_run("finetune", config, out) as run:
        pipeline.finetune_stage(run, config, config.seed, base, base_path, dataset, ft_config, settings)
    report_run(run)


@cli.command()
@common_options
@click.option("--codec", "codec_path", type=click.Path(path_type=Path), default=None)
@click.option("--model", "model_path", type=click.Path(path_type=Path), default=None, help="Fine-tuned checkpoint")
@click.option("--base", "base_path", type=click.Path(path_type=Path), default=None, help="Base for adapter checkpoints")
@click.option("--data", type=click.Path(path_type=Path), default=None)
@click.option("--preset", default=None)
@click.option("--source", default=None)
@click.option("--target", default=None)
@click.option("--measurement", default=None)
@click.option("--channel", type=int, default=None)
@click.option("--direction", type=click.Choice(["increase", "decrease"]), default=None)
@click.option("--n", "n_translate", type=int, default=None, help="Images to translate")
@click.option("--guidance-sweep", default=None, help="Comma-separated guidance scales, e.g. 1,2,4")
@click.option("--no-baseline", is_flag=True, help="Skip the random-latent baseline")
@handle_errors
def translate(
    config_path: Optional[Path], seed: Optional[int], out: Optional[Path],
    codec_path: Optional[Path], model_path: Optional[Path], base_path: Optional[Path], data: Optional[Path],
    preset: Optional[str], source: Optional[str], target: Optional[str], measurement: Optional[str],
    channel: Optional[int], direction: Optional[str], n_translate: Optional[int],
    guidance_sweep: Optional[str], no_baseline: bool,
) -> None:
    """Translate source-condition images to the target condition and measure the phenotype."""
    config = load_config(config_path, seed, preset, data)
    plan = pipeline.measurement_plan(config, measurement, channel, direction, source, target)
    sweep = parse_list(guidance_sweep, float, "guidance_sweep")
    model_path = require(model_path, "fine-tuned checkpoint (--model)", "phenldiff finetune")
    model, manifest = load_latent_diffusion(
        require(codec_path, "codec checkpoint (--codec)", "phenldiff train-codec"), model_path, base_path
    )
    conditions = list(condition_slots(manifest, model.denoiser.spec.num_classes))
    dataset = pipeline.narrow_dataset(config, config.seed, data)
    with open_run("translate", config, out) as run:
        run.record_checkpoint("model", model_path)
        pipeline.translate_stage(
            run, config, config.seed, model, conditions, dataset, plan,
            baseline=not no_baseline, guidance_sweep=sweep, n_translate=n_translate,
        )
    report_run(run)


@cli.command("eval-mem")
@common_options
@click.option("--codec", "codec_path", type=click.Path(path_type=Path), default=None)
@click.option("--base", "base_path", type=click.Path(path_type=Path), default=None)
@click.option("--data", type=click.Path(path_type=Path), default=None)
@click.option("--preset", default=None)
@click.option("--sizes", default=None, help="Comma-separated subset sizes, e.g. 8,32,128")
@click.option("--strategies", default=None, help="Comma-separated: full,attention,lora,svdiff,scratch")
@handle_errors
def eval_mem(
    config_path: Optional[Path], seed: Optional[int], out: Optional[Path],
    codec_path: Optional[Path], base_path: Optional[Path], data: Optional[Path],
    preset: Optional[str], sizes: Optional[str], strategies: Optional[str],
) -> None:
    """Memorization versus generalization over subset sizes and strategies."""
    config = load_config(config_path, seed, preset, data)
    size_list = parse_list(sizes, int, "sizes") or config.evaluation.subset_sizes
    strategy_list = parse_list(strategies, str, "strategies") or list(config.evaluation.strategies)
    config = config.model_copy(
        update={
            "evaluation": EvaluationConfig.model_validate(
                {**config.evaluation.model_dump(), "subset_sizes": size_list, "strategies": strategy_list}
            )
        }
    )
    base_path = require(base_path, "base checkpoint (--base)", "phenldiff pretrain")
    base = pipeline.load_base(require(codec_path, "codec checkpoint (--codec)", "phenldiff train-codec"), base_path)
    # two disjoint subsets of the largest size must fit
    dataset = pipeline.narrow_dataset(config, config.seed, data, min_per_condition=max(size_list))
    with open_run("eval-mem", config, out) as run:
        run.record_checkpoint("base", base_path)
        pipeline.eval_mem_stage(run, config, config.seed, base, dataset, size_list, strategy_list, settings)
    report_run(run)


@cli.command("eval-quality")
@common_options
@click.option("--translations", type=click.Path(path_type=Path), default=None, help="A finished translate run")
@click.option("--data", type=click.Path(path_type=Path), default=None)
@click.option("--preset", default=None)
@click.option("--target", default=None)
@handle_errors
def eval_quality(
    config_path: Optional[Path], seed: Optional[int], out: Optional[Path],
    translations: Optional[Path], data: Optional[Path], preset: Optional[str], target: Optional[str],
) -> None:
    """Frechet distance, cycle loss and identity preservation of saved translations."""
    config = load_config(config_path, seed, preset, data)
    plan = pipeline.measurement_plan(config, target=target)
    run_dir = require(translations, "translate run (--translations)", "phenldiff translate")
    records_dirs = sorted(p for p in Path(run_dir).rglob("records") if p.is_dir())
    if not records_dirs:
        raise MissingArtifactError(f"translation records under {run_dir}", "phenldiff translate")
    translated = load_records(records_dirs[0])
    dataset = pipeline.narrow_dataset(config, config.seed, data)
    with open_run("eval-quality", config, out) as run:
        table = pipeline.eval_quality_stage(run, config, config.seed, dataset, translated, plan, settings)
    click.echo(table.to_string(index=False))
    report_run(run)


@cli.command()
@common_options
@click.option("--data", type=click.Path(path_type=Path), default=None)
@click.option("--preset", default=None)
@click.option("--measurement", default=None)
@click.option("--channel", type=int, default=None)
@click.option("--direction", type=click.Choice(["increase", "decrease"]), default=None)
@click.option("--source", default=None)
@click.option("--target", default=None)
@handle_errors
def measure(
    config_path: Optional[Path], seed: Optional[int], out: Optional[Path], data: Optional[Path],
    preset: Optional[str], measurement: Optional[str], channel: Optional[int],
    direction: Optional[str], source: Optional[str], target: Optional[str],
) -> None:
    """Measure a dataset and compare two of its conditions."""
    config = load_config(config_path, seed, preset, data)
    plan = pipeline.measurement_plan(config, measurement, channel, direction, source, target)
    dataset = pipeline.narrow_dataset(config, config.seed, data)
    with open_run("measure", config, out) as run:
        _, comparison = pipeline.measure_stage(run, dataset, plan)
    click.echo(f"{plan.measurement}: p = {comparison.p_value:.3g}, effect size = {comparison.effect_size:.3f}")
    report_run(run)


@cli.command()
@common_options
@click.option("--run", "run_path", type=click.Path(path_type=Path), default=None, help="A finished run directory")
@handle_errors
def report(config_path: Optional[Path], seed: Optional[int], out: Optional[Path], run_path: Optional[Path]) -> None:
    """Re-render figures and tables from a finished run."""
    config = load_config(config_path, seed)
    source = require(run_path, "run directory (--run)", "phenldiff <command>")
    with open_run("report", config, out) as run:
        pipeline.report_stage(run, source)
    report_run(run)


@cli.command("run")
@common_options
@click.option("--preset", default=None)
@handle_errors
def run_all(config_path: Optional[Path], seed: Optional[int], out: Optional[Path], preset: Optional[str]) -> None:
    """synth, train-codec, pretrain, finetune, translate, measure and report in one run."""
    config = load_config(config_path, seed, preset)
    summary = pipeline.end_to_end(config, config.seed, out)
    click.echo(yaml.safe_dump(summary, sort_keys=False))


if __name__ == "__main__":
    cli()
