import hashlib
import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from phenldiff.middleware.exceptions import StorageError

Strategy = Literal["full", "attention", "lora", "svdiff"]
Determinism = Literal["warn_only", "off"]
MeasurementName = Literal[
    "area_fraction", "object_count", "nuclear_cytoplasm_ratio", "puncta_dispersion"
]

DEFAULT_LEARNING_RATES: Dict[str, float] = {
    "full": 1e-4,
    "attention": 1e-4,
    "lora": 5e-4,
    "svdiff": 5e-4,
}


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


# Diffusion / model specs
class ScheduleConfig(StrictModel):
    T: int = 1000
    kind: Literal["linear", "cosine"] = "linear"
    beta_min: float = 1e-4
    beta_max: float = 0.02


class CodecSpec(StrictModel):
    image_size: int = 64
    channels: int = 3
    latent_channels: int = 4
    downsample_factor: int = 4
    base_width: int = 32
    reconstruction_weight: float = 1.0
    regularization_weight: float = 1e-4

    @field_validator("downsample_factor")
    @classmethod
    def _power_of_two(cls, value: int) -> int:
        if value < 1 or value & (value - 1):
            raise ValueError("downsample_factor must be a power of two")
        return value

    @model_validator(mode="after")
    def _divisible(self) -> "CodecSpec":
        if self.image_size % self.downsample_factor:
            raise ValueError(
                f"image_size {self.image_size} is not divisible by "
                f"downsample_factor {self.downsample_factor}"
            )
        return self

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return (self.channels, self.image_size, self.image_size)

    @property
    def latent_shape(self) -> Tuple[int, int, int]:
        side = self.image_size // self.downsample_factor
        return (self.latent_channels, side, side)


class DenoiserSpec(StrictModel):
    base_width: int = 32
    channel_mults: Tuple[int, ...] = (1, 2)
    num_res_blocks: int = 2
    attention_levels: Tuple[int, ...] = ()
    mid_attention: bool = True
    num_heads: int = 4
    emb_dim: int = 128
    num_classes: int = 2

    @model_validator(mode="after")
    def _has_attention(self) -> "DenoiserSpec":
        if not self.mid_attention and not self.attention_levels:
            raise ValueError("the denoiser needs at least one attention block")
        for level in self.attention_levels:
            if not 0 <= level < len(self.channel_mults):
                raise ValueError(f"attention level {level} does not exist")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        return self

    @property
    def null_label(self) -> int:
        return self.num_classes


# Training configs
class CodecTrainingConfig(StrictModel):
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    val_fraction: float = 0.1
    reconstruction_budget: float = 0.15
    log_every: int = 50


class TrainingConfig(StrictModel):
    steps: int = 3000
    batch_size: int = 32
    learning_rate: float = 2e-4
    p_uncond: float = 0.1
    grad_clip: float = 1.0
    log_every: int = 100


class FinetuneConfig(StrictModel):
    strategy: Strategy = "lora"
    learning_rate: Optional[float] = None
    steps: int = 1500
    batch_size: int = 16
    rank: Optional[int] = None
    alpha: Optional[float] = None
    p_uncond: float = 0.1
    grad_clip: float = 1.0
    from_scratch: bool = False
    conditions: Optional[List[str]] = None
    log_every: int = 100

    @model_validator(mode="after")
    def _strategy_fields(self) -> "FinetuneConfig":
        if self.strategy == "lora":
            if self.rank is None:
                self.rank = 4
            if self.alpha is None:
                self.alpha = float(self.rank)
        elif self.rank is not None or self.alpha is not None:
            raise ValueError(f"rank/alpha apply only to lora, not '{self.strategy}'")
        if self.from_scratch and self.strategy != "full":
            raise ValueError("from_scratch requires strategy 'full'")
        if self.learning_rate is None:
            self.learning_rate = DEFAULT_LEARNING_RATES[self.strategy]
        return self


class TranslationConfig(StrictModel):
    # one plan: inverted ascending, sampled back along its reverse
    steps: int = 100
    guidance_scale: float = 1.0
    guidance_sweep: List[float] = Field(default_factory=list)
    n_translate: int = 20
    clip_x0: bool = False


class EvaluationConfig(StrictModel):
    subset_sizes: List[int] = Field(default_factory=lambda: [8, 32, 128])
    strategies: List[Literal["full", "attention", "lora", "svdiff", "scratch"]] = Field(
        default_factory=lambda: ["lora", "svdiff", "full", "attention"]
    )
    n_seeds: int = 64
    n_samples: int = 64
    sampling_steps: int = 50
    similarity_bins: int = 40


class ExtractorConfig(StrictModel):
    feature_dim: int = 64
    epochs: int = 15
    batch_size: int = 32
    learning_rate: float = 1e-3
    val_fraction: float = 0.2


class DatasetConfig(StrictModel):
    preset: Optional[str] = "translocation"
    path: Optional[str] = None
    n_per_condition: int = 100
    broad_n_per_group: int = 100

    @model_validator(mode="after")
    def _one_source(self) -> "DatasetConfig":
        if (self.preset is None) == (self.path is None):
            raise ValueError("exactly one of dataset.preset and dataset.path must be set")
        return self


class ExperimentConfig(StrictModel):
    seed: int = 0
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    codec: CodecSpec = Field(default_factory=CodecSpec)
    codec_training: CodecTrainingConfig = Field(default_factory=CodecTrainingConfig)
    denoiser: DenoiserSpec = Field(default_factory=DenoiserSpec)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    pretrain: TrainingConfig = Field(default_factory=TrainingConfig)
    finetune: FinetuneConfig = Field(default_factory=FinetuneConfig)
    translation: TranslationConfig = Field(default_factory=TranslationConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    extractor: ExtractorConfig = Field(default_factory=ExtractorConfig)

    def resolved(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")

    def config_hash(self) -> str:
        canonical = json.dumps(self.resolved(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    @classmethod
    def load(cls, path: Optional[Path]) -> "ExperimentConfig":
        """Load a YAML config; a missing path yields the defaults."""
        if path is None:
            return cls()
        try:
            with open(path, "r", encoding="utf-8") as f:
                document = yaml.safe_load(f) or {}
        except OSError as e:
            raise StorageError(path, f"cannot read config: {e}")
        return cls.model_validate(document)


# Synthetic phenotypes
class ConditionSpec(StrictModel):
    name: str
    cell_count: Tuple[int, int] = (6, 10)
    radius: Tuple[float, float] = (3.5, 5.0)
    translocation_ratio: Tuple[float, float] = (0.2, 0.4)
    organelle_scatter: Tuple[float, float] = (1.5, 2.5)
    neurite_density: Tuple[float, float] = (0.0, 0.0)
    marker_level: Tuple[float, float] = (0.5, 0.7)
    puncta_per_cell: int = 6
    channels: Dict[str, int] = Field(default_factory=lambda: {"nucleus": 2, "marker": 1})

    @model_validator(mode="after")
    def _ranges(self) -> "ConditionSpec":
        for field in (
            "cell_count", "radius", "translocation_ratio",
            "organelle_scatter", "neurite_density", "marker_level",
        ):
            low, high = getattr(self, field)
            if low > high or low < 0:
                raise ValueError(f"{field} range ({low}, {high}) is invalid")
        for field in ("translocation_ratio", "neurite_density", "marker_level"):
            if getattr(self, field)[1] > 1:
                raise ValueError(f"{field} must lie within [0, 1]")
        if "nucleus" not in self.channels:
            raise ValueError("a condition needs a nucleus channel")
        return self


class PhenotypeParams(StrictModel):
    cell_count: int
    centers: List[Tuple[float, float]]
    radii: List[float]
    translocation_ratio: float
    organelle_scatter: float
    neurite_density: float
    marker_level: float
    render_seed: int


# Measurements
class MeasurementRow(StrictModel):
    image_id: str
    condition: str = ""
    channel: int
    measurement: MeasurementName
    value: Optional[float]
    defined: bool = True
    threshold_method: str = "otsu"
    threshold: Optional[float] = None


class GroupSummary(StrictModel):
    n: int
    median: float
    iqr: float


class GroupComparison(StrictModel):
    group_a: GroupSummary
    group_b: GroupSummary
    u_statistic: float
    p_value: float
    alternative: str
    effect_size: float
    warnings: List[str] = Field(default_factory=list)


# Persistence documents
class TensorEntry(StrictModel):
    name: str
    file: str
    shape: List[int]
    dtype: str = "float32"
    byteorder: str = "little"
    sha256: str


class CheckpointManifest(StrictModel):
    kind: Literal["codec", "denoiser", "adapter", "extractor"]
    spec: Dict[str, Any] = Field(default_factory=dict)
    tensors: List[TensorEntry] = Field(default_factory=list)
    training_config: Dict[str, Any] = Field(default_factory=dict)
    seed: Optional[int] = None
    code_version: str = "unknown"
    metadata: Dict[str, Any] = Field(default_factory=dict)


class DatasetEntry(StrictModel):
    id: str
    condition: str
    path: str
    sha256: str
    params: Optional[PhenotypeParams] = None


class DatasetManifest(StrictModel):
    name: str
    seed: Optional[int] = None
    image_size: int
    conditions: List[str]
    entries: List[DatasetEntry]


class ArtifactEntry(StrictModel):
    path: str
    sha256: str


class RunManifest(StrictModel):
    run_id: str
    command: str
    config: Dict[str, Any]
    config_hash: str
    seeds: Dict[str, int] = Field(default_factory=dict)
    dataset_hashes: Dict[str, str] = Field(default_factory=dict)
    checkpoints: Dict[str, str] = Field(default_factory=dict)
    code_version: str = "unknown"
    determinism: Determinism = "off"
    started_at: str
    finished_at: Optional[str] = None
    status: Literal["running", "succeeded", "failed"] = "running"
    artifacts: List[ArtifactEntry] = Field(default_factory=list)
    warnings: List[str] = Field(default_factory=list)
    summary: Dict[str, Any] = Field(default_factory=dict)
