"""
Experiment configuration.

Resolution order: model defaults < JSON file (--config) < command-line flags.
Unknown keys are rejected at every level. Each subsystem draws randomness
from its own named seed: data.seed / data.eval_seed, model.init_seed,
train.seed (shuffling) and loss.mixed_seed (mixed-length mask).
"""
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from numerics import LabError
from data_synth import PROMPT_TEMPLATES, SynthConfig
from encoders import DEFAULT_TEMPERATURE_INIT, ModelConfig
from pe_stretch import STRETCH_MODES, StretchSpec
from pcm import LossConfig
from train import VARIANTS, TrainConfig

logger = logging.getLogger(__name__)


class ConfigError(LabError):
    """Invalid or unknown configuration keys"""


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataConfig(_Section):
    seed: int = 7
    n_scenes: int = Field(2000, ge=1)
    eval_seed: int = 8
    n_eval: int = Field(200, ge=2)
    n_attributes: int = Field(6, ge=1)
    primary_count: int = Field(2, ge=1)
    sibling_group: int = Field(4, ge=1)
    grid: int = Field(4, ge=2)
    channels: int = Field(16, ge=1)
    noise: float = Field(0.05, ge=0)
    neighbor_weight: float = Field(0.5, ge=0)
    world_seed: int = 0

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            n_attributes=self.n_attributes, primary_count=self.primary_count,
            sibling_group=self.sibling_group, grid=self.grid, channels=self.channels,
            noise=self.noise, neighbor_weight=self.neighbor_weight, world_seed=self.world_seed,
        ).validate()


class ModelConfigSection(_Section):
    context_len: int = Field(77, ge=3)
    d_model: int = Field(64, ge=1)
    n_layers: int = Field(2, ge=1)
    n_heads: int = Field(4, ge=1)
    d_embed: int = Field(64, ge=8)
    mlp_ratio: int = Field(4, ge=1)
    init_seed: int = 0
    embed_init_std: float = Field(0.02, gt=0)
    temperature_init: float = DEFAULT_TEMPERATURE_INIT

    def model_config_for(self, vocab_size: int, data: DataConfig) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size, context_len=self.context_len, d_model=self.d_model,
            n_layers=self.n_layers, n_heads=self.n_heads, d_embed=self.d_embed,
            image_grid=data.grid, image_channels=data.channels, mlp_ratio=self.mlp_ratio,
            init_seed=self.init_seed, embed_init_std=self.embed_init_std,
            temperature_init=self.temperature_init,
        ).validate()


class StretchConfig(_Section):
    mode: str = "kps"
    ratio: Optional[float] = Field(None, ge=1)
    keep: int = Field(20, ge=1)
    linear_ratio: float = Field(3.0, ge=1)
    kps_ratio: float = Field(4.0, ge=1)

    @field_validator("mode")
    @classmethod
    def _known_mode(cls, v: str) -> str:
        if v not in STRETCH_MODES:
            raise ValueError(f"mode must be one of {STRETCH_MODES}")
        return v

    def spec(self) -> StretchSpec:
        if self.ratio is not None:
            ratio = self.ratio
        else:
            ratio = self.kps_ratio if self.mode == "kps" else self.linear_ratio
        return StretchSpec(self.mode, ratio, self.keep)

    def variant_specs(self) -> Dict[str, StretchSpec]:
        return {
            "linear": StretchSpec("linear", self.linear_ratio),
            "kps": StretchSpec("kps", self.kps_ratio, self.keep),
        }


class LossConfigSection(_Section):
    alpha_loss: float = Field(0.1, ge=0)
    k_components: int = Field(32, ge=1)
    symmetric: bool = True
    temperature_clamp_max: float = Field(100.0, ge=1)
    bounded_beta: float = Field(1.0, ge=0)
    mixed_rate: float = Field(0.1, ge=0, le=1)
    mixed_seed: int = 0

    def loss_config(self) -> LossConfig:
        return LossConfig(**self.model_dump()).validate()


class TrainConfigSection(_Section):
    batch_size: int = Field(64, ge=2)
    epochs: int = Field(6, ge=1)
    learning_rate: float = Field(1e-4, gt=0)
    weight_decay: float = Field(1e-2, ge=0)
    warmup_iters: int = Field(200, ge=0)
    adam_beta1: float = Field(0.9, gt=0, lt=1)
    adam_beta2: float = Field(0.999, gt=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    seed: int = 0
    variant: str = "kps_pcm"
    grad_clip: Optional[float] = Field(1.0, gt=0)
    workers: int = Field(2, ge=1)

    @field_validator("variant")
    @classmethod
    def _known_variant(cls, v: str) -> str:
        if v not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        return v

    def train_config(self, **overrides) -> TrainConfig:
        return TrainConfig(**{**self.model_dump(), **overrides}).validate()


class SuiteConfig(_Section):
    """Desk-scale two-stage recipe: short-caption pretraining, then per-variant fine-tuning."""
    pretrain_epochs: int = Field(12, ge=1)
    pretrain_learning_rate: float = Field(2e-3, gt=0)
    pretrain_warmup_iters: int = Field(20, ge=0)
    finetune_epochs: int = Field(6, ge=1)
    finetune_learning_rate: float = Field(5e-4, gt=0)
    finetune_warmup_iters: int = Field(20, ge=0)
    variants: List[str] = Field(default_factory=lambda: list(VARIANTS))

    @field_validator("variants")
    @classmethod
    def _known_variants(cls, v: List[str]) -> List[str]:
        unknown = [x for x in v if x not in VARIANTS]
        if unknown:
            raise ValueError(f"unknown variants {unknown}")
        return v


class EvalConfig(_Section):
    ks: List[int] = Field(default_factory=lambda: [1, 5, 10])
    probe_lengths: List[Union[int, str]] = Field(default_factory=lambda: [5, 10, 15, 20, 30, 40, 60, "full"])
    templates: List[str] = Field(default_factory=lambda: list(PROMPT_TEMPLATES))
    n_classes: int = Field(8, ge=1)
    n_per_class: int = Field(25, ge=1)
    class_seed: int = 11

    @field_validator("ks")
    @classmethod
    def _sorted_ks(cls, v: List[int]) -> List[int]:
        if not v or v != sorted(v) or v[0] < 1:
            raise ValueError("ks must be positive and ascending")
        return v

    @field_validator("probe_lengths")
    @classmethod
    def _probe_grid(cls, v: List[Union[int, str]]) -> List[Union[int, str]]:
        for m in v:
            if isinstance(m, str) and m != "full":
                raise ValueError(f"probe length {m!r} is neither an integer nor 'full'")
        return v


class PathsConfig(_Section):
    out_dir: str = "runs"
    dataset: str = "runs/data/train.jsonl"
    eval_dataset: str = "runs/data/eval.jsonl"
    vocab: str = "runs/data/vocab.txt"


class ExperimentConfig(_Section):
    data: DataConfig = Field(default_factory=DataConfig)
    model: ModelConfigSection = Field(default_factory=ModelConfigSection)
    stretch: StretchConfig = Field(default_factory=StretchConfig)
    loss: LossConfigSection = Field(default_factory=LossConfigSection)
    train: TrainConfigSection = Field(default_factory=TrainConfigSection)
    suite: SuiteConfig = Field(default_factory=SuiteConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)

    def to_canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, indent=2) + "\n"


def _set_dotted(tree: Dict[str, Any], dotted: str, value: Any) -> None:
    section, _, key = dotted.partition(".")
    if not key:
        raise ConfigError(f"override key {dotted!r} must look like 'section.field'")
    node = tree.setdefault(section, {})
    if not isinstance(node, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    node[key] = value


def load_config(path: Optional[Union[str, Path]] = None,
                overrides: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    """Defaults, then the JSON file at `path`, then dotted-key `overrides` (None values skipped)."""
    tree: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            tree = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})") from e
        if not isinstance(tree, dict):
            raise ConfigError(f"{path}: top level must be an object")
    for dotted, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(tree, dotted, value)
    try:
        return ExperimentConfig.model_validate(tree)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def write_resolved_config(config: ExperimentConfig, artifact: Union[str, Path]) -> Path:
    """`<artifact-stem>.config.json` beside the artifact."""
    artifact = Path(artifact)
    target = artifact.with_name(f"{artifact.stem}.config.json")
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(config.to_canonical_json(), encoding="utf-8")
    return target
