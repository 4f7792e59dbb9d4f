"""
Run configuration. A run file (JSON or YAML) is deep-merged over the preset of its pipeline from config.yaml
and validated into the pydantic models below.
"""

import copy
from pathlib import Path
from typing import Any

import yaml
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, model_validator

from data_classes import GridGeometry
from exceptions import ConfigurationException, DimensionException
from modalities import DepthLossMode, DepthNormalization, EncoderMode, MaskPairing, Pipeline, ProbeTask
from objectives import LossWeights

CONFIG_PATH = Path(__file__).with_name("config.yaml")

with open(CONFIG_PATH, "r") as stream:
    config = yaml.safe_load(stream)


class InputConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    height: int = Field(64, ge=1)
    width: int = Field(64, ge=1)
    frames: int = Field(1, ge=1)
    patch_size: int = Field(16, ge=1)
    tubelet: int = Field(1, ge=1)
    depth_normalization: DepthNormalization = DepthNormalization.MINMAX
    depth_clamp_max: PositiveFloat = 8.0

    @model_validator(mode="after")
    def _check_grid(self) -> "InputConfig":
        try:
            self.geometry()
        except DimensionException as e:
            raise ValueError(str(e))
        return self

    def geometry(self) -> GridGeometry:
        return GridGeometry.for_input(self.frames, self.height, self.width, self.patch_size, self.tubelet)


class EncoderConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    depth: int = Field(4, ge=1)
    width: int = Field(128, ge=1)
    heads: int = Field(4, ge=1)
    mlp_ratio: PositiveFloat = 4.0
    mode: EncoderMode = EncoderMode.SPECIFIC
    drop_path: float = Field(0.0, ge=0.0, lt=1.0)

    @model_validator(mode="after")
    def _check_heads(self) -> "EncoderConfig":
        if self.width % self.heads:
            raise ValueError(f"Encoder width {self.width} is not divisible by {self.heads} heads.")
        return self


class DecoderConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    depth: int = Field(2, ge=1)
    width: int = Field(64, ge=1)
    heads: int = Field(4, ge=1)
    mlp_ratio: PositiveFloat = 4.0

    @model_validator(mode="after")
    def _check_heads(self) -> "DecoderConfig":
        if self.width % self.heads:
            raise ValueError(f"Decoder width {self.width} is not divisible by {self.heads} heads.")
        return self


class MaskConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    rgb_strategy: str = "random"
    rgb_ratio: float = Field(0.8, ge=0.0, le=1.0)
    depth_strategy: str = "random"
    depth_ratio: float = Field(0.8, ge=0.0, le=1.0)
    pairing: MaskPairing = MaskPairing.INDEPENDENT


class OptimizerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lr: PositiveFloat = 1e-3
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = Field(0.05, ge=0.0)
    warmup_epochs: float = Field(1.0, ge=0.0)
    warmup_lr: float = Field(0.0, ge=0.0)
    min_lr: float = Field(0.0, ge=0.0)
    grad_clip: PositiveFloat | None = None


class ModelConfig(BaseModel):
    """
    Everything needed to rebuild an RgbdMaskedAutoencoder; stored next to every checkpoint.
    """
    model_config = ConfigDict(extra="forbid")

    input: InputConfig = InputConfig()
    encoder: EncoderConfig = EncoderConfig()
    decoder: DecoderConfig = DecoderConfig()


class PretrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    pipeline: Pipeline
    input: InputConfig = InputConfig()
    encoder: EncoderConfig = EncoderConfig()
    decoder: DecoderConfig = DecoderConfig()
    masking: MaskConfig = MaskConfig()
    loss_weights: LossWeights = LossWeights()
    optimizer: OptimizerConfig = OptimizerConfig()
    epochs: int = Field(50, ge=1)
    max_steps: int | None = Field(None, ge=1)
    stage1_epochs: int = Field(5, ge=0)
    stage2_epochs: int = Field(40, ge=1)
    stage1_max_steps: int | None = Field(None, ge=0)
    stage2_max_steps: int | None = Field(None, ge=1)
    batch_size: int = Field(8, ge=1)
    seed: int = Field(0, ge=0)
    dataset: str | None = None
    synthetic_samples: int = Field(32, ge=1)
    checkpoint_every: int = Field(0, ge=0)
    init_checkpoint: str | None = None

    @model_validator(mode="after")
    def _check_pipeline(self) -> "PretrainConfig":
        if self.pipeline is Pipeline.IMAGE and (self.input.frames != 1 or self.input.tubelet != 1):
            raise ValueError("The image pipeline needs frames = 1 and tubelet = 1.")
        if self.pipeline is Pipeline.VIDEO and self.input.frames % 2:
            raise ValueError("The video pipeline needs an even number of frames.")
        return self

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(input=self.input, encoder=self.encoder, decoder=self.decoder)

    @property
    def depth_loss_mode(self) -> DepthLossMode:
        return DepthLossMode.IMAGE_L1 if self.pipeline is Pipeline.IMAGE else DepthLossMode.VIDEO_MSE


class ProbeConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    task: ProbeTask = ProbeTask.CLASSIFICATION
    num_classes: int = Field(8, ge=1)
    epochs: int = Field(30, ge=1)
    max_steps: int | None = Field(None, ge=1)
    batch_size: int = Field(8, ge=1)
    lr: PositiveFloat = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = Field(0.05, ge=0.0)
    layer_decay: float = Field(0.75, gt=0.0, le=1.0)
    warmup_epochs: float = Field(1.0, ge=0.0)
    drop_path: float = Field(0.1, ge=0.0, lt=1.0)
    freeze_encoder: bool = False
    label_fraction: float = Field(1.0, gt=0.0, le=1.0)
    eval_fraction: float = Field(0.25, gt=0.0, lt=1.0)
    seed: int = Field(0, ge=0)
    dataset: str | None = None
    synthetic_samples: int = Field(160, ge=2)


def deep_merge(base: dict[str, Any], override: dict[str, Any]) -> dict[str, Any]:
    """
    Recursively merges override into a copy of base. Nested dicts are merged, everything else is replaced.
    """
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def read_config_file(path: str | Path) -> dict[str, Any]:
    """
    Reads a JSON or YAML run file.

    :param path: Path of the run file.
    :return: The parsed mapping.
    """
    try:
        with open(path, "r") as stream:
            raw = yaml.safe_load(stream)
    except (OSError, yaml.YAMLError) as e:
        raise ConfigurationException(f"Could not read config {path}: {e}")
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigurationException(f"Config {path} must contain a mapping.")
    return raw


def load_pretrain_config(path: str | Path | None, pipeline: Pipeline,
                         overrides: dict[str, Any] | None = None) -> PretrainConfig:
    """
    Resolves a pretraining configuration: preset of the pipeline, then the run file, then overrides.

    :param path: Optional run file.
    :param pipeline: The pipeline the caller is about to run. A run file naming another pipeline is rejected.
    :param overrides: Values that take precedence over the file (CLI flags).
    :return: The validated configuration.
    """
    raw = read_config_file(path) if path else {}
    if raw.get("pipeline", pipeline.value) != pipeline.value:
        raise ConfigurationException(f"Config {path} is for the {raw['pipeline']} pipeline, not {pipeline.value}.")
    merged = deep_merge(deep_merge(config["presets"][pipeline.value], raw), overrides or {})
    return PretrainConfig.model_validate(merged)


def load_probe_config(path: str | Path | None, overrides: dict[str, Any] | None = None) -> ProbeConfig:
    raw = read_config_file(path) if path else {}
    merged = deep_merge(deep_merge(config["presets"]["probe"], raw), overrides or {})
    return ProbeConfig.model_validate(merged)
