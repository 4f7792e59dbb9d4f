import pytest
import torch

from data_classes import SampleBatch
from datagen.rgbd_dataset import normalize_depth
from modalities import Pipeline
from pretrain_config import ModelConfig, load_pretrain_config

# 32x32 frames cut into 8x8 patches: a 4x4 grid, two tubelets per clip.
SMALL_INPUT = {"height": 32, "width": 32, "patch_size": 8}
SMALL_ENCODER = {"depth": 1, "width": 32, "heads": 2, "mlp_ratio": 2.0}
SMALL_DECODER = {"depth": 1, "width": 16, "heads": 2, "mlp_ratio": 2.0}


def small_video_overrides(**extra) -> dict:
    return {
        "input": {**SMALL_INPUT, "frames": 4, "tubelet": 2},
        "encoder": SMALL_ENCODER,
        "decoder": SMALL_DECODER,
        "masking": {"rgb_ratio": 0.5, "depth_ratio": 0.5},
        "batch_size": 4,
        "synthetic_samples": 8,
        "max_steps": 4,
        **extra,
    }


def small_image_overrides(**extra) -> dict:
    return {
        "input": {**SMALL_INPUT, "frames": 1, "tubelet": 1},
        "encoder": SMALL_ENCODER,
        "decoder": SMALL_DECODER,
        "masking": {"rgb_ratio": 0.5, "depth_ratio": 0.5},
        "batch_size": 4,
        "synthetic_samples": 8,
        "stage1_max_steps": 2,
        "stage2_max_steps": 3,
        **extra,
    }


@pytest.fixture
def video_run():
    return load_pretrain_config(None, Pipeline.VIDEO, small_video_overrides())


@pytest.fixture
def image_run():
    return load_pretrain_config(None, Pipeline.IMAGE, small_image_overrides())


@pytest.fixture
def tiny_model_config() -> ModelConfig:
    """
    Encoder depth 1, width 16; 4 frames of 8x8 in 2-frame tubelets of 4x4 patches, so N = 8.
    """
    return ModelConfig.model_validate({
        "input": {"height": 8, "width": 8, "frames": 4, "patch_size": 4, "tubelet": 2},
        "encoder": {"depth": 1, "width": 16, "heads": 2, "mlp_ratio": 2.0},
        "decoder": {"depth": 1, "width": 8, "heads": 2, "mlp_ratio": 2.0},
    })


def random_batch(model_config: ModelConfig, batch_size: int, seed: int = 0,
                 dtype: torch.dtype = torch.float32) -> SampleBatch:
    input_cfg = model_config.input
    generator = torch.Generator().manual_seed(seed)
    shape = (batch_size, input_cfg.frames)
    rgb = torch.rand(*shape, 3, input_cfg.height, input_cfg.width, generator=generator, dtype=dtype)
    depth = 0.5 + 7.5 * torch.rand(*shape, 1, input_cfg.height, input_cfg.width, generator=generator, dtype=dtype)
    normalized, stats = normalize_depth(depth, input_cfg.depth_normalization, input_cfg.depth_clamp_max)
    return SampleBatch(rgb=rgb, depth=normalized, depth_meters=depth, depth_stats=stats)
