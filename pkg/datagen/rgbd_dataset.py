"""
Torch dataset over synthetic or on-disk RGB-D samples, the collate function producing SampleBatch and the
step-addressed batch sampler that makes every training step's batch a function of (seed, step).
"""

from functools import partial
from typing import Callable, Iterator, Sequence

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset, Sampler

from data_classes import RgbDepthSample, SampleBatch, VideoSample
from datagen.rgbd_dataset_DAO import DatasetManifest, RgbdDatasetDAO
from datagen.synthetic_scenes import synth_clip, synth_scene
from exceptions import DimensionException, ValidationException
from modalities import DepthNormalization, Pipeline
from pretrain_config import InputConfig, config
from seeding import derive_seed

RANGE_FLOOR = 1e-6


def _synthetic_sample(kind: Pipeline, seed: int, input_cfg: InputConfig, index: int) -> RgbDepthSample | VideoSample:
    if kind is Pipeline.VIDEO:
        return synth_clip(derive_seed(seed, index), input_cfg.frames, input_cfg.height, input_cfg.width,
                          input_cfg.patch_size)
    return synth_scene(derive_seed(seed, index), input_cfg.height, input_cfg.width, input_cfg.patch_size)


class RgbdDataset(Dataset):
    """
    Random access to immutable samples. Synthetic samples are generated on first access from a seed derived
    from (dataset seed, index) and cached.
    """

    def __init__(self, kind: Pipeline, length: int, load: Callable[[int], RgbDepthSample | VideoSample]):
        self.kind = kind
        self._length = length
        self._load = load
        self._cache: dict[int, RgbDepthSample | VideoSample] = {}

    @classmethod
    def synthetic(cls, kind: Pipeline, count: int, seed: int, input_cfg: InputConfig) -> "RgbdDataset":
        return cls(kind, count, partial(_synthetic_sample, kind, seed, input_cfg))

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest) -> "RgbdDataset":
        return cls(manifest.kind, len(manifest), partial(RgbdDatasetDAO.load_sample, manifest))

    def __len__(self) -> int:
        return self._length

    def __getitem__(self, index: int) -> RgbDepthSample | VideoSample:
        if not 0 <= index < self._length:
            raise IndexError(f"Sample {index} out of range for {self._length} samples.")
        if index not in self._cache:
            self._cache[index] = self._load(index)
        return self._cache[index]


def build_dataset(kind: Pipeline, input_cfg: InputConfig, dataset: str | None, synthetic_samples: int,
                  seed: int) -> RgbdDataset:
    """
    The dataset of a run: the manifest at `dataset` if given, synthetic samples otherwise.
    """
    if dataset is None:
        return RgbdDataset.synthetic(kind, synthetic_samples, seed, input_cfg)
    manifest = RgbdDatasetDAO.load_dataset(dataset)
    if manifest.kind is not kind:
        raise ValidationException(f"Dataset {dataset} holds {manifest.kind.value} samples, expected {kind.value}.")
    return RgbdDataset.from_manifest(manifest)


def normalize_depth(depth: torch.Tensor, mode: DepthNormalization,
                    clamp_max: float = 8.0) -> tuple[torch.Tensor, torch.Tensor]:
    """
    Normalizes metric depth per sample.

    :param depth: (B, T, 1, H, W) depth in meters.
    :param mode: minmax maps every sample to [0, 1], scale divides by clamp_max, none keeps meters.
    :param clamp_max: Maximal depth of the dataset.
    :return: The normalized depth and the (B, 2) per-sample (min, range) with depth = min + range * normalized.
    """
    batch_size = depth.shape[0]
    flat = depth.reshape(batch_size, -1)
    if mode is DepthNormalization.MINMAX:
        minimum = flat.min(dim=1).values
        spread = (flat.max(dim=1).values - minimum).clamp_min(RANGE_FLOOR)
    elif mode is DepthNormalization.SCALE:
        minimum = torch.zeros(batch_size, dtype=depth.dtype)
        spread = torch.full((batch_size,), float(clamp_max), dtype=depth.dtype)
    else:
        minimum = torch.zeros(batch_size, dtype=depth.dtype)
        spread = torch.ones(batch_size, dtype=depth.dtype)
    view = (batch_size,) + (1,) * (depth.dim() - 1)
    normalized = (depth - minimum.view(view)) / spread.view(view)
    return normalized, torch.stack([minimum, spread], dim=1)


def collate_samples(samples: Sequence[RgbDepthSample | VideoSample], input_cfg: InputConfig) -> SampleBatch:
    """
    Stacks samples into the 5D layout (B, T, C, H, W), images with T = 1, and normalizes depth.
    """
    rgb = torch.stack([sample.rgb if sample.rgb.dim() == 4 else sample.rgb[None] for sample in samples])
    depth = torch.stack([sample.depth if sample.depth.dim() == 4 else sample.depth[None] for sample in samples])
    expected = (input_cfg.frames, 3, input_cfg.height, input_cfg.width)
    if tuple(rgb.shape[1:]) != expected:
        raise DimensionException(f"Samples of shape {tuple(rgb.shape[1:])} do not match the configured input "
                                 f"{expected}.")

    normalized, stats = normalize_depth(depth, input_cfg.depth_normalization, input_cfg.depth_clamp_max)
    labels = None
    if all(sample.label is not None for sample in samples):
        labels = torch.tensor([sample.label for sample in samples], dtype=torch.long)
    segmentation = None
    if all(getattr(sample, "segmentation", None) is not None for sample in samples):
        segmentation = torch.stack([sample.segmentation for sample in samples]).long()
    return SampleBatch(rgb=rgb, depth=normalized, depth_meters=depth, labels=labels, segmentation=segmentation,
                       depth_stats=stats)


def steps_per_epoch(num_samples: int, batch_size: int) -> int:
    return max(1, num_samples // batch_size)


def batch_indices(num_samples: int, batch_size: int, seed: int, step: int) -> list[int]:
    """
    Indices of the batch of a global step. Every epoch draws a fresh permutation from (seed, epoch) and
    drops the incomplete tail, so a step's batch never depends on the steps before it.
    """
    per_epoch = steps_per_epoch(num_samples, batch_size)
    epoch, position = divmod(step, per_epoch)
    permutation = np.random.default_rng([seed, epoch]).permutation(num_samples)
    return permutation[position * batch_size:(position + 1) * batch_size].tolist()


class StepBatchSampler(Sampler[list[int]]):
    def __init__(self, num_samples: int, batch_size: int, seed: int, start_step: int, end_step: int):
        super().__init__()
        self.num_samples = num_samples
        self.batch_size = batch_size
        self.seed = seed
        self.start_step = start_step
        self.end_step = end_step

    def __iter__(self) -> Iterator[list[int]]:
        for step in range(self.start_step, self.end_step):
            yield batch_indices(self.num_samples, self.batch_size, self.seed, step)

    def __len__(self) -> int:
        return max(0, self.end_step - self.start_step)


def make_loader(dataset: Dataset, input_cfg: InputConfig, batch_size: int, seed: int, start_step: int,
                end_step: int) -> DataLoader:
    """
    A loader yielding the batches of steps [start_step, end_step). Worker processes prefetch while the model
    trains; the number of workers comes from config.yaml.
    """
    sampler = StepBatchSampler(len(dataset), batch_size, seed, start_step, end_step)
    return DataLoader(dataset, batch_sampler=sampler, collate_fn=partial(collate_samples, input_cfg=input_cfg),
                      num_workers=config["data_loader_workers"])
