from dataclasses import dataclass, field, replace
from pathlib import Path

import torch

from exceptions import DimensionException, ValidationException, NumericalException
from modalities import Modality


def _validate_rasters(rgb: torch.Tensor, depth: torch.Tensor) -> None:
    """
    Checks the raster contract shared by images and clips: 3 RGB channels and 1 depth channel in the
    third-last dimension, identical spatial size, RGB in [0, 1] and finite, non-negative depth.
    """
    if rgb.shape[-3] != 3 or depth.shape[-3] != 1:
        raise DimensionException(f"Expected 3 RGB and 1 depth channel, got {rgb.shape[-3]} and {depth.shape[-3]}.")
    if rgb.shape[:-3] != depth.shape[:-3] or rgb.shape[-2:] != depth.shape[-2:]:
        raise DimensionException(f"RGB {tuple(rgb.shape)} and depth {tuple(depth.shape)} do not match.")
    if rgb.numel() and (rgb.min() < 0 or rgb.max() > 1):
        raise ValidationException("RGB values must lie in [0, 1].")
    if not torch.isfinite(depth).all() or (depth.numel() and depth.min() < 0):
        raise ValidationException("Depth values must be finite and >= 0.")


@dataclass(frozen=True)
class RgbDepthSample:
    """
    A single RGB-D frame. rgb has shape (3, H, W) in [0, 1], depth (1, H, W) in meters.
    segmentation, if present, holds a per-pixel class map of shape (H, W).
    """
    rgb: torch.Tensor
    depth: torch.Tensor
    label: int | None = None
    segmentation: torch.Tensor | None = None

    def __post_init__(self):
        if self.rgb.dim() != 3:
            raise DimensionException(f"Expected an RGB raster of shape (3, H, W), got {tuple(self.rgb.shape)}.")
        _validate_rasters(self.rgb, self.depth)
        if self.segmentation is not None and self.segmentation.shape != self.rgb.shape[-2:]:
            raise DimensionException("Segmentation map must match the raster resolution.")

    @property
    def height(self) -> int:
        return self.rgb.shape[-2]

    @property
    def width(self) -> int:
        return self.rgb.shape[-1]


@dataclass(frozen=True)
class VideoSample:
    """
    A clip of T paired frames: rgb (T, 3, H, W), depth (T, 1, H, W). T must be even so that the default
    two-frame tubelets tile the clip.
    """
    rgb: torch.Tensor
    depth: torch.Tensor
    label: int | None = None

    def __post_init__(self):
        if self.rgb.dim() != 4:
            raise DimensionException(f"Expected a clip of shape (T, 3, H, W), got {tuple(self.rgb.shape)}.")
        if self.rgb.shape[0] % 2:
            raise DimensionException(f"Clip length must be even, got {self.rgb.shape[0]} frames.")
        _validate_rasters(self.rgb, self.depth)

    @property
    def frames(self) -> int:
        return self.rgb.shape[0]

    @property
    def height(self) -> int:
        return self.rgb.shape[-2]

    @property
    def width(self) -> int:
        return self.rgb.shape[-1]


@dataclass(frozen=True)
class GridGeometry:
    """
    The token grid of an image (n_t = 1, tubelet = 1) or a clip. Tokens are ordered t-major, then h,
    then w: index = (t * n_h + h) * n_w + w.
    """
    n_t: int
    n_h: int
    n_w: int
    patch_size: int
    tubelet: int = 1

    @classmethod
    def for_input(cls, frames: int, height: int, width: int, patch_size: int, tubelet: int = 1) -> "GridGeometry":
        if height % patch_size or width % patch_size:
            raise DimensionException(f"Resolution {height}x{width} is not divisible by patch size {patch_size}.")
        if frames % tubelet:
            raise DimensionException(f"{frames} frames are not divisible by tubelet size {tubelet}.")
        return cls(frames // tubelet, height // patch_size, width // patch_size, patch_size, tubelet)

    @property
    def spatial_cells(self) -> int:
        return self.n_h * self.n_w

    @property
    def num_tokens(self) -> int:
        return self.n_t * self.n_h * self.n_w

    def patch_dim(self, modality: Modality) -> int:
        return self.tubelet * self.patch_size ** 2 * modality.channels

    def coordinates(self) -> torch.Tensor:
        """
        :return: A (N, 3) tensor holding the (t, h, w) grid index of every token.
        """
        t, h, w = torch.meshgrid(torch.arange(self.n_t), torch.arange(self.n_h), torch.arange(self.n_w),
                                 indexing="ij")
        return torch.stack([t.flatten(), h.flatten(), w.flatten()], dim=1)


@dataclass(frozen=True)
class TokenBatch:
    """
    Embedded tokens of one modality, shape (B, N, D). If index_map is set, the batch holds a subset of
    the grid and index_map (B, N_vis) names the grid index of every token; otherwise it holds the full
    grid in token order.
    """
    tokens: torch.Tensor
    geometry: GridGeometry
    modality: Modality
    index_map: torch.Tensor | None = None

    def __post_init__(self):
        if self.tokens.dim() != 3:
            raise DimensionException(f"Tokens must have shape (B, N, D), got {tuple(self.tokens.shape)}.")
        if self.index_map is None and self.tokens.shape[1] != self.geometry.num_tokens:
            raise DimensionException(f"{self.tokens.shape[1]} tokens do not fill a grid of "
                                     f"{self.geometry.num_tokens}.")
        if self.index_map is not None and self.index_map.shape != self.tokens.shape[:2]:
            raise DimensionException("index_map must have shape (B, N_vis).")
        if not torch.isfinite(self.tokens).all():
            raise NumericalException(f"Non-finite {self.modality.value} tokens.")

    @property
    def width(self) -> int:
        return self.tokens.shape[-1]

    def with_tokens(self, tokens: torch.Tensor) -> "TokenBatch":
        return replace(self, tokens=tokens)


@dataclass(frozen=True)
class MaskPlan:
    """
    Visibility of every grid position for both modalities of one sample; True means visible.
    """
    geometry: GridGeometry
    visible_rgb: torch.Tensor
    visible_depth: torch.Tensor
    ratio_rgb: float
    ratio_depth: float
    seed: int
    strategy_rgb: str = "random"
    strategy_depth: str = "random"

    def visible(self, modality: Modality) -> torch.Tensor:
        return self.visible_rgb if modality is Modality.RGB else self.visible_depth

    def masked(self, modality: Modality) -> torch.Tensor:
        return ~self.visible(modality)


@dataclass
class SampleBatch:
    """
    A collated batch in the unified 5D layout (B, T, C, H, W); images use T = 1.
    depth is the normalized model input, depth_meters the raw metric depth and depth_stats (B, 2) the
    per-sample (min, range) the normalization used.
    """
    rgb: torch.Tensor
    depth: torch.Tensor
    depth_meters: torch.Tensor
    labels: torch.Tensor | None = None
    segmentation: torch.Tensor | None = None
    depth_stats: torch.Tensor | None = None

    @property
    def batch_size(self) -> int:
        return self.rgb.shape[0]

    def to(self, device: torch.device | str) -> "SampleBatch":
        return SampleBatch(*[value.to(device) if value is not None else None
                             for value in (self.rgb, self.depth, self.depth_meters, self.labels, self.segmentation,
                                           self.depth_stats)])


@dataclass(frozen=True)
class MatchingBatch:
    """
    pairing[i] is the batch item whose depth is paired with the RGB of item i; labels[i] is 1 for a
    matched pair and 0 otherwise.
    """
    pairing: torch.Tensor
    labels: torch.Tensor


@dataclass
class PretrainResult:
    checkpoint: Path
    final_step: int
    history: list[dict] = field(default_factory=list)
    stage1_final_encoder_checksum: str | None = None
    stage2_initial_encoder_checksum: str | None = None


@dataclass
class MetricReport:
    task: str
    metric: str
    value: float
    train_samples: int
    eval_samples: int
