"""
Patch and tubelet tokenization. Rasters use the 5D layout (B, T, C, H, W); a token holds a t x P x P block
flattened in (t, p, q, c) order, and tokens are ordered t-major, then h, then w.
"""

import torch
from einops import rearrange
from torch import nn

from data_classes import GridGeometry, RgbDepthSample, TokenBatch, VideoSample
from exceptions import ConfigurationException, DimensionException
from modalities import Modality

POSITION_TEMPERATURE = 10000.0

_TO_TOKENS = "b (nt t) c (nh p) (nw q) -> b (nt nh nw) (t p q c)"
_TO_RASTER = "b (nt nh nw) (t p q c) -> b (nt t) c (nh p) (nw q)"


def patchify_raster(raster: torch.Tensor, patch_size: int, tubelet: int = 1) -> torch.Tensor:
    """
    :param raster: (B, T, C, H, W).
    :return: (B, N, t * P * P * C).
    """
    if raster.dim() != 5:
        raise DimensionException(f"Expected a raster of shape (B, T, C, H, W), got {tuple(raster.shape)}.")
    GridGeometry.for_input(raster.shape[1], raster.shape[3], raster.shape[4], patch_size, tubelet)
    return rearrange(raster, _TO_TOKENS, t=tubelet, p=patch_size, q=patch_size)


def unpatchify(patches: torch.Tensor, geometry: GridGeometry, channels: int) -> torch.Tensor:
    """
    Exact inverse of patchify_raster: (B, N, t * P * P * C) -> (B, T, C, H, W).
    """
    expected = (geometry.num_tokens, geometry.tubelet * geometry.patch_size ** 2 * channels)
    if patches.dim() != 3 or tuple(patches.shape[1:]) != expected:
        raise DimensionException(f"Patches {tuple(patches.shape)} do not fit the grid, expected (B, {expected[0]}, "
                                 f"{expected[1]}).")
    return rearrange(patches, _TO_RASTER, nt=geometry.n_t, nh=geometry.n_h, nw=geometry.n_w, t=geometry.tubelet,
                     p=geometry.patch_size, q=geometry.patch_size, c=channels)


def _modality_raster(source: RgbDepthSample | VideoSample | torch.Tensor, modality: Modality) -> torch.Tensor:
    raster = getattr(source, modality.value) if isinstance(source, (RgbDepthSample, VideoSample)) else source
    if raster.shape[-3] != modality.channels:
        raise DimensionException(f"A {modality.value} raster needs {modality.channels} channels, "
                                 f"got {raster.shape[-3]}.")
    return raster


def patchify(sample: RgbDepthSample | torch.Tensor, patch_size: int, modality: Modality) -> torch.Tensor:
    """
    Splits one image into its raw patch matrix.

    :param sample: A sample or a (C, H, W) raster of the modality.
    :param patch_size: Patch size P.
    :param modality: Which raster of the sample to use.
    :return: (N, P * P * C).
    """
    raster = _modality_raster(sample, modality)
    if raster.dim() != 3:
        raise DimensionException(f"Expected an image of shape (C, H, W), got {tuple(raster.shape)}.")
    return patchify_raster(raster[None, None], patch_size)[0]


def tubify(clip: VideoSample | torch.Tensor, patch_size: int, tubelet: int, modality: Modality) -> torch.Tensor:
    """
    Splits one clip into its raw tubelet matrix.

    :param clip: A clip or a (T, C, H, W) raster of the modality.
    :return: (N, t * P * P * C).
    """
    raster = _modality_raster(clip, modality)
    if raster.dim() != 4:
        raise DimensionException(f"Expected a clip of shape (T, C, H, W), got {tuple(raster.shape)}.")
    return patchify_raster(raster[None], patch_size, tubelet)[0]


def project(raw: torch.Tensor, modality: Modality, projection: nn.Linear, geometry: GridGeometry) -> TokenBatch:
    """
    Applies the modality's affine projection to every token.

    :param raw: (B, N, in_dim) or (N, in_dim) raw patches.
    :param modality: The modality of the patches.
    :param projection: Linear layer holding the (D, in_dim) weight and bias.
    :param geometry: Grid the patches were cut from.
    :return: Tokens of width D.
    """
    if raw.dim() == 2:
        raw = raw[None]
    if raw.dim() != 3 or raw.shape[-1] != projection.in_features or raw.shape[-1] != geometry.patch_dim(modality):
        raise DimensionException(f"Raw {modality.value} patches {tuple(raw.shape)} do not fit a projection from "
                                 f"{projection.in_features} (grid patch size {geometry.patch_dim(modality)}).")
    return TokenBatch(tokens=projection(raw), geometry=geometry, modality=modality)


def _sincos_1d(dim: int, positions: torch.Tensor) -> torch.Tensor:
    """
    (len(positions), dim) table: sines at dim / 2 geometric frequencies, followed by the cosines.
    """
    omega = torch.arange(dim // 2, dtype=torch.float64) / (dim / 2.0)
    omega = 1.0 / POSITION_TEMPERATURE ** omega
    angles = positions.double()[:, None] * omega[None]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)


def positional_embedding(geometry: GridGeometry, width: int) -> torch.Tensor:
    """
    Fixed sine-cosine table of the grid. Images (n_t = 1) split the width in half between h and w; clips
    use a quarter for t and three eighths each for h and w, every part rounded down to an even size and
    the rest filled with zeros.

    :param geometry: The token grid.
    :param width: Embedding width D.
    :return: (N, D) float32 table in token order.
    """
    coordinates = geometry.coordinates()
    if geometry.n_t == 1:
        if width % 4:
            raise ConfigurationException(f"Image positional embeddings need a width divisible by 4, got {width}.")
        table = torch.cat([_sincos_1d(width // 2, coordinates[:, 1]), _sincos_1d(width // 2, coordinates[:, 2])],
                          dim=1)
        return table.float()

    temporal = width // 4 // 2 * 2
    spatial = 3 * width // 8 // 2 * 2
    if temporal < 2 or spatial < 2:
        raise ConfigurationException(f"Width {width} is too small for clip positional embeddings.")
    parts = [_sincos_1d(temporal, coordinates[:, 0]), _sincos_1d(spatial, coordinates[:, 1]),
             _sincos_1d(spatial, coordinates[:, 2]),
             torch.zeros(geometry.num_tokens, width - temporal - 2 * spatial, dtype=torch.float64)]
    return torch.cat(parts, dim=1).float()


def add_positions(batch: TokenBatch, table: torch.Tensor | None = None) -> TokenBatch:
    """
    Adds the positional embedding of every token's grid position; subsets use their index map.

    :param table: Precomputed positional_embedding(batch.geometry, batch.width).
    """
    if table is None:
        table = positional_embedding(batch.geometry, batch.width)
    table = table.to(device=batch.tokens.device, dtype=batch.tokens.dtype)
    if table.shape != (batch.geometry.num_tokens, batch.width):
        raise DimensionException(f"Positional table {tuple(table.shape)} does not fit tokens of width {batch.width}.")
    positions = table[batch.index_map] if batch.index_map is not None else table[None]
    return batch.with_tokens(batch.tokens + positions)
