"""
Mask overlays: for every sample a PNG with one row per temporal slice and the columns RGB, masked RGB and
depth, masked depth. Masked patches are painted gray. With a model, the reconstruction of each modality is
shown next to its masked input.
"""

from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from data_classes import MaskPlan, SampleBatch
from exceptions import DimensionException
from logger import logger
from modalities import Modality
from models.masking import masked_matrix, select_visible
from models.rgbd_mae import RgbdMaskedAutoencoder
from models.tokenizer import unpatchify
from objectives import NORM_EPS

MASK_GRAY = 0.5
GAP = 2


def pixel_mask(plans: Sequence[MaskPlan], modality: Modality, batch_size: int) -> torch.Tensor:
    """
    :return: A (B, T, 1, H, W) boolean raster, True on pixels of masked tokens.
    """
    geometry = plans[0].geometry
    masked = masked_matrix(plans, modality, batch_size).float()
    cells = masked[..., None].expand(-1, -1, geometry.tubelet * geometry.patch_size ** 2)
    return unpatchify(cells, geometry, 1) > 0.5


@torch.no_grad()
def reconstruct(model: RgbdMaskedAutoencoder, batch: SampleBatch,
                plans: Sequence[MaskPlan]) -> dict[Modality, torch.Tensor]:
    """
    Rasters with the visible patches of the input and the model's predictions on masked patches. Predictions
    live in the standardized patch space and are mapped back with the statistics of the true patch.
    """
    was_training = model.training
    model.eval()
    raw = model.tokenize(batch.rgb, batch.depth)
    tokens = {modality: select_visible(model.embed(raw[modality], modality), plans) for modality in raw}
    latent_rgb, latent_depth = model.encode(tokens[Modality.RGB], tokens[Modality.DEPTH])
    predictions = dict(zip((Modality.RGB, Modality.DEPTH), model.decode(latent_rgb, latent_depth, plans)))
    model.train(was_training)

    rasters = {}
    for modality, prediction in predictions.items():
        target = raw[modality]
        mean = target.mean(dim=-1, keepdim=True)
        std = (target.var(dim=-1, unbiased=False, keepdim=True) + NORM_EPS).sqrt()
        masked = masked_matrix(plans, modality, batch.batch_size).to(target.device)[..., None]
        patches = torch.where(masked, prediction * std + mean, target)
        rasters[modality] = unpatchify(patches, model.geometry, modality.channels).clamp(0.0, 1.0)
    return rasters


def _to_pixels(raster: torch.Tensor) -> np.ndarray:
    """
    (C, H, W) in [0, 1] -> (H, W, 3) uint8; single channels are repeated.
    """
    array = raster.detach().cpu().float().clamp(0.0, 1.0).numpy()
    if array.shape[0] == 1:
        array = np.repeat(array, 3, axis=0)
    return (array.transpose(1, 2, 0) * 255.0 + 0.5).astype(np.uint8)


def overlay_panel(rgb: torch.Tensor, depth: torch.Tensor, mask_rgb: torch.Tensor, mask_depth: torch.Tensor,
                  tubelet: int = 1, reconstruction: dict[Modality, torch.Tensor] | None = None) -> Image.Image:
    """
    Composes the panel of one sample.

    :param rgb: (T, 3, H, W) in [0, 1].
    :param depth: (T, 1, H, W) normalized depth.
    :param mask_rgb: (T, 1, H, W) masked pixels of the RGB plan.
    :param mask_depth: (T, 1, H, W) masked pixels of the depth plan.
    :param tubelet: Only the first frame of each tubelet is drawn.
    :param reconstruction: Optional (T, C, H, W) rasters per modality.
    :return: The panel image.
    """
    if rgb.shape[0] != depth.shape[0] or rgb.shape[-2:] != depth.shape[-2:]:
        raise DimensionException("RGB and depth rasters of a panel must match.")
    depth = depth.clamp(0.0, 1.0)
    rows = []
    for frame in range(0, rgb.shape[0], tubelet):
        columns = [rgb[frame], torch.where(mask_rgb[frame], MASK_GRAY, rgb[frame])]
        if reconstruction is not None:
            columns.append(reconstruction[Modality.RGB][frame])
        columns += [depth[frame], torch.where(mask_depth[frame], MASK_GRAY, depth[frame])]
        if reconstruction is not None:
            columns.append(reconstruction[Modality.DEPTH][frame])
        rows.append([_to_pixels(column) for column in columns])

    height, width = rgb.shape[-2:]
    panel = Image.new("RGB", (len(rows[0]) * (width + GAP) - GAP, len(rows) * (height + GAP) - GAP), "white")
    for r, row in enumerate(rows):
        for c, pixels in enumerate(row):
            panel.paste(Image.fromarray(pixels), (c * (width + GAP), r * (height + GAP)))
    return panel


def save_mask_overlays(batch: SampleBatch, plans: Sequence[MaskPlan], out_dir: str | Path,
                       model: RgbdMaskedAutoencoder | None = None) -> list[Path]:
    """
    Writes mask_<index>.png for every item of a batch.

    :return: The written files.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    geometry = plans[0].geometry
    masks = {modality: pixel_mask(plans, modality, batch.batch_size) for modality in Modality}
    reconstruction = reconstruct(model, batch, plans) if model is not None else None

    paths = []
    for item in range(batch.batch_size):
        panel = overlay_panel(batch.rgb[item].cpu(), batch.depth[item].cpu(), masks[Modality.RGB][item],
                              masks[Modality.DEPTH][item], geometry.tubelet,
                              {modality: raster[item].cpu() for modality, raster in reconstruction.items()}
                              if reconstruction is not None else None)
        path = out_dir / f"mask_{item:04d}.png"
        panel.save(path)
        paths.append(path)
    logger.info(f"Wrote {len(paths)} mask overlays to {out_dir}.")
    return paths
