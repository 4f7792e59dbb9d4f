"""
Training objectives: masked RGB and depth reconstruction, patch-level RGB-depth InfoNCE, RGB-depth matching
and their weighted combinations for the video objective and the two image stages.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat

from data_classes import MatchingBatch, TokenBatch
from exceptions import DimensionException, NumericalException, ValidationException
from modalities import DepthLossMode

NORM_EPS = 1e-6
FEATURE_NORM_EPS = 1e-8


class LossWeights(BaseModel):
    model_config = ConfigDict(extra="forbid", allow_inf_nan=False)

    alpha: float = Field(1.0, ge=0.0)
    beta: float = Field(0.1, ge=0.0)
    gamma: float = Field(0.01, ge=0.0)
    eta: float = Field(0.01, ge=0.0)
    tau: PositiveFloat = 0.07
    symmetric_contrastive: bool = False


LOSS_WEIGHT_PRESETS = {
    "clip_reconstruction": LossWeights(alpha=1.0, beta=0.1, gamma=0.01, eta=0.01),
    "clip_alignment": LossWeights(alpha=1.0, beta=0.5, gamma=0.2, eta=0.1),
    "image_depth_heavy": LossWeights(alpha=0.1, beta=1.0, gamma=0.0, eta=0.0),
}


@dataclass
class LossReport:
    """
    One step's loss decomposition. Terms that are not part of the active objective are None.
    """
    total: torch.Tensor
    rgb: torch.Tensor | None = None
    depth: torch.Tensor | None = None
    contrastive: torch.Tensor | None = None
    matching: torch.Tensor | None = None
    masked_rgb: int = 0
    masked_depth: int = 0

    def terms(self) -> dict[str, torch.Tensor]:
        return {name: value for name, value in (("rgb", self.rgb), ("depth", self.depth),
                                                ("contrastive", self.contrastive), ("matching", self.matching))
                if value is not None}

    def check_finite(self) -> None:
        for name, value in {**self.terms(), "total": self.total}.items():
            if not torch.isfinite(value).all():
                raise NumericalException(f"Non-finite {name} loss: {value.item()}")

    def as_row(self) -> dict[str, float | None]:
        row = {"total": self.total.item()}
        for name in ("rgb", "depth", "contrastive", "matching"):
            value = getattr(self, name)
            row[name] = value.item() if value is not None else None
        return row


def _check_masked_set(pred: torch.Tensor, target: torch.Tensor, masked: torch.Tensor) -> None:
    if pred.shape != target.shape:
        raise DimensionException(f"Prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ.")
    if masked.shape != pred.shape[:-1]:
        raise DimensionException(f"Mask {tuple(masked.shape)} does not match predictions {tuple(pred.shape)}.")
    if not masked.any():
        raise ValidationException("The set of masked tokens is empty.")


def normalize_patches(patches: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    """
    Standardizes every patch (last dimension) to zero mean and unit variance. The variance floor eps maps a
    constant patch to the zero vector.
    """
    mean = patches.mean(dim=-1, keepdim=True)
    var = patches.var(dim=-1, unbiased=False, keepdim=True)
    return (patches - mean) / (var + eps) ** 0.5


def loss_rgb(pred: torch.Tensor, target_patches: torch.Tensor, masked: torch.Tensor,
             normalize_target: bool = True) -> torch.Tensor:
    """
    Mean over masked tokens of the per-patch MSE between prediction and standardized target.

    :param pred: Predicted patches (B, N, t * P * P * 3).
    :param target_patches: Raw target patches of the same shape.
    :param masked: Boolean (B, N), True where the token was masked.
    :param normalize_target: Standardize each target patch first.
    :return: Scalar loss.
    """
    _check_masked_set(pred, target_patches, masked)
    target = normalize_patches(target_patches) if normalize_target else target_patches
    per_patch = (pred - target).pow(2).mean(dim=-1)
    return per_patch[masked].mean()


def loss_depth(pred: torch.Tensor, target_patches: torch.Tensor, masked: torch.Tensor,
               mode: DepthLossMode = DepthLossMode.IMAGE_L1, normalize_target: bool = True) -> torch.Tensor:
    """
    Masked depth reconstruction: L1 for image pretraining, MSE for video pretraining, averaged over the
    masked tokens. Target patches are standardized like the RGB targets.
    """
    _check_masked_set(pred, target_patches, masked)
    target = normalize_patches(target_patches) if normalize_target else target_patches
    residual = pred - target
    if mode is DepthLossMode.IMAGE_L1:
        per_patch = residual.abs().mean(dim=-1)
    else:
        per_patch = residual.pow(2).mean(dim=-1)
    return per_patch[masked].mean()


def loss_contrastive(feat_rgb: torch.Tensor, feat_depth: torch.Tensor, tau: float = 0.07,
                     symmetric: bool = False) -> torch.Tensor:
    """
    Patch-level InfoNCE between RGB and depth features of the same samples. Row i of every sample's
    similarity matrix has its positive at column i; the negatives are the other depth patches of the same
    sample only.

    :param feat_rgb: (B, K, D) RGB features; index i corresponds to the same grid position in both inputs.
    :param feat_depth: (B, K, D) depth features.
    :param tau: Temperature.
    :param symmetric: Average with the depth-to-RGB direction.
    :return: Scalar loss averaged over rows and samples.
    """
    if feat_rgb.dim() != 3 or feat_rgb.shape != feat_depth.shape:
        raise DimensionException(f"Feature shapes {tuple(feat_rgb.shape)} and {tuple(feat_depth.shape)} differ.")
    batch_size, k, _ = feat_rgb.shape
    if k < 1:
        raise ValidationException("Contrastive loss needs at least one patch pair.")
    if not (torch.isfinite(feat_rgb).all() and torch.isfinite(feat_depth).all()):
        raise NumericalException("Non-finite features in the contrastive loss.")

    rgb = F.normalize(feat_rgb, dim=-1, eps=FEATURE_NORM_EPS)
    depth = F.normalize(feat_depth, dim=-1, eps=FEATURE_NORM_EPS)
    logits = rgb @ depth.transpose(1, 2) / tau
    targets = torch.arange(k, device=logits.device).repeat(batch_size)

    loss = F.cross_entropy(logits.reshape(batch_size * k, k), targets)
    if symmetric:
        reverse = F.cross_entropy(logits.transpose(1, 2).reshape(batch_size * k, k), targets)
        loss = (loss + reverse) / 2
    return loss


def _grid_indices(batch: TokenBatch) -> torch.Tensor:
    if batch.index_map is not None:
        return batch.index_map
    positions = torch.arange(batch.tokens.shape[1], device=batch.tokens.device)
    return positions.expand(batch.tokens.shape[0], -1)


def loss_contrastive_shared_visible(latent_rgb: TokenBatch, latent_depth: TokenBatch, tau: float = 0.07,
                                    symmetric: bool = False) -> torch.Tensor:
    """
    InfoNCE restricted, per sample, to the grid positions visible in both modalities. Samples without a
    shared position are skipped; if no sample has one the loss is 0.
    """
    rgb_positions = _grid_indices(latent_rgb)
    depth_positions = _grid_indices(latent_depth)
    losses = []
    for b in range(latent_rgb.tokens.shape[0]):
        keep_rgb = torch.isin(rgb_positions[b], depth_positions[b])
        if not keep_rgb.any():
            continue
        keep_depth = torch.isin(depth_positions[b], rgb_positions[b])
        losses.append(loss_contrastive(latent_rgb.tokens[b, keep_rgb][None], latent_depth.tokens[b, keep_depth][None],
                                       tau, symmetric))
    if not losses:
        return (latent_rgb.tokens.sum() + latent_depth.tokens.sum()) * 0.0
    return torch.stack(losses).mean()


def loss_matching(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """
    Two-class cross-entropy of the matching head; label 1 marks a matched RGB-depth pair.
    """
    if logits.dim() != 2 or logits.shape[1] != 2 or logits.shape[0] != labels.shape[0]:
        raise DimensionException(f"Expected logits (M, 2) and labels (M,), got {tuple(logits.shape)} "
                                 f"and {tuple(labels.shape)}.")
    if logits.shape[0] < 1:
        raise ValidationException("Matching loss needs at least one pair.")
    if ((labels != 0) & (labels != 1)).any():
        raise ValidationException("Matching labels must be 0 or 1.")
    return F.cross_entropy(logits, labels.long())


def make_matching_batch(batch_size: int, seed: int, force_negative: bool | None = None) -> MatchingBatch:
    """
    Builds matched and mismatched RGB-depth pairs inside a batch. Every item keeps its own depth with
    probability 1/2; otherwise it is paired with the depth of another, uniformly chosen item.
    A single-item batch can only form a matched pair.

    :param batch_size: Number of pairs B.
    :param seed: Seed of the draw.
    :param force_negative: True or False forces every item negative or positive.
    :return: The pairing and labels.
    """
    if batch_size < 1:
        raise ValidationException("Matching needs a non-empty batch.")
    rng = np.random.default_rng(seed)
    if force_negative is None:
        negative = rng.random(batch_size) < 0.5 if batch_size >= 2 else np.zeros(batch_size, dtype=bool)
    else:
        negative = np.full(batch_size, force_negative)
    if negative.any() and batch_size < 2:
        raise ValidationException("A negative pair needs at least two items in the batch.")

    pairing = np.arange(batch_size)
    for i in np.flatnonzero(negative):
        other = int(rng.integers(batch_size - 1))
        pairing[i] = other + (other >= i)
    return MatchingBatch(pairing=torch.from_numpy(pairing), labels=torch.from_numpy((~negative).astype(np.int64)))


def _check_weights(*weights: float) -> None:
    if any(not np.isfinite(weight) or weight < 0 for weight in weights):
        raise ValidationException(f"Loss weights must be finite and non-negative, got {weights}.")


def loss_total_video(rgb: torch.Tensor, depth: torch.Tensor, contrastive: torch.Tensor, matching: torch.Tensor,
                     weights: LossWeights, masked_rgb: int = 0, masked_depth: int = 0) -> LossReport:
    _check_weights(weights.alpha, weights.beta, weights.gamma, weights.eta)
    total = weights.alpha * rgb + weights.beta * depth + weights.gamma * contrastive + weights.eta * matching
    return LossReport(total=total, rgb=rgb, depth=depth, contrastive=contrastive, matching=matching,
                      masked_rgb=masked_rgb, masked_depth=masked_depth)


def loss_stage1(feat_rgb: torch.Tensor, feat_depth: torch.Tensor, tau: float = 0.07,
                symmetric: bool = False) -> torch.Tensor:
    return loss_contrastive(feat_rgb, feat_depth, tau, symmetric)


def loss_stage2(rgb: torch.Tensor, depth: torch.Tensor, alpha: float, beta: float) -> torch.Tensor:
    _check_weights(alpha, beta)
    return alpha * rgb + beta * depth
