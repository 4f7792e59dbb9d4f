"""
One optimization step's forward and backward pass for the three objectives: the video objective (all four
terms), image stage 1 (contrastive on full grids) and image stage 2 (masked reconstruction).
"""

from typing import Sequence

import torch

from data_classes import MaskPlan, MatchingBatch, SampleBatch
from exceptions import ValidationException
from modalities import DepthLossMode, Modality, TrainingObjective
from models.masking import masked_matrix, select_visible
from models.rgbd_mae import RgbdMaskedAutoencoder
from objectives import (LossReport, LossWeights, loss_contrastive_shared_visible, loss_depth, loss_matching,
                        loss_rgb, loss_stage1, loss_stage2, loss_total_video)


def _embed_both(model: RgbdMaskedAutoencoder, batch: SampleBatch):
    raw = model.tokenize(batch.rgb, batch.depth)
    return raw, model.embed(raw[Modality.RGB], Modality.RGB), model.embed(raw[Modality.DEPTH], Modality.DEPTH)


def _reconstruct(model: RgbdMaskedAutoencoder, batch: SampleBatch, plans: Sequence[MaskPlan],
                 depth_mode: DepthLossMode):
    raw, tokens_rgb, tokens_depth = _embed_both(model, batch)
    latent_rgb, latent_depth = model.encode(select_visible(tokens_rgb, plans), select_visible(tokens_depth, plans))
    rgb_pred, depth_pred = model.decode(latent_rgb, latent_depth, plans)

    masked_rgb = masked_matrix(plans, Modality.RGB, batch.batch_size).to(rgb_pred.device)
    masked_depth = masked_matrix(plans, Modality.DEPTH, batch.batch_size).to(depth_pred.device)
    rgb = loss_rgb(rgb_pred, raw[Modality.RGB], masked_rgb)
    depth = loss_depth(depth_pred, raw[Modality.DEPTH], masked_depth, depth_mode)
    return latent_rgb, latent_depth, rgb, depth, int(masked_rgb.sum()), int(masked_depth.sum())


def forward_video(model: RgbdMaskedAutoencoder, batch: SampleBatch, plans: Sequence[MaskPlan], weights: LossWeights,
                  matching: MatchingBatch, depth_mode: DepthLossMode = DepthLossMode.VIDEO_MSE) -> LossReport:
    latent_rgb, latent_depth, rgb, depth, masked_rgb, masked_depth = _reconstruct(model, batch, plans, depth_mode)
    contrastive = loss_contrastive_shared_visible(latent_rgb, latent_depth, weights.tau,
                                                  weights.symmetric_contrastive)
    logits = model.matching_logits(latent_rgb, latent_depth, matching.pairing)
    matching_loss = loss_matching(logits, matching.labels.to(logits.device))
    return loss_total_video(rgb, depth, contrastive, matching_loss, weights, masked_rgb, masked_depth)


def forward_stage1(model: RgbdMaskedAutoencoder, batch: SampleBatch, weights: LossWeights) -> LossReport:
    _, tokens_rgb, tokens_depth = _embed_both(model, batch)
    latent_rgb, latent_depth = model.encode(tokens_rgb, tokens_depth)
    contrastive = loss_stage1(latent_rgb.tokens, latent_depth.tokens, weights.tau, weights.symmetric_contrastive)
    return LossReport(total=contrastive, contrastive=contrastive)


def forward_stage2(model: RgbdMaskedAutoencoder, batch: SampleBatch, plans: Sequence[MaskPlan], weights: LossWeights,
                   depth_mode: DepthLossMode = DepthLossMode.IMAGE_L1) -> LossReport:
    _, _, rgb, depth, masked_rgb, masked_depth = _reconstruct(model, batch, plans, depth_mode)
    total = loss_stage2(rgb, depth, weights.alpha, weights.beta)
    return LossReport(total=total, rgb=rgb, depth=depth, masked_rgb=masked_rgb, masked_depth=masked_depth)


def forward_backward(model: RgbdMaskedAutoencoder, batch: SampleBatch, objective: TrainingObjective,
                     weights: LossWeights, plans: Sequence[MaskPlan] | None = None,
                     matching: MatchingBatch | None = None, depth_mode: DepthLossMode | None = None
                     ) -> tuple[torch.Tensor, LossReport, dict[str, torch.Tensor]]:
    """
    Computes the objective's loss and back-propagates it.

    :param model: The model; its gradients are reset first.
    :param batch: The input batch.
    :param objective: Which objective to optimize.
    :param weights: Loss weights and temperature.
    :param plans: One mask plan per item (video and stage 2).
    :param matching: Matched and mismatched pairs (video).
    :param depth_mode: Depth loss mode; MSE for the video objective and L1 for stage 2 by default.
    :return: The detached total loss, the per-term report and a gradient for every parameter the objective
        may update (zeros where no gradient reaches the parameter).
    """
    model.zero_grad(set_to_none=True)
    if objective is TrainingObjective.STAGE1:
        report = forward_stage1(model, batch, weights)
    elif plans is None:
        raise ValidationException(f"The {objective.value} objective needs mask plans.")
    elif objective is TrainingObjective.STAGE2:
        report = forward_stage2(model, batch, plans, weights, depth_mode or DepthLossMode.IMAGE_L1)
    elif matching is None:
        raise ValidationException("The video objective needs a matching batch.")
    else:
        report = forward_video(model, batch, plans, weights, matching, depth_mode or DepthLossMode.VIDEO_MSE)

    report.check_finite()
    report.total.backward()

    parameters = dict(model.named_parameters())
    gradients = {}
    for name in model.stage_parameter_names(objective):
        grad = parameters[name].grad
        gradients[name] = grad.detach().clone() if grad is not None else torch.zeros_like(parameters[name])
    return report.total.detach(), report, gradients
