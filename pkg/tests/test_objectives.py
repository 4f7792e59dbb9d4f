import math

import pytest
import torch

from data_classes import GridGeometry, TokenBatch
from exceptions import DimensionException, NumericalException, ValidationException
from modalities import DepthLossMode, Modality
from objectives import LossWeights, loss_contrastive, loss_contrastive_shared_visible, loss_depth, loss_matching, \
    loss_rgb, loss_stage2, loss_total_video, make_matching_batch, normalize_patches


def test_reconstruction_only_scores_masked_tokens():
    generator = torch.Generator().manual_seed(0)
    for _ in range(1000):
        pred = torch.randn(2, 6, 12, generator=generator)
        target = torch.randn(2, 6, 12, generator=generator)
        masked = torch.rand(2, 6, generator=generator) < 0.5
        masked[0, 0] = True
        noise = torch.randn(2, 6, 12, generator=generator) * (~masked)[..., None]
        for loss in (loss_rgb, loss_depth):
            assert torch.equal(loss(pred, target + noise, masked), loss(pred, target, masked))
            assert torch.equal(loss(pred + noise, target, masked), loss(pred, target, masked))


def test_reconstruction_of_standardized_targets():
    target = torch.randn(1, 3, 8)
    masked = torch.tensor([[True, False, True]])
    assert loss_rgb(normalize_patches(target), target, masked).item() == pytest.approx(0.0, abs=1e-10)
    zeros = torch.zeros(1, 3, 8)
    # standardized patches have unit variance, so predicting zero costs 1 under MSE
    assert loss_rgb(zeros, target, masked).item() == pytest.approx(1.0, abs=1e-4)
    assert loss_depth(zeros, target, masked, DepthLossMode.VIDEO_MSE).item() == pytest.approx(1.0, abs=1e-4)


def test_depth_l1_and_mse_differ():
    pred = torch.full((1, 1, 4), 2.0)
    target = torch.zeros(1, 1, 4)
    masked = torch.ones(1, 1, dtype=torch.bool)
    assert loss_depth(pred, target, masked, normalize_target=False).item() == pytest.approx(2.0)
    assert loss_depth(pred, target, masked, DepthLossMode.VIDEO_MSE, normalize_target=False).item() \
        == pytest.approx(4.0)


def test_constant_patch_normalizes_to_zero():
    assert torch.equal(normalize_patches(torch.full((1, 1, 5), 3.0)), torch.zeros(1, 1, 5))


def test_empty_masked_set_is_rejected():
    with pytest.raises(ValidationException):
        loss_rgb(torch.zeros(1, 2, 3), torch.zeros(1, 2, 3), torch.zeros(1, 2, dtype=torch.bool))
    with pytest.raises(DimensionException):
        loss_rgb(torch.zeros(1, 2, 3), torch.zeros(1, 2, 4), torch.ones(1, 2, dtype=torch.bool))


def test_contrastive_with_aligned_orthonormal_features():
    features = torch.eye(2)[None]
    expected = math.log(1 + math.exp(-1))
    assert loss_contrastive(features, features, tau=1.0).item() == pytest.approx(expected, abs=1e-6)
    assert loss_contrastive(features, features, tau=1.0, symmetric=True).item() == pytest.approx(expected, abs=1e-6)


@pytest.mark.parametrize("k", [2, 4, 8])
def test_contrastive_with_uniform_similarity_is_log_k(k):
    features = torch.ones(3, k, 5)
    assert loss_contrastive(features, features, tau=0.07).item() == pytest.approx(math.log(k), abs=1e-5)


def test_single_patch_contrastive_is_zero():
    assert loss_contrastive(torch.randn(2, 1, 4), torch.randn(2, 1, 4)).item() == pytest.approx(0.0, abs=1e-7)


def test_contrastive_negatives_stay_inside_the_sample():
    features = torch.eye(2)[None]
    other = torch.randn(1, 2, 2)
    single = loss_contrastive(features, features, tau=1.0)
    both = loss_contrastive(torch.cat([features, other]), torch.cat([features, other]), tau=1.0)
    alone = loss_contrastive(other, other, tau=1.0)
    assert both.item() == pytest.approx((single.item() + alone.item()) / 2, abs=1e-6)


def test_contrastive_rejects_bad_features():
    with pytest.raises(DimensionException):
        loss_contrastive(torch.zeros(1, 2, 3), torch.zeros(1, 3, 3))
    with pytest.raises(NumericalException):
        loss_contrastive(torch.full((1, 2, 3), float("nan")), torch.zeros(1, 2, 3))


def test_shared_visible_contrastive_uses_common_positions():
    geometry = GridGeometry(1, 2, 2, 4)
    features = torch.eye(4)[None]
    rgb = TokenBatch(features[:, [0, 1, 2]], geometry, Modality.RGB, torch.tensor([[0, 1, 2]]))
    depth = TokenBatch(features[:, [1, 2, 3]], geometry, Modality.DEPTH, torch.tensor([[1, 2, 3]]))
    restricted = loss_contrastive_shared_visible(rgb, depth, tau=1.0)
    assert restricted.item() == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-6)

    disjoint = TokenBatch(features[:, [3]], geometry, Modality.DEPTH, torch.tensor([[3]]))
    assert loss_contrastive_shared_visible(rgb, disjoint).item() == 0.0


def test_matching_with_uniform_logits_is_log_two():
    labels = torch.tensor([1, 0, 1])
    assert loss_matching(torch.zeros(3, 2), labels).item() == pytest.approx(math.log(2), abs=1e-6)
    with pytest.raises(ValidationException):
        loss_matching(torch.zeros(1, 2), torch.tensor([2]))
    with pytest.raises(DimensionException):
        loss_matching(torch.zeros(2, 3), torch.tensor([0, 1]))


def test_matching_batch():
    single = make_matching_batch(1, 0)
    assert single.labels.tolist() == [1] and single.pairing.tolist() == [0]
    with pytest.raises(ValidationException):
        make_matching_batch(1, 0, force_negative=True)

    negatives = make_matching_batch(6, 3, force_negative=True)
    assert (negatives.labels == 0).all()
    assert (negatives.pairing != torch.arange(6)).all()
    positives = make_matching_batch(6, 3, force_negative=False)
    assert torch.equal(positives.pairing, torch.arange(6)) and (positives.labels == 1).all()

    draw = make_matching_batch(64, 7)
    assert torch.equal(draw.pairing, make_matching_batch(64, 7).pairing)
    matched = draw.labels == 1
    assert torch.equal(draw.pairing[matched], torch.arange(64)[matched])
    assert 0 < int(matched.sum()) < 64


def test_total_is_the_weighted_sum():
    terms = [torch.tensor(value) for value in (0.5, 2.0, 3.0, 0.7)]
    weights = LossWeights(alpha=1.0, beta=0.5, gamma=0.2, eta=0.1)
    report = loss_total_video(*terms, weights)
    assert report.total.item() == pytest.approx(0.5 + 1.0 + 0.6 + 0.07, abs=1e-6)
    assert report.as_row()["matching"] == pytest.approx(0.7, abs=1e-6)
    assert loss_stage2(terms[0], terms[1], 0.1, 1.0).item() == pytest.approx(2.05, abs=1e-6)
    with pytest.raises(ValidationException):
        loss_stage2(terms[0], terms[1], -1.0, 1.0)


def test_depth_loss_of_a_single_patch():
    target = torch.randn(1, 1, 16, generator=torch.Generator().manual_seed(0))
    pred = normalize_patches(target) + 0.5
    masked = torch.ones(1, 1, dtype=torch.bool)
    assert loss_depth(pred, target, masked).item() == pytest.approx(0.5, abs=1e-5)
    assert loss_depth(pred, target, masked, DepthLossMode.VIDEO_MSE).item() == pytest.approx(0.25, abs=1e-5)


def test_depth_l1_scales_with_the_residual():
    generator = torch.Generator().manual_seed(1)
    target = torch.randn(2, 4, 16, generator=generator)
    residual = torch.randn(2, 4, 16, generator=generator)
    masked = torch.tensor([[True, False, True, True], [False, True, False, False]])
    standardized = normalize_patches(target)
    once = loss_depth(standardized + residual, target, masked)
    twice = loss_depth(standardized + 2 * residual, target, masked)
    assert twice.item() == pytest.approx(2 * once.item(), rel=1e-5)


@pytest.mark.parametrize("scale", [0.01, 3.0, 100.0])
def test_contrastive_ignores_feature_scale(scale):
    generator = torch.Generator().manual_seed(2)
    rgb, depth = torch.randn(2, 5, 6, generator=generator), torch.randn(2, 5, 6, generator=generator)
    reference = loss_contrastive(rgb, depth)
    assert loss_contrastive(scale * rgb, depth).item() == pytest.approx(reference.item(), abs=1e-5)
    assert loss_contrastive(rgb, scale * depth).item() == pytest.approx(reference.item(), abs=1e-5)


def test_contrastive_with_orthonormal_features_at_the_default_temperature():
    features = torch.eye(8)[None]
    assert loss_contrastive(features, features, tau=0.07).item() < 1e-4


def test_contrastive_decreases_when_a_pair_aligns():
    depth = torch.eye(2, dtype=torch.float64)[None]

    def loss(angle: float) -> float:
        rgb = torch.tensor([[[math.cos(angle), math.sin(angle)], [0.0, 1.0]]], dtype=torch.float64)
        return loss_contrastive(rgb, depth, tau=1.0).item()

    # rotating the first RGB feature towards its depth partner, i.e. decreasing the angle
    h = 1e-4
    derivative = (loss(math.pi / 4 - h) - loss(math.pi / 4 + h)) / (2 * h)
    assert derivative < 0
    assert derivative == pytest.approx(-math.sqrt(2) / 4, abs=1e-6)


def test_confident_matching_costs_nothing():
    assert loss_matching(torch.tensor([[30.0, -30.0]]), torch.tensor([0])).item() < 1e-6


def test_matching_ignores_a_shift_of_each_row():
    generator = torch.Generator().manual_seed(3)
    logits = torch.randn(5, 2, generator=generator)
    shift = 5 * torch.randn(5, 1, generator=generator)
    labels = torch.tensor([0, 1, 1, 0, 1])
    assert loss_matching(logits + shift, labels).item() == pytest.approx(loss_matching(logits, labels).item(),
                                                                          abs=1e-5)


def test_matching_batches_are_balanced():
    labels = torch.cat([make_matching_batch(4, seed).labels for seed in range(10000)])
    assert labels.float().mean().item() == pytest.approx(0.5, abs=0.02)


def test_forced_negatives_in_a_pair_swap():
    pair = make_matching_batch(2, 0, force_negative=True)
    assert pair.pairing.tolist() == [1, 0] and pair.labels.tolist() == [0, 0]
