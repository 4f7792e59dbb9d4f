import pytest
import torch

from conftest import random_batch
from modalities import TrainingObjective
from models.masking import make_plans
from models.rgbd_mae import ENCODER_PREFIXES, RgbdMaskedAutoencoder
from models.training_step import forward_backward, forward_video
from objectives import LossWeights, make_matching_batch
from pretrain_config import MaskConfig

EPS = 1e-3
REL_TOL = 1e-2
ABS_TOL = 1e-5


@pytest.mark.parametrize("batch_size", [1, 2])
def test_video_objective_matches_finite_differences(tiny_model_config, batch_size):
    torch.manual_seed(0)
    model = RgbdMaskedAutoencoder(tiny_model_config, seed=0).double()
    batch = random_batch(tiny_model_config, batch_size, seed=1, dtype=torch.float64)
    plans = make_plans(model.geometry, MaskConfig(rgb_ratio=0.25, depth_ratio=0.25), 3, batch_size)
    matching = make_matching_batch(batch_size, 5)
    weights = LossWeights(alpha=1.0, beta=0.5, gamma=0.2, eta=0.1, tau=0.5)

    _, _, gradients = forward_backward(model, batch, TrainingObjective.VIDEO, weights, plans, matching)

    def total() -> float:
        return forward_video(model, batch, plans, weights, matching).total.item()

    failures = []
    with torch.no_grad():
        for name, parameter in model.named_parameters():
            flat = parameter.view(-1)
            analytic = gradients[name].view(-1)
            for index in range(flat.numel()):
                original = flat[index].item()
                flat[index] = original + EPS
                up = total()
                flat[index] = original - EPS
                down = total()
                flat[index] = original
                numeric = (up - down) / (2 * EPS)
                exact = analytic[index].item()
                if abs(exact - numeric) > REL_TOL * max(abs(exact), abs(numeric)) + ABS_TOL:
                    failures.append((name, index, exact, numeric))
    assert not failures, failures[:10]


def test_every_video_parameter_receives_a_gradient(tiny_model_config):
    model = RgbdMaskedAutoencoder(tiny_model_config, seed=0)
    batch = random_batch(tiny_model_config, 4)
    plans = make_plans(model.geometry, MaskConfig(rgb_ratio=0.5, depth_ratio=0.5), 0, 4)
    _, _, gradients = forward_backward(model, batch, TrainingObjective.VIDEO, LossWeights(), plans,
                                       make_matching_batch(4, 0))
    assert set(gradients) == set(model.parameter_manifest())
    assert all(torch.isfinite(gradient).all() for gradient in gradients.values())


def test_stage1_gradients_never_reach_the_decoder(tiny_model_config):
    model = RgbdMaskedAutoencoder(tiny_model_config, seed=0)
    batch = random_batch(tiny_model_config, 2)
    _, report, gradients = forward_backward(model, batch, TrainingObjective.STAGE1, LossWeights())
    assert gradients and all(name.startswith(ENCODER_PREFIXES) for name in gradients)
    assert report.rgb is None and report.depth is None and report.matching is None
    for name, parameter in model.named_parameters():
        if not name.startswith(ENCODER_PREFIXES):
            assert parameter.grad is None, name


def test_stage2_excludes_contrastive_and_matching(tiny_model_config):
    model = RgbdMaskedAutoencoder(tiny_model_config, seed=0)
    batch = random_batch(tiny_model_config, 2)
    plans = make_plans(model.geometry, MaskConfig(rgb_ratio=0.5, depth_ratio=0.5), 0, 2)
    weights = LossWeights(alpha=0.1, beta=1.0)
    total, report, gradients = forward_backward(model, batch, TrainingObjective.STAGE2, weights, plans)
    assert report.contrastive is None and report.matching is None
    assert not any(name.startswith("matching_head") for name in gradients)
    assert model.matching_head.weight.grad is None
    assert total.item() == pytest.approx(0.1 * report.rgb.item() + 1.0 * report.depth.item(), abs=1e-6)


def test_zero_weights_give_zero_loss_and_gradients(tiny_model_config):
    model = RgbdMaskedAutoencoder(tiny_model_config, seed=0)
    batch = random_batch(tiny_model_config, 2)
    plans = make_plans(model.geometry, MaskConfig(rgb_ratio=0.25, depth_ratio=0.25), 0, 2)
    weights = LossWeights(alpha=0.0, beta=0.0, gamma=0.0, eta=0.0)
    total, _, gradients = forward_backward(model, batch, TrainingObjective.VIDEO, weights, plans,
                                           make_matching_batch(2, 0))
    assert total.item() == 0.0
    for name, gradient in gradients.items():
        assert torch.count_nonzero(gradient) == 0, name


def test_contrastive_term_only_trains_the_encoder(tiny_model_config):
    model = RgbdMaskedAutoencoder(tiny_model_config, seed=0)
    batch = random_batch(tiny_model_config, 2)
    plans = make_plans(model.geometry, MaskConfig(rgb_ratio=0.25, depth_ratio=0.25), 0, 2)
    weights = LossWeights(alpha=0.0, beta=0.0, gamma=1.0, eta=0.0)
    total, report, gradients = forward_backward(model, batch, TrainingObjective.VIDEO, weights, plans,
                                                make_matching_batch(2, 0))
    assert total.item() == pytest.approx(report.contrastive.item())
    decoding = ("decoder.", "decoder_embed.", "mask_token.", "decoder_modality_embed.", "reconstruction_heads.",
                "matching_head.")
    for name, gradient in gradients.items():
        if name.startswith(decoding):
            assert torch.count_nonzero(gradient) == 0, name
    assert any(torch.count_nonzero(gradient) > 0 for name, gradient in gradients.items()
               if name.startswith(ENCODER_PREFIXES))
