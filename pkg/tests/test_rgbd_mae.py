import pytest
import torch

from conftest import random_batch
from exceptions import DimensionException, ValidationException
from modalities import EncoderMode, Modality, TrainingObjective
from models.masking import full_plan, make_plans, select_visible
from models.rgbd_mae import ENCODER_PREFIXES, RgbdMaskedAutoencoder, parameter_count
from pretrain_config import MaskConfig, ModelConfig
from visualization import pixel_mask


def _shared(model_config: ModelConfig) -> ModelConfig:
    encoder = model_config.encoder.model_copy(update={"mode": EncoderMode.SHARED})
    return model_config.model_copy(update={"encoder": encoder})


@pytest.mark.parametrize("shared", [False, True])
def test_parameter_count_matches_the_formula(tiny_model_config, shared):
    model_config = _shared(tiny_model_config) if shared else tiny_model_config
    model = RgbdMaskedAutoencoder(model_config)
    assert sum(parameter.numel() for parameter in model.parameters()) == parameter_count(model_config)


def test_seeded_construction_is_reproducible(tiny_model_config):
    first, second = RgbdMaskedAutoencoder(tiny_model_config, seed=4), RgbdMaskedAutoencoder(tiny_model_config, seed=4)
    for (name, a), (_, b) in zip(first.named_parameters(), second.named_parameters()):
        assert torch.equal(a, b), name


def test_parameter_namespaces(tiny_model_config):
    specific = RgbdMaskedAutoencoder(tiny_model_config).parameter_manifest()
    assert any(name.startswith("encoders.rgb.") for name in specific)
    assert any(name.startswith("encoders.depth.") for name in specific)
    shared = RgbdMaskedAutoencoder(_shared(tiny_model_config)).parameter_manifest()
    assert "encoder_modality_embed.rgb" in shared
    assert not any(name.startswith("encoders.") for name in shared)


def test_encode_and_decode_shapes(tiny_model_config):
    model = RgbdMaskedAutoencoder(tiny_model_config, seed=0)
    batch = random_batch(tiny_model_config, 3)
    plans = make_plans(model.geometry, MaskConfig(rgb_ratio=0.5, depth_ratio=0.75), 0, 3)
    raw = model.tokenize(batch.rgb, batch.depth)
    assert raw[Modality.RGB].shape == (3, 8, 2 * 4 * 4 * 3)
    assert raw[Modality.DEPTH].shape == (3, 8, 2 * 4 * 4)

    visible = [select_visible(model.embed(raw[modality], modality), plans) for modality in Modality]
    latent_rgb, latent_depth = model.encode(*visible)
    assert latent_rgb.tokens.shape == (3, 4, 16) and latent_depth.tokens.shape == (3, 2, 16)
    assert torch.equal(latent_rgb.index_map, visible[0].index_map)

    rgb_pred, depth_pred = model.decode(latent_rgb, latent_depth, plans)
    assert rgb_pred.shape == raw[Modality.RGB].shape
    assert depth_pred.shape == raw[Modality.DEPTH].shape


def test_decode_rejects_latents_of_another_plan(tiny_model_config):
    model = RgbdMaskedAutoencoder(tiny_model_config, seed=0)
    batch = random_batch(tiny_model_config, 2)
    raw = model.tokenize(batch.rgb, batch.depth)
    plans = make_plans(model.geometry, MaskConfig(rgb_ratio=0.5, depth_ratio=0.5), 0, 2)
    other = make_plans(model.geometry, MaskConfig(rgb_ratio=0.5, depth_ratio=0.5), 1, 2)
    latents = model.encode(*[select_visible(model.embed(raw[modality], modality), plans) for modality in Modality])
    with pytest.raises(DimensionException):
        model.decode(*latents, other)


def test_specific_encoders_do_not_mix_modalities(tiny_model_config):
    model = RgbdMaskedAutoencoder(tiny_model_config, seed=0)
    batch = random_batch(tiny_model_config, 2)
    raw = model.tokenize(batch.rgb, batch.depth)
    tokens = {modality: model.embed(raw[modality], modality) for modality in Modality}
    rgb, _ = model.encode(tokens[Modality.RGB], tokens[Modality.DEPTH])
    changed = tokens[Modality.DEPTH].with_tokens(tokens[Modality.DEPTH].tokens + 1.0)
    rgb_again, _ = model.encode(tokens[Modality.RGB], changed)
    assert torch.equal(rgb.tokens, rgb_again.tokens)


def test_matching_logits(tiny_model_config):
    model = RgbdMaskedAutoencoder(tiny_model_config, seed=0)
    batch = random_batch(tiny_model_config, 4)
    raw = model.tokenize(batch.rgb, batch.depth)
    latents = model.encode(*[model.embed(raw[modality], modality) for modality in Modality])
    assert model.matching_logits(*latents).shape == (4, 2)
    assert model.matching_logits(*latents, torch.tensor([1, 0, 3, 2])).shape == (4, 2)

    plan = full_plan(model.geometry)
    empty = plan.visible_rgb.clone().fill_(False)
    nothing = type(plan)(plan.geometry, empty, empty, 1.0, 1.0, 0)
    hidden = model.embed(raw[Modality.RGB], Modality.RGB)
    with pytest.raises(ValidationException):
        model.matching_logits(select_visible(hidden, nothing), latents[1])


def test_stage_manifests(tiny_model_config):
    model = RgbdMaskedAutoencoder(tiny_model_config)
    stage1 = model.stage_parameter_names(TrainingObjective.STAGE1)
    stage2 = model.stage_parameter_names(TrainingObjective.STAGE2)
    assert stage1 and all(name.startswith(ENCODER_PREFIXES) for name in stage1)
    assert not any(name.startswith(("decoder", "mask_token", "reconstruction_heads")) for name in stage1)
    assert not any(name.startswith("matching_head") for name in stage2)
    assert set(model.stage_parameter_names(TrainingObjective.VIDEO)) == set(model.parameter_manifest())


def _attention_weights(block, x: torch.Tensor) -> torch.Tensor:
    attention = block.attn
    batch_size, n, width = x.shape
    qkv = attention.qkv(block.norm1(x)).reshape(batch_size, n, 3, attention.num_heads, attention.head_dim)
    q, k, _ = qkv.permute(2, 0, 3, 1, 4).unbind(0)
    q, k = attention.q_norm(q), attention.k_norm(k)
    return ((q * attention.scale) @ k.transpose(-2, -1)).softmax(dim=-1)


def test_encoder_is_permutation_equivariant(tiny_model_config):
    model = RgbdMaskedAutoencoder(tiny_model_config, seed=0).eval()
    batch = random_batch(tiny_model_config, 2)
    raw = model.tokenize(batch.rgb, batch.depth)
    tokens = {modality: model.embed(raw[modality], modality) for modality in Modality}
    permutation = torch.randperm(model.geometry.num_tokens, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        latents = model.encode(tokens[Modality.RGB], tokens[Modality.DEPTH])
        shuffled = model.encode(*[tokens[modality].with_tokens(tokens[modality].tokens[:, permutation])
                                  for modality in Modality])
    for latent, latent_shuffled in zip(latents, shuffled):
        assert torch.allclose(latent.tokens[:, permutation], latent_shuffled.tokens, atol=1e-5)


def test_masked_pixels_do_not_reach_the_encoder(tiny_model_config):
    model = RgbdMaskedAutoencoder(tiny_model_config, seed=0).eval()
    batch = random_batch(tiny_model_config, 2)
    plans = make_plans(model.geometry, MaskConfig(rgb_ratio=0.5, depth_ratio=0.75), 0, 2)
    rgb = batch.rgb + 5.0 * pixel_mask(plans, Modality.RGB, 2)
    depth = batch.depth - 3.0 * pixel_mask(plans, Modality.DEPTH, 2)

    def run(rgb_raster: torch.Tensor, depth_raster: torch.Tensor):
        raw = model.tokenize(rgb_raster, depth_raster)
        visible = [select_visible(model.embed(raw[modality], modality), plans) for modality in Modality]
        latents = model.encode(*visible)
        return visible, latents, model.decode(*latents, plans)

    with torch.no_grad():
        visible, latents, predictions = run(batch.rgb, batch.depth)
        visible_changed, latents_changed, predictions_changed = run(rgb, depth)
    assert not torch.equal(rgb, batch.rgb)
    for before, after in zip(visible + list(latents), visible_changed + list(latents_changed)):
        assert torch.equal(before.tokens, after.tokens)
    for before, after in zip(predictions, predictions_changed):
        assert torch.equal(before, after)


def test_masked_decoder_slots_hold_the_mask_token(tiny_model_config):
    model = RgbdMaskedAutoencoder(tiny_model_config, seed=0).eval()
    batch = random_batch(tiny_model_config, 2)
    plans = make_plans(model.geometry, MaskConfig(rgb_ratio=0.5, depth_ratio=0.5), 3, 2)
    raw = model.tokenize(batch.rgb, batch.depth)
    with torch.no_grad():
        latent = model.encode(*[select_visible(model.embed(raw[modality], modality), plans)
                                for modality in Modality])[0]
        decoder_tokens = model._decoder_tokens(latent, plans)
    rgb = Modality.RGB.value
    for item, plan in enumerate(plans):
        for index in (~plan.visible(Modality.RGB)).nonzero().squeeze(1).tolist():
            expected = model.mask_token[rgb] + model.decoder_positions[index] + model.decoder_modality_embed[rgb]
            assert torch.allclose(decoder_tokens[item, index], expected, atol=1e-6)


def test_attention_rows_are_distributions(tiny_model_config):
    model = RgbdMaskedAutoencoder(tiny_model_config, seed=0).eval()
    batch = random_batch(tiny_model_config, 2)
    tokens = model.embed(model.tokenize(batch.rgb, batch.depth)[Modality.RGB], Modality.RGB).tokens
    block = model.encoder_for(Modality.RGB).blocks[0]
    with torch.no_grad():
        weights = _attention_weights(block, tokens)
        assert weights.shape == (2, 2, 8, 8) and (weights >= 0).all()
        assert torch.allclose(weights.sum(dim=-1), torch.ones(2, 2, 8), atol=1e-5)
        v = block.attn.qkv(block.norm1(tokens)).reshape(2, 8, 3, 2, 8).permute(2, 0, 3, 1, 4)[2]
        mixed = block.attn.proj((weights @ v).transpose(1, 2).reshape(2, 8, 16))
        assert torch.allclose(mixed, block.attn(block.norm1(tokens)), atol=1e-5)


def test_eval_decode_is_deterministic(tiny_model_config):
    model = RgbdMaskedAutoencoder(tiny_model_config, seed=0).eval()
    batch = random_batch(tiny_model_config, 2)
    raw = model.tokenize(batch.rgb, batch.depth)
    plan = full_plan(model.geometry)
    with torch.no_grad():
        latents = model.encode(*[model.embed(raw[modality], modality) for modality in Modality])
        first, second = model.decode(*latents, plan), model.decode(*latents, plan)
    assert torch.equal(first[0], second[0]) and torch.equal(first[1], second[1])


def test_matching_head_with_zero_weights_returns_its_bias(tiny_model_config):
    model = RgbdMaskedAutoencoder(tiny_model_config, seed=0).eval()
    batch = random_batch(tiny_model_config, 4)
    raw = model.tokenize(batch.rgb, batch.depth)
    with torch.no_grad():
        latents = model.encode(*[model.embed(raw[modality], modality) for modality in Modality])
        model.matching_head.weight.zero_()
        model.matching_head.bias.copy_(torch.tensor([0.3, -1.2]))
        logits = model.matching_logits(*latents)
    assert torch.equal(logits, torch.tensor([[0.3, -1.2]]).expand(4, 2))


def test_pairing_only_changes_the_swapped_rows(tiny_model_config):
    model = RgbdMaskedAutoencoder(tiny_model_config, seed=0).eval()
    batch = random_batch(tiny_model_config, 4)
    raw = model.tokenize(batch.rgb, batch.depth)
    with torch.no_grad():
        latents = model.encode(*[model.embed(raw[modality], modality) for modality in Modality])
        straight = model.matching_logits(*latents)
        swapped = model.matching_logits(*latents, torch.tensor([1, 0, 2, 3]))
    assert torch.equal(straight[2:], swapped[2:])
    assert not torch.allclose(straight[0], swapped[0]) and not torch.allclose(straight[1], swapped[1])
