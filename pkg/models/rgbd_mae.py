"""
The multi-modal masked autoencoder: per-modality patch projections, a modality-specific or shared encoder,
the shared decoder over the concatenated RGB and depth grids, per-modality reconstruction heads and the
RGB-depth matching head.
"""

from collections import OrderedDict
from contextlib import nullcontext
from typing import Sequence

import torch
from torch import nn

from data_classes import MaskPlan, TokenBatch
from exceptions import DimensionException, ValidationException
from logger import logger
from modalities import EncoderMode, Modality, TrainingObjective
from models.masking import scatter_visible
from models.tokenizer import add_positions, patchify_raster, positional_embedding, project
from models.transformer import Transformer
from pretrain_config import ModelConfig

# Parameter namespaces that make up "the encoder" for stage 1, the stage handoff and fine-tuning.
ENCODER_PREFIXES = ("projections.", "encoder.", "encoders.", "encoder_modality_embed.")
MATCHING_PREFIX = "matching_head."


def _block_parameters(width: int, mlp_ratio: float) -> int:
    hidden = int(width * mlp_ratio)
    # two LayerNorms, qkv and output projection, two MLP layers
    return 4 * width + (4 * width ** 2 + 4 * width) + (2 * width * hidden + hidden + width)


def _transformer_parameters(width: int, depth: int, mlp_ratio: float) -> int:
    return depth * _block_parameters(width, mlp_ratio) + 2 * width


def parameter_count(model_config: ModelConfig) -> int:
    """
    Number of learnable scalars of an RgbdMaskedAutoencoder built from model_config:

        projections       sum over modalities of (patch_dim + 1) * D
        encoder(s)        2 * T(D) in specific mode, T(D) + 2 * D in shared mode
        decoder           (D + 1) * Dd + 4 * Dd (mask tokens, modality embeddings) + T(Dd)
        heads             (Dd + 1) * (rgb patch_dim + depth patch_dim)
        matching head     2 * D * 2 + 2

    where T(w) = depth * (4 w^2 + 2 w h + 9 w + h) + 2 w for blocks of MLP width h.
    """
    geometry = model_config.input.geometry()
    encoder, decoder = model_config.encoder, model_config.decoder
    width, decoder_width = encoder.width, decoder.width
    patch_dims = [geometry.patch_dim(modality) for modality in Modality]

    count = sum((dim + 1) * width for dim in patch_dims)
    encoder_size = _transformer_parameters(width, encoder.depth, encoder.mlp_ratio)
    count += encoder_size + 2 * width if encoder.mode is EncoderMode.SHARED else 2 * encoder_size
    count += (width + 1) * decoder_width + 4 * decoder_width
    count += _transformer_parameters(decoder_width, decoder.depth, decoder.mlp_ratio)
    count += (decoder_width + 1) * sum(patch_dims)
    return count + 2 * width * 2 + 2


class RgbdMaskedAutoencoder(nn.Module):
    def __init__(self, model_config: ModelConfig, seed: int | None = None):
        super().__init__()
        self.config = model_config
        self.geometry = model_config.input.geometry()
        self.mode = model_config.encoder.mode

        context = torch.random.fork_rng(devices=[]) if seed is not None else nullcontext()
        with context:
            if seed is not None:
                torch.manual_seed(seed)
            self._build()
            self._initialize()

        logger.debug(f"Built the {self.mode.value}-encoder autoencoder with {parameter_count(model_config)} "
                     f"parameters.")

    def _build(self) -> None:
        encoder, decoder = self.config.encoder, self.config.decoder
        width, decoder_width = encoder.width, decoder.width

        self.projections = nn.ModuleDict({modality.value: nn.Linear(self.geometry.patch_dim(modality), width)
                                          for modality in Modality})
        if self.mode is EncoderMode.SHARED:
            self.encoder = Transformer(width, encoder.depth, encoder.heads, encoder.mlp_ratio, encoder.drop_path)
            self.encoder_modality_embed = nn.ParameterDict({modality.value: nn.Parameter(torch.zeros(width))
                                                            for modality in Modality})
        else:
            self.encoders = nn.ModuleDict({
                modality.value: Transformer(width, encoder.depth, encoder.heads, encoder.mlp_ratio, encoder.drop_path)
                for modality in Modality})

        self.decoder_embed = nn.Linear(width, decoder_width)
        self.mask_token = nn.ParameterDict({modality.value: nn.Parameter(torch.zeros(decoder_width))
                                            for modality in Modality})
        self.decoder_modality_embed = nn.ParameterDict({modality.value: nn.Parameter(torch.zeros(decoder_width))
                                                        for modality in Modality})
        self.decoder = Transformer(decoder_width, decoder.depth, decoder.heads, decoder.mlp_ratio)
        self.reconstruction_heads = nn.ModuleDict({
            modality.value: nn.Linear(decoder_width, self.geometry.patch_dim(modality)) for modality in Modality})
        self.matching_head = nn.Linear(2 * width, 2)

        self.register_buffer("encoder_positions", positional_embedding(self.geometry, width), persistent=False)
        self.register_buffer("decoder_positions", positional_embedding(self.geometry, decoder_width),
                             persistent=False)

    def _initialize(self) -> None:
        self.apply(self._init_weights)
        for embeddings in (self.mask_token, self.decoder_modality_embed,
                           getattr(self, "encoder_modality_embed", {})):
            for parameter in embeddings.values():
                nn.init.normal_(parameter, std=0.02)

    @staticmethod
    def _init_weights(module: nn.Module) -> None:
        if isinstance(module, nn.Linear):
            nn.init.xavier_uniform_(module.weight)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.LayerNorm):
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)

    def encoder_for(self, modality: Modality) -> Transformer:
        return self.encoder if self.mode is EncoderMode.SHARED else self.encoders[modality.value]

    def tokenize(self, rgb: torch.Tensor, depth: torch.Tensor) -> dict[Modality, torch.Tensor]:
        """
        Raw patches of both rasters of a (B, T, C, H, W) batch.
        """
        return {modality: patchify_raster(raster, self.geometry.patch_size, self.geometry.tubelet)
                for modality, raster in ((Modality.RGB, rgb), (Modality.DEPTH, depth))}

    def embed(self, raw: torch.Tensor, modality: Modality) -> TokenBatch:
        """
        Projects raw patches and adds the fixed positional embedding to every token.
        """
        tokens = project(raw, modality, self.projections[modality.value], self.geometry)
        return add_positions(tokens, self.encoder_positions)

    def encode(self, visible_rgb: TokenBatch, visible_depth: TokenBatch) -> tuple[TokenBatch, TokenBatch]:
        """
        Runs the encoder over the tokens of every modality; token counts and index maps are preserved. In
        shared mode the modality embedding is added to the inputs first.
        """
        latents = []
        for batch in (visible_rgb, visible_depth):
            if batch.width != self.config.encoder.width:
                raise DimensionException(f"{batch.modality.value} tokens have width {batch.width}, the encoder "
                                         f"expects {self.config.encoder.width}.")
            tokens = batch.tokens
            if self.mode is EncoderMode.SHARED:
                tokens = tokens + self.encoder_modality_embed[batch.modality.value]
            latents.append(batch.with_tokens(self.encoder_for(batch.modality)(tokens)))
        return latents[0], latents[1]

    def _decoder_tokens(self, latent: TokenBatch, plans: MaskPlan | Sequence[MaskPlan]) -> torch.Tensor:
        modality = latent.modality
        batch_size = latent.tokens.shape[0]
        plans = [plans] * batch_size if isinstance(plans, MaskPlan) else list(plans)
        if len(plans) != batch_size or latent.geometry != self.geometry:
            raise DimensionException(f"{len(plans)} plans do not match {modality.value} latents of batch "
                                     f"size {batch_size}.")
        for item, plan in enumerate(plans):
            visible = plan.visible(modality).nonzero().squeeze(1).to(latent.tokens.device)
            positions = latent.index_map[item] if latent.index_map is not None \
                else torch.arange(self.geometry.num_tokens, device=latent.tokens.device)
            if not torch.equal(positions, visible):
                raise DimensionException(f"{modality.value} latents of item {item} do not match the visible set "
                                         f"of its mask plan.")

        embedded = latent.with_tokens(self.decoder_embed(latent.tokens))
        full = scatter_visible(embedded, self.mask_token[modality.value])
        return full.tokens + self.decoder_positions + self.decoder_modality_embed[modality.value]

    def decode(self, latent_rgb: TokenBatch, latent_depth: TokenBatch,
               plans: MaskPlan | Sequence[MaskPlan]) -> tuple[torch.Tensor, torch.Tensor]:
        """
        Reconstructs both full grids: visible latents are mapped to the decoder width and scattered into
        place, masked slots take the modality's mask token, then positions and modality embeddings are added
        and the decoder runs over the concatenated 2N tokens.

        :return: rgb_pred (B, N, t * P * P * 3) and depth_pred (B, N, t * P * P).
        """
        n = self.geometry.num_tokens
        sequence = torch.cat([self._decoder_tokens(latent_rgb, plans), self._decoder_tokens(latent_depth, plans)],
                             dim=1)
        decoded = self.decoder(sequence)
        return (self.reconstruction_heads[Modality.RGB.value](decoded[:, :n]),
                self.reconstruction_heads[Modality.DEPTH.value](decoded[:, n:]))

    def matching_logits(self, latent_rgb: TokenBatch, latent_depth: TokenBatch,
                        pairing: torch.Tensor | None = None) -> torch.Tensor:
        """
        Mean-pools the tokens of each modality and classifies the concatenated pair.

        :param pairing: pairing[i] names the item whose depth is paired with the RGB of item i.
        :return: (B, 2) logits; the softmax is applied inside the loss.
        """
        if latent_rgb.tokens.shape[1] == 0 or latent_depth.tokens.shape[1] == 0:
            raise ValidationException("Matching needs at least one visible token per modality.")
        pooled_rgb = latent_rgb.tokens.mean(dim=1)
        pooled_depth = latent_depth.tokens.mean(dim=1)
        if pairing is not None:
            pooled_depth = pooled_depth[pairing.to(pooled_depth.device)]
        return self.matching_head(torch.cat([pooled_rgb, pooled_depth], dim=1))

    def parameter_manifest(self) -> OrderedDict[str, tuple[int, ...]]:
        """
        Ordered name -> shape of every learnable tensor.
        """
        return OrderedDict((name, tuple(parameter.shape)) for name, parameter in self.named_parameters())

    def stage_parameter_names(self, objective: TrainingObjective) -> list[str]:
        """
        Parameters an objective may update: stage 1 the projections and encoder(s), stage 2 everything but
        the matching head, the video objective everything.
        """
        names = list(self.parameter_manifest())
        if objective is TrainingObjective.STAGE1:
            return [name for name in names if name.startswith(ENCODER_PREFIXES)]
        if objective is TrainingObjective.STAGE2:
            return [name for name in names if not name.startswith(MATCHING_PREFIX)]
        return names
