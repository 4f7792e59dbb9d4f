"""
Fine-tuning probe on the RGB branch of a pretrained encoder. Classification mean-pools the encoder tokens
into one linear layer; segmentation and depth map every token linearly to its t x P x P block of outputs and
reassemble the raster.
"""

from collections import OrderedDict
from contextlib import nullcontext

import torch
import torch.nn.functional as F
from torch import nn

from exceptions import ConfigurationException, ValidationException
from metrics import IGNORE_INDEX
from modalities import EncoderMode, Modality, ProbeTask
from models.tokenizer import patchify_raster, positional_embedding, unpatchify
from models.transformer import Transformer
from pretrain_config import ModelConfig

MIN_LOG_DEPTH = 1e-3


def encoder_names_from_pretraining(name: str) -> str | None:
    """
    Maps the name of a pretrained RgbdMaskedAutoencoder tensor to the probe's name; None for tensors the probe drops
    (the depth branch, decoder and heads).
    """
    rgb = Modality.RGB.value
    if name.startswith(f"projections.{rgb}."):
        return "projection." + name[len(f"projections.{rgb}."):]
    if name.startswith(f"encoders.{rgb}."):
        return "encoder." + name[len(f"encoders.{rgb}."):]
    if name.startswith("encoder."):
        return name
    if name == f"encoder_modality_embed.{rgb}":
        return "modality_embed"
    return None


class ProbeModel(nn.Module):
    def __init__(self, model_config: ModelConfig, task: ProbeTask, num_classes: int, drop_path: float = 0.0,
                 seed: int | None = None):
        super().__init__()
        self.config = model_config
        self.task = task
        self.num_classes = num_classes
        self.geometry = model_config.input.geometry()
        if task is not ProbeTask.CLASSIFICATION and self.geometry.num_tokens != self.geometry.spatial_cells:
            raise ConfigurationException(f"The {task.value} probe needs single-frame inputs.")

        self.encoder_frozen = False

        context = torch.random.fork_rng(devices=[]) if seed is not None else nullcontext()
        with context:
            if seed is not None:
                torch.manual_seed(seed)
            self._build(drop_path)

    def _build(self, drop_path: float) -> None:
        encoder = self.config.encoder
        self.projection = nn.Linear(self.geometry.patch_dim(Modality.RGB), encoder.width)
        if encoder.mode is EncoderMode.SHARED:
            self.modality_embed = nn.Parameter(torch.zeros(encoder.width))
        self.encoder = Transformer(encoder.width, encoder.depth, encoder.heads, encoder.mlp_ratio, drop_path)
        outputs = {ProbeTask.CLASSIFICATION: self.num_classes,
                   ProbeTask.SEGMENTATION: self.geometry.tubelet * self.geometry.patch_size ** 2 * self.num_classes,
                   ProbeTask.DEPTH: self.geometry.patch_dim(Modality.DEPTH)}[self.task]
        self.head = nn.Linear(encoder.width, outputs)
        self.register_buffer("positions", positional_embedding(self.geometry, encoder.width), persistent=False)

        for module in self.modules():
            if isinstance(module, nn.Linear):
                nn.init.xavier_uniform_(module.weight)
                nn.init.zeros_(module.bias)

    def freeze_encoder(self) -> None:
        """
        Linear probing: only the head is trained and the encoder always runs in eval mode, so drop-path stays
        off.
        """
        for name, parameter in self.named_parameters():
            if not name.startswith("head."):
                parameter.requires_grad_(False)
        self.encoder_frozen = True
        self.encoder.eval()

    def train(self, mode: bool = True) -> "ProbeModel":
        super().train(mode)
        if self.encoder_frozen:
            self.encoder.eval()
        return self

    @property
    def num_layers(self) -> int:
        return len(self.encoder.blocks)

    def layer_of(self, name: str) -> int:
        """
        Depth of a parameter for layer-wise learning-rate decay: 0 for the patch projection, i + 1 for block
        i, num_layers + 1 for the final norm and the head.
        """
        if name.startswith(("projection.", "modality_embed")):
            return 0
        if name.startswith("encoder.blocks."):
            return int(name.split(".")[2]) + 1
        return self.num_layers + 1

    def parameter_manifest(self) -> OrderedDict[str, tuple[int, ...]]:
        return OrderedDict((name, tuple(parameter.shape)) for name, parameter in self.named_parameters())

    def encoder_parameter_names(self) -> list[str]:
        return [name for name in self.parameter_manifest() if not name.startswith("head.")]

    def features(self, rgb: torch.Tensor) -> torch.Tensor:
        tokens = self.projection(patchify_raster(rgb, self.geometry.patch_size, self.geometry.tubelet))
        tokens = tokens + self.positions.to(tokens.dtype)
        if hasattr(self, "modality_embed"):
            tokens = tokens + self.modality_embed
        return self.encoder(tokens)

    def forward(self, rgb: torch.Tensor) -> torch.Tensor:
        """
        :param rgb: (B, T, 3, H, W) in [0, 1].
        :return: Class logits (B, C), segmentation logits (B, C, H, W) or log-depth (B, 1, H, W).
        """
        features = self.features(rgb)
        if self.task is ProbeTask.CLASSIFICATION:
            return self.head(features.mean(dim=1))
        channels = self.num_classes if self.task is ProbeTask.SEGMENTATION else 1
        return unpatchify(self.head(features), self.geometry, channels)[:, 0]

    def loss(self, prediction: torch.Tensor, batch) -> torch.Tensor:
        if self.task is ProbeTask.CLASSIFICATION:
            if batch.labels is None:
                raise ValidationException("The classification probe needs labelled samples.")
            return F.cross_entropy(prediction, batch.labels)
        if self.task is ProbeTask.SEGMENTATION:
            if batch.segmentation is None:
                raise ValidationException("The segmentation probe needs segmentation maps.")
            return F.cross_entropy(prediction, batch.segmentation, ignore_index=IGNORE_INDEX)
        target = torch.log(batch.depth_meters[:, 0].clamp_min(MIN_LOG_DEPTH))
        return F.l1_loss(prediction, target)
