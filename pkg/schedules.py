"""
Learning-rate schedule and AdamW parameter groups.
"""

import math
from typing import Callable

import torch
from torch import nn

from pretrain_config import OptimizerConfig


class WarmupCosineSchedule(torch.optim.lr_scheduler.LambdaLR):
    """
    Linear warmup from warmup_lr to the base learning rate over warmup_steps, then cosine decay to min_lr at
    total_steps. Learning rates are absolute and scaled per group by the group's share of the base rate,
    so layer-wise decayed groups keep their ratios.
    """

    def __init__(self, optimizer: torch.optim.Optimizer, base_lr: float, warmup_steps: int, total_steps: int,
                 warmup_lr: float = 0.0, min_lr: float = 0.0, last_epoch: int = -1):
        self.base_lr = base_lr
        self.warmup_steps = warmup_steps
        self.total_steps = max(total_steps, 1)
        self.warmup_lr = warmup_lr
        self.min_lr = min_lr
        super().__init__(optimizer, lr_lambda=self.scale_lr, last_epoch=last_epoch)

    def lr_at(self, step: int) -> float:
        if step < self.warmup_steps:
            return self.warmup_lr + (self.base_lr - self.warmup_lr) * step / self.warmup_steps
        decay_steps = self.total_steps - self.warmup_steps
        progress = min(max((step - self.warmup_steps) / decay_steps, 0.0), 1.0) if decay_steps > 0 else 1.0
        return self.min_lr + (self.base_lr - self.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))

    def scale_lr(self, step: int) -> float:
        return self.lr_at(step) / self.base_lr

    def start_at(self, step: int) -> None:
        """
        Moves a fresh schedule to `step`, used when a run resumes.
        """
        self.last_epoch = step
        for group, initial in zip(self.optimizer.param_groups, self.base_lrs):
            group["lr"] = initial * self.scale_lr(step)
        self._last_lr = [group["lr"] for group in self.optimizer.param_groups]


def build_schedule(optimizer: torch.optim.Optimizer, cfg: OptimizerConfig, steps_per_epoch: int,
                   total_steps: int, start_step: int = 0) -> WarmupCosineSchedule:
    warmup_steps = min(round(cfg.warmup_epochs * steps_per_epoch), total_steps)
    schedule = WarmupCosineSchedule(optimizer, cfg.lr, warmup_steps, total_steps, cfg.warmup_lr, cfg.min_lr)
    if start_step:
        schedule.start_at(start_step)
    return schedule


def _no_weight_decay(name: str, parameter: nn.Parameter) -> bool:
    return parameter.ndim <= 1 or "modality_embed" in name or "mask_token" in name


def param_groups_weight_decay(named_parameters: list[tuple[str, nn.Parameter]],
                              weight_decay: float) -> list[dict]:
    """
    Two AdamW groups: matrices with weight decay; biases, norms, mask tokens and modality embeddings without.
    """
    decay, no_decay = [], []
    for name, parameter in named_parameters:
        (no_decay if _no_weight_decay(name, parameter) else decay).append(parameter)
    return [{"params": decay, "weight_decay": weight_decay}, {"params": no_decay, "weight_decay": 0.0}]


def layer_decay_param_groups(named_parameters: list[tuple[str, nn.Parameter]], base_lr: float,
                             weight_decay: float, layer_decay: float, num_layers: int,
                             layer_of: Callable[[str], int]) -> list[dict]:
    """
    AdamW groups for fine-tuning with layer-wise learning-rate decay. A parameter of layer i (0 for the patch
    projection, 1..L for the blocks, L + 1 for the final norm and the head) trains at
    base_lr * layer_decay ** (L + 1 - i).
    """
    groups: dict[tuple[int, bool], dict] = {}
    for name, parameter in named_parameters:
        if not parameter.requires_grad:
            continue
        layer = layer_of(name)
        exempt = _no_weight_decay(name, parameter)
        key = (layer, exempt)
        if key not in groups:
            scale = layer_decay ** (num_layers + 1 - layer)
            groups[key] = {"params": [], "lr": base_lr * scale, "lr_scale": scale, "layer": layer,
                           "weight_decay": 0.0 if exempt else weight_decay}
        groups[key]["params"].append(parameter)
    return [groups[key] for key in sorted(groups)]
