import pytest
import torch
from torch import nn

from pretrain_config import OptimizerConfig
from schedules import WarmupCosineSchedule, build_schedule, layer_decay_param_groups, param_groups_weight_decay


def _optimizer(lr: float = 1e-3) -> torch.optim.Optimizer:
    return torch.optim.AdamW([nn.Parameter(torch.zeros(2, 2))], lr=lr)


def test_warmup_then_cosine_decay():
    schedule = WarmupCosineSchedule(_optimizer(), base_lr=1e-3, warmup_steps=10, total_steps=100)
    assert schedule.lr_at(0) == pytest.approx(0.0)
    assert schedule.lr_at(5) == pytest.approx(5e-4)
    assert schedule.lr_at(10) == pytest.approx(1e-3)
    assert schedule.lr_at(55) == pytest.approx(5e-4)
    assert schedule.lr_at(100) == pytest.approx(0.0, abs=1e-12)
    after_warmup = [schedule.lr_at(step) for step in range(10, 101)]
    assert all(a >= b for a, b in zip(after_warmup, after_warmup[1:]))


def test_optimizer_follows_the_schedule():
    optimizer = _optimizer()
    schedule = WarmupCosineSchedule(optimizer, base_lr=1e-3, warmup_steps=4, total_steps=8, min_lr=1e-5)
    seen = []
    for _ in range(8):
        seen.append(optimizer.param_groups[0]["lr"])
        optimizer.step()
        schedule.step()
    assert seen == pytest.approx([schedule.lr_at(step) for step in range(8)])
    assert optimizer.param_groups[0]["lr"] == pytest.approx(1e-5)


def test_start_at_matches_a_schedule_that_ran():
    ran = _optimizer()
    schedule = WarmupCosineSchedule(ran, 1e-3, 3, 20)
    for _ in range(7):
        ran.step()
        schedule.step()
    resumed = _optimizer()
    WarmupCosineSchedule(resumed, 1e-3, 3, 20).start_at(7)
    assert resumed.param_groups[0]["lr"] == pytest.approx(ran.param_groups[0]["lr"])


def test_build_schedule_converts_warmup_epochs():
    schedule = build_schedule(_optimizer(), OptimizerConfig(lr=1e-3, warmup_epochs=2.0), steps_per_epoch=5,
                              total_steps=40)
    assert schedule.warmup_steps == 10
    assert build_schedule(_optimizer(), OptimizerConfig(warmup_epochs=5.0), 5, 12).warmup_steps == 12


def test_weight_decay_groups():
    model = nn.Sequential(nn.Linear(4, 4), nn.LayerNorm(4))
    decay, no_decay = param_groups_weight_decay(list(model.named_parameters()), 0.05)
    assert [tuple(parameter.shape) for parameter in decay["params"]] == [(4, 4)]
    assert len(no_decay["params"]) == 3 and no_decay["weight_decay"] == 0.0


def test_layer_decay_scales():
    named = [("projection.weight", nn.Parameter(torch.zeros(2, 2))),
             ("encoder.blocks.0.mlp.fc1.weight", nn.Parameter(torch.zeros(2, 2))),
             ("encoder.blocks.1.mlp.fc1.weight", nn.Parameter(torch.zeros(2, 2))),
             ("head.weight", nn.Parameter(torch.zeros(2, 2))),
             ("head.bias", nn.Parameter(torch.zeros(2)))]
    layers = {"projection": 0, "encoder.blocks.0": 1, "encoder.blocks.1": 2, "head": 3}

    def layer_of(name: str) -> int:
        return next(layer for prefix, layer in layers.items() if name.startswith(prefix))

    groups = layer_decay_param_groups(named, base_lr=1.0, weight_decay=0.05, layer_decay=0.5, num_layers=2,
                                      layer_of=layer_of)
    scales = {(group["layer"], group["weight_decay"]): group["lr"] for group in groups}
    assert scales == {(0, 0.05): 0.125, (1, 0.05): 0.25, (2, 0.05): 0.5, (3, 0.05): 1.0, (3, 0.0): 1.0}


def test_frozen_parameters_are_left_out():
    frozen = nn.Parameter(torch.zeros(2, 2), requires_grad=False)
    groups = layer_decay_param_groups([("encoder.x", frozen), ("head.weight", nn.Parameter(torch.zeros(2, 2)))],
                                      1.0, 0.0, 0.75, 1, lambda name: 2 if name.startswith("head") else 1)
    assert len(groups) == 1 and groups[0]["lr"] == 1.0
