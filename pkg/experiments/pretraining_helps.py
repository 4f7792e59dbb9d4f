"""
Low-label comparison on the motion-direction probe: fine-tuning from a video pretraining checkpoint against
an identically configured probe trained from scratch, plus the same pretraining without the contrastive
term. Every arm runs on the same seeds.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from exceptions import ValidationException
from finetuning import finetune
from logger import logger
from modalities import Pipeline, ProbeTask
from pretrain_config import PretrainConfig, ProbeConfig, load_pretrain_config, load_probe_config
from pretraining import pretrain_video


@dataclass
class ComparisonResult:
    seeds: tuple[int, ...]
    pretrained: list[float] = field(default_factory=list)
    scratch: list[float] = field(default_factory=list)
    without_contrastive: list[float] = field(default_factory=list)

    @property
    def gain(self) -> float:
        return float(np.mean(self.pretrained) - np.mean(self.scratch))


def pretraining_helps(run: PretrainConfig, probe: ProbeConfig, out_dir: str | Path, seeds=(0, 1, 2),
                      label_fraction: float = 0.1, ablate_contrastive: bool = True) -> ComparisonResult:
    """
    :param run: Video pretraining configuration.
    :param probe: Classification probe settings; seed and label fraction are replaced per arm.
    :param out_dir: Receives one directory per seed and arm.
    :param seeds: Seeds shared by pretraining and fine-tuning.
    :param label_fraction: Share of the training split that keeps its labels.
    :param ablate_contrastive: Also pretrain with gamma = 0.
    :return: The top-1 scores of every arm.
    """
    if run.pipeline is not Pipeline.VIDEO:
        raise ValidationException("The comparison pretrains on clips.")
    out_dir = Path(out_dir)
    result = ComparisonResult(seeds=tuple(seeds))
    for seed in seeds:
        seed_dir = out_dir / f"seed_{seed}"
        seeded = run.model_copy(update={"seed": seed})
        seeded_probe = probe.model_copy(update={"task": ProbeTask.CLASSIFICATION, "seed": seed,
                                                "label_fraction": label_fraction})

        pretrained = pretrain_video(seeded, seed_dir / "pretrain")
        result.pretrained.append(finetune(pretrained.checkpoint, seeded_probe,
                                          out_dir=seed_dir / "finetune_pretrained")[1].value)
        result.scratch.append(finetune(None, seeded_probe, model_config=seeded.model,
                                       out_dir=seed_dir / "finetune_scratch")[1].value)
        if ablate_contrastive:
            weights = seeded.loss_weights.model_copy(update={"gamma": 0.0})
            ablated = pretrain_video(seeded.model_copy(update={"loss_weights": weights}),
                                     seed_dir / "pretrain_without_contrastive")
            result.without_contrastive.append(finetune(ablated.checkpoint, seeded_probe,
                                                       out_dir=seed_dir / "finetune_without_contrastive")[1].value)

    output = f"Top-1 at {label_fraction:.0%} labels over seeds {list(seeds)}:"
    output += f"\n    {'pretrained':<24} {np.mean(result.pretrained):.2f}"
    output += f"\n    {'scratch':<24} {np.mean(result.scratch):.2f}"
    if result.without_contrastive:
        output += f"\n    {'without contrastive':<24} {np.mean(result.without_contrastive):.2f}"
    logger.info(output)
    return result


if __name__ == "__main__":
    pretraining_helps(load_pretrain_config(None, Pipeline.VIDEO), load_probe_config(None), "runs/pretraining_helps")
