"""
Sweeps the (RGB, depth) masking ratios of image pretraining and scores every pretrained encoder with the
segmentation probe.
"""

import csv
from dataclasses import dataclass
from pathlib import Path

from datagen.synthetic_scenes import SEGMENTATION_CLASSES
from exceptions import ValidationException
from finetuning import finetune
from logger import logger
from modalities import Pipeline, ProbeTask
from pretrain_config import PretrainConfig, ProbeConfig, load_pretrain_config, load_probe_config
from pretraining import pretrain_image

DEFAULT_RATIO_PAIRS = (
    (0.2, 0.2), (0.2, 0.5), (0.2, 0.8),
    (0.5, 0.2), (0.5, 0.5),
    (0.8, 0.2), (0.8, 0.8),
)


@dataclass(frozen=True)
class SweepRow:
    rgb_ratio: float
    depth_ratio: float
    miou: float


def masking_ratio_sweep(run: PretrainConfig, probe: ProbeConfig, out_dir: str | Path,
                        ratio_pairs=DEFAULT_RATIO_PAIRS) -> list[SweepRow]:
    """
    :param run: Image pretraining configuration; its masking ratios are replaced per pair.
    :param probe: Probe settings; the task is forced to segmentation.
    :param out_dir: Receives one run directory per pair and sweep.csv.
    :param ratio_pairs: (rgb ratio, depth ratio) pairs.
    :return: One row per pair.
    """
    if run.pipeline is not Pipeline.IMAGE:
        raise ValidationException("The masking ratio sweep runs image pretraining.")
    out_dir = Path(out_dir)
    probe = probe.model_copy(update={"task": ProbeTask.SEGMENTATION, "num_classes": SEGMENTATION_CLASSES})
    rows = []
    for rgb_ratio, depth_ratio in ratio_pairs:
        masking = run.masking.model_copy(update={"rgb_ratio": rgb_ratio, "depth_ratio": depth_ratio})
        run_dir = out_dir / f"rgb{rgb_ratio:g}_depth{depth_ratio:g}"
        result = pretrain_image(run.model_copy(update={"masking": masking}), run_dir)
        _, report = finetune(result.checkpoint, probe, out_dir=run_dir / "segmentation")
        rows.append(SweepRow(rgb_ratio, depth_ratio, report.value))

    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "sweep.csv", "w", newline="") as stream:
        writer = csv.writer(stream)
        writer.writerow(("rgb_ratio", "depth_ratio", "miou"))
        writer.writerows((row.rgb_ratio, row.depth_ratio, repr(row.miou)) for row in rows)

    output = "Masking ratio sweep:"
    for row in rows:
        output += f"\n    RGB {row.rgb_ratio:<6} depth {row.depth_ratio:<6} mIoU {row.miou:.4f}"
    logger.info(output)
    return rows


if __name__ == "__main__":
    masking_ratio_sweep(load_pretrain_config(None, Pipeline.IMAGE), load_probe_config(None), "runs/masking_sweep")
