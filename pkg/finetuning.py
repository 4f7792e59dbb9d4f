"""
Fine-tuning probes on top of a pretrained encoder. The decoder and the depth branch are discarded, the probe
consumes RGB only and trains with layer-wise learning-rate decay.
"""

import json
from collections import OrderedDict
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch.utils.data import Dataset, Subset

from checkpoints import check_compatible, load_checkpoint, load_tensors, read_model_config, save_checkpoint
from data_classes import MetricReport
from datagen.rgbd_dataset import build_dataset, collate_samples, make_loader, steps_per_epoch
from exceptions import ValidationException
from logger import logger
from metrics import ConfusionMatrix, delta1, depth_errors, miou, top1
from modalities import Pipeline, ProbeTask
from models.probe_model import ProbeModel, encoder_names_from_pretraining
from objectives import LossReport
from pretrain_config import ModelConfig, OptimizerConfig, ProbeConfig, config
from pretraining import MetricsLog, select_device, write_resolved_config
from schedules import build_schedule, layer_decay_param_groups
from seeding import seed_everything

TASK_METRIC = {
    ProbeTask.CLASSIFICATION: "top1",
    ProbeTask.SEGMENTATION: "miou",
    ProbeTask.DEPTH: "delta1",
}
PROBE_CHECKPOINT = "probe"


def probe_dataset_kind(task: ProbeTask, model_config: ModelConfig) -> Pipeline:
    """
    Motion-direction classification runs on clips, the dense tasks on single frames.
    """
    if task is ProbeTask.CLASSIFICATION and model_config.input.frames > 1:
        return Pipeline.VIDEO
    return Pipeline.IMAGE


def split_indices(num_samples: int, label_fraction: float, eval_fraction: float,
                  seed: int) -> tuple[list[int], list[int]]:
    """
    Splits a dataset into a labelled training subset and a held-out evaluation set. The evaluation set does
    not depend on label_fraction, so runs with different label budgets are scored on the same samples.

    :return: Training indices and evaluation indices.
    """
    if num_samples < 2:
        raise ValidationException(f"Fine-tuning needs at least two samples, got {num_samples}.")
    permutation = np.random.default_rng(seed).permutation(num_samples)
    n_eval = min(max(1, round(eval_fraction * num_samples)), num_samples - 1)
    pool = permutation[n_eval:]
    n_train = max(1, round(label_fraction * len(pool)))
    return pool[:n_train].tolist(), permutation[:n_eval].tolist()


def load_pretrained_encoder(probe: ProbeModel, checkpoint: str | Path) -> int:
    """
    Copies the RGB projection and encoder of a pretraining checkpoint into a probe.

    :return: The number of tensors copied.
    """
    mapped = OrderedDict()
    for name, tensor in load_tensors(checkpoint).items():
        target = encoder_names_from_pretraining(name)
        if target is not None:
            mapped[target] = tensor
    manifest = probe.parameter_manifest()
    expected = OrderedDict((name, manifest[name]) for name in probe.encoder_parameter_names())
    check_compatible(expected, [{"name": name, "shape": list(tensor.shape)} for name, tensor in mapped.items()])

    parameters = dict(probe.named_parameters())
    with torch.no_grad():
        for name, tensor in mapped.items():
            parameters[name].copy_(tensor.to(device=parameters[name].device, dtype=parameters[name].dtype))
    logger.info(f"Loaded {len(mapped)} encoder tensors from {checkpoint}.")
    return len(mapped)


@torch.no_grad()
def evaluate_probe(probe: ProbeModel, dataset: Dataset, indices: list[int], batch_size: int) -> dict[str, float]:
    """
    Scores a probe on the given samples.

    :return: The task metric under its TASK_METRIC name; the depth task adds the full error suite.
    """
    if not indices:
        raise ValidationException("Evaluation needs at least one sample.")
    was_training = probe.training
    probe.eval()
    device = next(probe.parameters()).device
    predictions, targets = [], []
    confusion = None
    for start in range(0, len(indices), batch_size):
        batch = collate_samples([dataset[i] for i in indices[start:start + batch_size]], probe.config.input)
        batch = batch.to(device)
        output = probe(batch.rgb)
        if probe.task is ProbeTask.CLASSIFICATION:
            if batch.labels is None:
                raise ValidationException("The classification probe needs labelled samples.")
            predictions.append(output.argmax(dim=-1).cpu())
            targets.append(batch.labels.cpu())
        elif probe.task is ProbeTask.SEGMENTATION:
            part = ConfusionMatrix.from_predictions(output.argmax(dim=1), batch.segmentation, probe.num_classes)
            confusion = part if confusion is None else confusion + part
        else:
            predictions.append(output.exp().cpu())
            targets.append(batch.depth_meters[:, 0].cpu())
    probe.train(was_training)

    if probe.task is ProbeTask.CLASSIFICATION:
        return {"top1": top1(torch.cat(predictions), torch.cat(targets))}
    if probe.task is ProbeTask.SEGMENTATION:
        return {"miou": miou(confusion)}
    pred, gt = torch.cat(predictions), torch.cat(targets)
    return {"delta1": delta1(pred, gt), **depth_errors(pred, gt)}


def save_probe(directory: str | Path, probe: ProbeModel, step: int) -> Path:
    return save_checkpoint(directory, probe, probe.config, step=step,
                           trainer_state={"task": probe.task.value, "num_classes": probe.num_classes})


def load_probe(directory: str | Path) -> tuple[ProbeModel, dict[str, Any]]:
    """
    Rebuilds a fine-tuned probe written by save_probe.
    """
    model_config = read_model_config(directory)
    with open(Path(directory) / "trainer_state.json", "r") as stream:
        state = json.load(stream)
    probe = ProbeModel(model_config, ProbeTask(state["task"]), state["num_classes"])
    return probe, load_checkpoint(directory, probe)


def format_report(results: dict[str, float]) -> str:
    output = "Evaluation:"
    for metric, value in results.items():
        output += f"\n    {metric:<12} {value:.4f}"
    return output


def finetune(checkpoint: str | Path | None, probe_config: ProbeConfig, dataset: Dataset | None = None,
             model_config: ModelConfig | None = None,
             out_dir: str | Path | None = None) -> tuple[ProbeModel, MetricReport]:
    """
    Attaches a probe head to the RGB encoder of a checkpoint and fine-tunes it on labelled samples.

    :param checkpoint: A pretraining checkpoint. None trains an identically configured probe from scratch.
    :param probe_config: Task, head and optimization settings.
    :param dataset: Labelled samples; synthetic samples of the task are generated if None.
    :param model_config: Encoder settings; defaults to the configuration stored with the checkpoint.
    :param out_dir: If given, receives config_resolved.json, metrics.csv, results.json and the probe.
    :return: The fine-tuned probe and its score on the held-out split.
    """
    if model_config is None:
        if checkpoint is None:
            raise ValidationException("Training from scratch needs a model configuration.")
        model_config = read_model_config(checkpoint)
    seed_everything(probe_config.seed)
    if dataset is None:
        dataset = build_dataset(probe_dataset_kind(probe_config.task, model_config), model_config.input,
                                probe_config.dataset, probe_config.synthetic_samples, probe_config.seed)
    train_indices, eval_indices = split_indices(len(dataset), probe_config.label_fraction,
                                                probe_config.eval_fraction, probe_config.seed)

    probe = ProbeModel(model_config, probe_config.task, probe_config.num_classes, probe_config.drop_path,
                       seed=probe_config.seed)
    if checkpoint is not None:
        load_pretrained_encoder(probe, checkpoint)
    if probe_config.freeze_encoder:
        probe.freeze_encoder()
    probe.to(select_device())
    device = next(probe.parameters()).device

    groups = layer_decay_param_groups(list(probe.named_parameters()), probe_config.lr, probe_config.weight_decay,
                                      probe_config.layer_decay, probe.num_layers, probe.layer_of)
    optimizer = torch.optim.AdamW(groups, lr=probe_config.lr, betas=probe_config.betas)
    train_set = Subset(dataset, train_indices)
    per_epoch = steps_per_epoch(len(train_set), probe_config.batch_size)
    total_steps = probe_config.max_steps or probe_config.epochs * per_epoch
    schedule = build_schedule(optimizer, OptimizerConfig(lr=probe_config.lr, betas=probe_config.betas,
                                                         weight_decay=probe_config.weight_decay,
                                                         warmup_epochs=probe_config.warmup_epochs),
                              per_epoch, total_steps)
    loader = make_loader(train_set, model_config.input, probe_config.batch_size, probe_config.seed, 0, total_steps)

    metrics = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_resolved_config(out_dir, {"probe": probe_config.model_dump(mode="json"),
                                        "model": model_config.model_dump(mode="json"),
                                        "checkpoint": str(checkpoint) if checkpoint is not None else None})
        metrics = MetricsLog(out_dir / "metrics.csv")

    logger.info(f"Fine-tuning a {probe_config.task.value} probe for {total_steps} steps on {len(train_indices)} "
                f"samples ({'pretrained' if checkpoint is not None else 'from scratch'}).")
    probe.train()
    try:
        for step, batch in enumerate(loader):
            batch = batch.to(device)
            loss = probe.loss(probe(batch.rgb), batch)
            report = LossReport(total=loss.detach())
            report.check_finite()
            optimizer.zero_grad()
            loss.backward()
            lr = optimizer.param_groups[-1]["lr"]
            optimizer.step()
            schedule.step()
            if metrics is not None:
                metrics.append(step, report, lr)
            if config["log_every"] and step % config["log_every"] == 0:
                logger.info(f"probe step {step}: loss={loss.item():.4f} lr={lr:.2e}")
    finally:
        if metrics is not None:
            metrics.close()

    results = evaluate_probe(probe, dataset, eval_indices, probe_config.batch_size)
    metric = TASK_METRIC[probe_config.task]
    report = MetricReport(task=probe_config.task.value, metric=metric, value=results[metric],
                          train_samples=len(train_indices), eval_samples=len(eval_indices))
    logger.info(format_report(results))
    if out_dir is not None:
        save_probe(out_dir / PROBE_CHECKPOINT, probe, total_steps)
        with open(out_dir / "results.json", "w") as stream:
            json.dump({"task": report.task, "metric": report.metric, "value": report.value,
                       "train_samples": report.train_samples, "eval_samples": report.eval_samples,
                       "results": results}, stream, indent=2)
    return probe, report
