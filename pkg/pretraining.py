"""
Pretraining loops: the single-stage video objective and the two-stage image schedule (contrastive stage 1
on full grids, masked reconstruction stage 2 starting from the stage-1 encoder).
"""

import csv
import json
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn.functional as F

from checkpoints import check_compatible, load_checkpoint, load_tensors, parameter_checksum, read_manifest, \
    save_checkpoint
from data_classes import PretrainResult, RgbDepthSample
from datagen.rgbd_dataset import build_dataset, collate_samples, make_loader, steps_per_epoch
from exceptions import NumericalException, ValidationException
from logger import logger
from modalities import Pipeline, TrainingObjective
from models.masking import make_plans
from models.rgbd_mae import ENCODER_PREFIXES, RgbdMaskedAutoencoder
from models.training_step import forward_backward
from objectives import LossReport, make_matching_batch
from pretrain_config import PretrainConfig, config
from schedules import build_schedule, param_groups_weight_decay
from seeding import derive_seed, seed_everything

# Keys that separate the random streams derived from (seed, step).
PLAN_STREAM = 1
MATCHING_STREAM = 2

FINAL_CHECKPOINT = "checkpoint"
STAGE1_CHECKSUM = "stage1_final_encoder_checksum"
STAGE2_CHECKSUM = "stage2_initial_encoder_checksum"


def select_device() -> torch.device:
    return torch.device("cuda" if config["use_cuda"] and torch.cuda.is_available() else "cpu")


def write_resolved_config(out_dir: Path, resolved: dict[str, Any]) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "config_resolved.json"
    with open(path, "w") as stream:
        json.dump(resolved, stream, indent=2)
    return path


class MetricsLog:
    """
    Appends one row per optimizer step to metrics.csv. Floats are written with repr so that reruns with the
    same seed produce identical files; terms outside the active objective stay empty.
    """
    COLUMNS = ("step", "total", "rgb", "depth", "contrastive", "matching", "lr")

    def __init__(self, path: Path, append: bool = False):
        self.path = path
        exists = path.exists() and append
        self._stream = open(path, "a" if exists else "w", newline="")
        self._writer = csv.writer(self._stream)
        if not exists:
            self._writer.writerow(self.COLUMNS)

    def append(self, step: int, report: LossReport, lr: float) -> dict[str, Any]:
        row = {"step": step, **report.as_row(), "lr": lr}
        self._writer.writerow([step] + ["" if row[column] is None else repr(float(row[column]))
                                        for column in self.COLUMNS[1:]])
        self._stream.flush()
        return row

    def close(self) -> None:
        self._stream.close()

    def __enter__(self) -> "MetricsLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def initialize_from(model: torch.nn.Module, checkpoint: str | Path) -> int:
    """
    Copies every checkpoint tensor whose name exists in the model; shapes of shared names must agree.

    :return: The number of tensors copied.
    """
    manifest = read_manifest(checkpoint)
    expected = model.parameter_manifest()
    shared = [entry for entry in manifest["parameters"] if entry["name"] in expected]
    check_compatible(type(expected)((entry["name"], expected[entry["name"]]) for entry in shared), shared)
    tensors = load_tensors(checkpoint)
    parameters = dict(model.named_parameters())
    with torch.no_grad():
        for entry in shared:
            target = parameters[entry["name"]]
            target.copy_(tensors[entry["name"]].to(device=target.device, dtype=target.dtype))
    logger.info(f"Initialized {len(shared)} of {len(expected)} parameters from {checkpoint}.")
    return len(shared)


class _StageRunner:
    """
    Runs the steps of one objective with its own AdamW optimizer and schedule.
    """

    def __init__(self, objective: TrainingObjective, model: RgbdMaskedAutoencoder, run: PretrainConfig, dataset,
                 metrics: MetricsLog, out_dir: Path, total_steps: int, step_offset: int = 0):
        self.objective = objective
        self.model = model
        self.run = run
        self.dataset = dataset
        self.metrics = metrics
        self.out_dir = out_dir
        self.total_steps = total_steps
        self.step_offset = step_offset
        self.device = next(model.parameters()).device
        self.last_checkpoint: Path | None = None
        self.trainer_state: dict[str, Any] = {"stage": objective.value}

        names = set(model.stage_parameter_names(objective))
        trainable = [(name, parameter) for name, parameter in model.named_parameters() if name in names]
        optimizer_cfg = run.optimizer
        self.optimizer = torch.optim.AdamW(param_groups_weight_decay(trainable, optimizer_cfg.weight_decay),
                                           lr=optimizer_cfg.lr, betas=optimizer_cfg.betas)
        self.per_epoch = steps_per_epoch(len(dataset), run.batch_size)

    def _save(self, step: int) -> Path:
        directory = self.out_dir / "checkpoints" / f"step_{step:06d}"
        self.last_checkpoint = save_checkpoint(directory, self.model, self.run.model, self.optimizer, step,
                                               self.trainer_state)
        return directory

    def run_steps(self, start: int = 0, history: list[dict] | None = None) -> list[dict]:
        """
        Runs stage-local steps [start, total_steps). Rows carry the global step (stage offset added).
        """
        history = history if history is not None else []
        schedule = build_schedule(self.optimizer, self.run.optimizer, self.per_epoch, self.total_steps, start)
        loader = make_loader(self.dataset, self.run.input, self.run.batch_size, self.run.seed, start,
                             self.total_steps)
        self.model.train()
        geometry = self.model.geometry
        for local_step, batch in enumerate(loader, start=start):
            step = self.step_offset + local_step
            batch = batch.to(self.device)
            plans = matching = None
            if self.objective is not TrainingObjective.STAGE1:
                plans = make_plans(geometry, self.run.masking, derive_seed(self.run.seed, step, PLAN_STREAM),
                                   batch.batch_size)
            if self.objective is TrainingObjective.VIDEO:
                matching = make_matching_batch(batch.batch_size, derive_seed(self.run.seed, step, MATCHING_STREAM))

            try:
                _, report, _ = forward_backward(self.model, batch, self.objective, self.run.loss_weights, plans,
                                                matching, self.run.depth_loss_mode)
            except NumericalException as e:
                reference = self.last_checkpoint or "none written yet"
                raise NumericalException(f"{e} at step {step}; last good checkpoint: {reference}") from e

            if self.run.optimizer.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_([p for group in self.optimizer.param_groups for p in group["params"]],
                                               self.run.optimizer.grad_clip)
            lr = self.optimizer.param_groups[0]["lr"]
            self.optimizer.step()
            schedule.step()

            row = self.metrics.append(step, report, lr)
            history.append(row)
            if config["log_every"] and step % config["log_every"] == 0:
                terms = " ".join(f"{name}={value.item():.4f}" for name, value in report.terms().items())
                logger.info(f"{self.objective.value} step {step}: total={report.total.item():.4f} {terms} "
                            f"lr={lr:.2e}")
            if self.run.checkpoint_every and (step + 1) % self.run.checkpoint_every == 0:
                self._save(step + 1)
        return history


def _prepare(run: PretrainConfig, out_dir: str | Path, pipeline: Pipeline, resume: str | Path | None):
    out_dir = Path(out_dir)
    write_resolved_config(out_dir, run.model_dump(mode="json"))
    seed_everything(run.seed)
    dataset = build_dataset(pipeline, run.input, run.dataset, run.synthetic_samples, run.seed)
    if len(dataset) < 1:
        raise ValidationException("Pretraining needs at least one sample.")
    model = RgbdMaskedAutoencoder(run.model, seed=run.seed).to(select_device())
    if run.init_checkpoint and resume is None:
        initialize_from(model, run.init_checkpoint)
    metrics = MetricsLog(out_dir / "metrics.csv", append=resume is not None)
    return out_dir, dataset, model, metrics


def pretrain_video(run: PretrainConfig, out_dir: str | Path, resume: str | Path | None = None) -> PretrainResult:
    """
    Optimizes alpha * L_rgb + beta * L_depth + gamma * L_contrastive + eta * L_matching.

    :param run: The resolved configuration of a video run.
    :param out_dir: Receives config_resolved.json, metrics.csv and the checkpoints.
    :param resume: Checkpoint to continue from; parameters, moments and step are restored.
    :return: The final checkpoint and the per-step history.
    """
    if run.pipeline is not Pipeline.VIDEO:
        raise ValidationException(f"pretrain_video got a {run.pipeline.value} configuration.")
    out_dir, dataset, model, metrics = _prepare(run, out_dir, Pipeline.VIDEO, resume)
    per_epoch = steps_per_epoch(len(dataset), run.batch_size)
    total_steps = run.max_steps or run.epochs * per_epoch

    with metrics:
        runner = _StageRunner(TrainingObjective.VIDEO, model, run, dataset, metrics, out_dir, total_steps)
        start = 0
        if resume is not None:
            start = load_checkpoint(resume, model, runner.optimizer)["step"]
            runner.last_checkpoint = Path(resume)
            logger.info(f"Resuming video pretraining from {resume} at step {start}.")
        logger.info(f"Video pretraining: {total_steps} steps on {len(dataset)} clips.")
        history = runner.run_steps(start)

    checkpoint = save_checkpoint(out_dir / FINAL_CHECKPOINT, model, run.model, runner.optimizer, total_steps,
                                 {"stage": TrainingObjective.VIDEO.value})
    return PretrainResult(checkpoint=checkpoint, final_step=total_steps, history=history)


def pretrain_image(run: PretrainConfig, out_dir: str | Path, resume: str | Path | None = None) -> PretrainResult:
    """
    Two-stage image pretraining. Stage 1 trains only the projections and encoder(s) with the contrastive loss
    on full token grids; stage 2 continues from the stage-1 encoder with a fresh optimizer on
    alpha * L_rgb + beta * L_depth under masking. The matching loss is never used.
    """
    if run.pipeline is not Pipeline.IMAGE:
        raise ValidationException(f"pretrain_image got a {run.pipeline.value} configuration.")
    out_dir, dataset, model, metrics = _prepare(run, out_dir, Pipeline.IMAGE, resume)
    per_epoch = steps_per_epoch(len(dataset), run.batch_size)
    stage1_steps = run.stage1_max_steps if run.stage1_max_steps is not None else run.stage1_epochs * per_epoch
    stage2_steps = run.stage2_max_steps or run.stage2_epochs * per_epoch

    result = PretrainResult(checkpoint=out_dir / FINAL_CHECKPOINT, final_step=stage1_steps + stage2_steps)
    with metrics:
        stage1 = _StageRunner(TrainingObjective.STAGE1, model, run, dataset, metrics, out_dir, stage1_steps)
        stage2 = _StageRunner(TrainingObjective.STAGE2, model, run, dataset, metrics, out_dir, stage2_steps,
                              step_offset=stage1_steps)
        start1, start2 = 0, 0
        if resume is not None:
            state = _read_trainer_state(resume)
            resumed = stage2 if state.get("stage") == TrainingObjective.STAGE2.value else stage1
            step = load_checkpoint(resume, model, resumed.optimizer)["step"]
            resumed.last_checkpoint = Path(resume)
            start1, start2 = (stage1_steps, step - stage1_steps) if resumed is stage2 else (step, 0)
            if resumed is stage2:
                result.stage1_final_encoder_checksum = state.get(STAGE1_CHECKSUM)
                result.stage2_initial_encoder_checksum = state.get(STAGE2_CHECKSUM)
            logger.info(f"Resuming image pretraining from {resume} at step {step}.")

        if start1 < stage1_steps:
            logger.info(f"Stage 1: {stage1_steps} contrastive steps on {len(dataset)} scenes.")
            stage1.run_steps(start1, result.history)
        elif stage1_steps == 0:
            logger.info("Stage 1 skipped (no stage-1 steps configured).")

        stage2.last_checkpoint = stage2.last_checkpoint or stage1.last_checkpoint
        if start2 == 0:
            result.stage1_final_encoder_checksum = parameter_checksum(model, ENCODER_PREFIXES)
            result.stage2_initial_encoder_checksum = parameter_checksum(model, ENCODER_PREFIXES)
        # Stage-2 checkpoints carry the handoff so a resumed run still reports it.
        stage2.trainer_state.update({STAGE1_CHECKSUM: result.stage1_final_encoder_checksum,
                                     STAGE2_CHECKSUM: result.stage2_initial_encoder_checksum})
        logger.info(f"Stage 2: {stage2_steps} reconstruction steps.")
        stage2.run_steps(start2, result.history)

    save_checkpoint(result.checkpoint, model, run.model, stage2.optimizer, result.final_step, stage2.trainer_state)
    return result


def _read_trainer_state(checkpoint: str | Path) -> dict[str, Any]:
    with open(Path(checkpoint) / "trainer_state.json", "r") as stream:
        return json.load(stream)


@torch.no_grad()
def retrieval_accuracy(model: RgbdMaskedAutoencoder, samples: list[RgbDepthSample], run: PretrainConfig) -> float:
    """
    Mean over scenes of the fraction of RGB patches whose most similar depth patch (cosine similarity of
    encoder features on full grids) is the patch at the same position. Chance is 1 / N.
    """
    if not samples:
        raise ValidationException("Retrieval needs at least one scene.")
    was_training = model.training
    model.eval()
    device = next(model.parameters()).device
    batch = collate_samples(samples, run.input).to(device)
    raw = model.tokenize(batch.rgb, batch.depth)
    latent_rgb, latent_depth = model.encode(*(model.embed(raw[modality], modality) for modality in raw))
    rgb = F.normalize(latent_rgb.tokens, dim=-1)
    depth = F.normalize(latent_depth.tokens, dim=-1)
    best = (rgb @ depth.transpose(1, 2)).argmax(dim=-1)
    target = torch.arange(best.shape[1], device=device)
    model.train(was_training)
    return float(np.mean([(row == target).float().mean().item() for row in best]))
