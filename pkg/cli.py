"""
Command-line entry point:

    python cli.py pretrain-video  --config run.yaml --out runs/video [--seed 1] [--init-checkpoint c] [--resume c]
    python cli.py pretrain-image  --config run.yaml --out runs/image
    python cli.py finetune        --config probe.yaml --checkpoint runs/video/checkpoint --out runs/probe
    python cli.py eval            --checkpoint runs/probe/probe --out runs/eval
    python cli.py synth-data      --out data/scenes --n 16 --kind image --seed 1
    python cli.py visualize-masks --config run.yaml --out runs/masks [--checkpoint c]

Exit codes: 0 on success, 2 on usage or configuration errors, 1 on any other failure.
"""

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import Any, Sequence

from pydantic import ValidationError

from checkpoints import load_model
from datagen.rgbd_dataset import build_dataset, collate_samples
from datagen.rgbd_dataset_DAO import RgbdDatasetDAO
from exceptions import ConfigurationException
from finetuning import evaluate_probe, finetune, format_report, load_probe, probe_dataset_kind, split_indices
from logger import logger
from modalities import Modality, Pipeline
from models.masking import make_plans
from pretrain_config import PretrainConfig, load_pretrain_config, load_probe_config, read_config_file
from pretraining import pretrain_image, pretrain_video, write_resolved_config
from seeding import seed_everything
from visualization import save_mask_overlays

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rgbd-mae", description="Multi-modal masked autoencoder pretraining "
                                                                  "for RGB-D images and clips.")
    commands = parser.add_subparsers(dest="command", required=True)

    for name in ("pretrain-video", "pretrain-image"):
        command = commands.add_parser(name, help=f"{name.split('-')[1]} pretraining")
        command.add_argument("--config", required=True, help="Run configuration (JSON or YAML).")
        command.add_argument("--out", required=True, help="Run directory.")
        command.add_argument("--seed", type=int)
        command.add_argument("--init-checkpoint", help="Initialize matching parameters from a checkpoint.")
        command.add_argument("--resume", help="Continue from a checkpoint of this run.")

    command = commands.add_parser("finetune", help="fine-tune a probe on the RGB encoder")
    command.add_argument("--config", required=True, help="Probe configuration (JSON or YAML).")
    command.add_argument("--out", required=True)
    command.add_argument("--seed", type=int)
    command.add_argument("--checkpoint", help="Pretraining checkpoint; omit to train from scratch.")
    command.add_argument("--model-config", help="Pretraining configuration providing the encoder when training "
                                                "from scratch.")

    command = commands.add_parser("eval", help="score a fine-tuned probe on its held-out split")
    command.add_argument("--checkpoint", required=True, help="Probe checkpoint written by finetune.")
    command.add_argument("--out", required=True)
    command.add_argument("--config", help="Probe configuration naming the dataset and split.")
    command.add_argument("--seed", type=int)

    command = commands.add_parser("synth-data", help="write a synthetic dataset with its manifest")
    command.add_argument("--out", required=True)
    command.add_argument("--n", type=int, required=True)
    command.add_argument("--kind", choices=[pipeline.value for pipeline in Pipeline], required=True)
    command.add_argument("--seed", type=int, default=0)
    command.add_argument("--config", help="Run configuration providing the input geometry.")

    command = commands.add_parser("visualize-masks", help="write mask overlays of a few samples")
    command.add_argument("--config", required=True, help="Run configuration (JSON or YAML).")
    command.add_argument("--out", required=True)
    command.add_argument("--n", type=int, default=4)
    command.add_argument("--seed", type=int)
    command.add_argument("--checkpoint", help="Add the reconstructions of this checkpoint.")
    return parser


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "init_checkpoint", None):
        overrides["init_checkpoint"] = args.init_checkpoint
    return overrides


def _load_run(path: str | None, default: Pipeline, overrides: dict[str, Any] | None = None) -> PretrainConfig:
    """
    Loads a pretraining configuration whose pipeline is named in the file, or `default` if it is not.
    """
    raw = read_config_file(path) if path else {}
    try:
        pipeline = Pipeline(raw.get("pipeline", default.value))
    except ValueError:
        raise ConfigurationException(f"Unknown pipeline {raw.get('pipeline')!r} in {path}.")
    return load_pretrain_config(path, pipeline, overrides)


def _write_metric_rows(out_dir: Path, rows: dict[str, float]) -> None:
    with open(out_dir / "metrics.csv", "w", newline="") as stream:
        writer = csv.writer(stream)
        writer.writerow(("metric", "value"))
        writer.writerows((name, repr(float(value))) for name, value in rows.items())


def _pretrain(args: argparse.Namespace, pipeline: Pipeline) -> None:
    run = load_pretrain_config(args.config, pipeline, _overrides(args))
    train = pretrain_video if pipeline is Pipeline.VIDEO else pretrain_image
    result = train(run, args.out, resume=args.resume)
    logger.info(f"Pretraining finished after {result.final_step} steps; checkpoint at {result.checkpoint}.")


def _finetune(args: argparse.Namespace) -> None:
    probe = load_probe_config(args.config, _overrides(args))
    model_config = None
    if args.checkpoint is None:
        if args.model_config is None:
            raise ConfigurationException("Training from scratch needs --model-config.")
        model_config = _load_run(args.model_config, Pipeline.VIDEO).model
    finetune(args.checkpoint, probe, model_config=model_config, out_dir=args.out)


def _evaluate(args: argparse.Namespace) -> None:
    out_dir = Path(args.out)
    probe, state = load_probe(args.checkpoint)
    settings = load_probe_config(args.config, {**_overrides(args), "task": state["task"],
                                               "num_classes": state["num_classes"]})
    write_resolved_config(out_dir, {"probe": settings.model_dump(mode="json"),
                                    "model": probe.config.model_dump(mode="json"), "checkpoint": args.checkpoint})
    seed_everything(settings.seed)
    dataset = build_dataset(probe_dataset_kind(settings.task, probe.config), probe.config.input, settings.dataset,
                            settings.synthetic_samples, settings.seed)
    _, eval_indices = split_indices(len(dataset), settings.label_fraction, settings.eval_fraction, settings.seed)
    results = evaluate_probe(probe, dataset, eval_indices, settings.batch_size)

    _write_metric_rows(out_dir, results)
    with open(out_dir / "results.json", "w") as stream:
        json.dump({"task": settings.task.value, "eval_samples": len(eval_indices), "results": results}, stream,
                  indent=2)
    logger.info(format_report(results))


def _synth_data(args: argparse.Namespace) -> None:
    if args.n < 1:
        raise ConfigurationException("--n must be at least 1.")
    kind = Pipeline(args.kind)
    run = load_pretrain_config(args.config, kind)
    dataset = build_dataset(kind, run.input, None, args.n, args.seed)
    out_dir = Path(args.out)
    write_resolved_config(out_dir, {"kind": kind.value, "n": args.n, "seed": args.seed,
                                    "input": run.input.model_dump(mode="json")})
    manifest = RgbdDatasetDAO.write_dataset(out_dir, [dataset[index] for index in range(len(dataset))],
                                            depth_clamp_max=run.input.depth_clamp_max)
    _write_metric_rows(out_dir, {"samples": len(manifest)})


def _visualize_masks(args: argparse.Namespace) -> None:
    run = _load_run(args.config, Pipeline.IMAGE, _overrides(args))
    out_dir = Path(args.out)
    write_resolved_config(out_dir, run.model_dump(mode="json"))
    seed_everything(run.seed)
    dataset = build_dataset(run.pipeline, run.input, run.dataset, run.synthetic_samples, run.seed)
    batch = collate_samples([dataset[index] for index in range(min(args.n, len(dataset)))], run.input)
    plans = make_plans(run.input.geometry(), run.masking, run.seed, batch.batch_size)

    model = None
    if args.checkpoint:
        model, _ = load_model(args.checkpoint)
    save_mask_overlays(batch, plans, out_dir, model)
    _write_metric_rows(out_dir, {
        "masked_fraction_rgb": sum(plan.masked(Modality.RGB).float().mean().item() for plan in plans) / len(plans),
        "masked_fraction_depth": sum(plan.masked(Modality.DEPTH).float().mean().item()
                                     for plan in plans) / len(plans),
    })


def cli(argv: Sequence[str] | None = None) -> int:
    """
    Runs one subcommand.

    :param argv: Arguments without the program name; sys.argv[1:] if None.
    :return: The exit code.
    """
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    try:
        if args.command == "pretrain-video":
            _pretrain(args, Pipeline.VIDEO)
        elif args.command == "pretrain-image":
            _pretrain(args, Pipeline.IMAGE)
        elif args.command == "finetune":
            _finetune(args)
        elif args.command == "eval":
            _evaluate(args)
        elif args.command == "synth-data":
            _synth_data(args)
        else:
            _visualize_masks(args)
    except (ValidationError, ConfigurationException) as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_USAGE
    except Exception as e:
        logger.exception(f"{args.command} failed: {e}")
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(cli())
