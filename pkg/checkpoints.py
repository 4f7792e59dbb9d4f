"""
Checkpoint directories:

    manifest.json        ordered entries {name, shape, dtype, file} of every parameter and optimizer moment
    params/<name>.bin    one flat little-endian float32 blob per parameter
    optimizer/<name>.<slot>.bin
    trainer_state.json   step and run bookkeeping
    model_config.json    the ModelConfig needed to rebuild the model

Loading validates every entry against the model's parameter manifest.
"""

import hashlib
import json
from collections import OrderedDict
from pathlib import Path
from typing import Any, Iterable

import numpy as np
import torch

from exceptions import IncompatibleCheckpointException
from logger import logger
from models.rgbd_mae import RgbdMaskedAutoencoder
from pretrain_config import ModelConfig

FORMAT_VERSION = 1
BLOB_DTYPE = np.dtype("<f4")
MANIFEST_NAME = "manifest.json"
TRAINER_STATE_NAME = "trainer_state.json"
MODEL_CONFIG_NAME = "model_config.json"
OPTIMIZER_SLOTS = ("exp_avg", "exp_avg_sq", "step")


def _blob(tensor: torch.Tensor) -> bytes:
    return tensor.detach().cpu().to(torch.float32).numpy().astype(BLOB_DTYPE).tobytes()


def _write_json(path: Path, content: Any) -> None:
    with open(path, "w") as stream:
        json.dump(content, stream, indent=2)


def _read_json(path: Path) -> Any:
    try:
        with open(path, "r") as stream:
            return json.load(stream)
    except (OSError, json.JSONDecodeError) as e:
        raise IncompatibleCheckpointException(f"Could not read {path}: {e}")


def save_checkpoint(directory: str | Path, model: torch.nn.Module, model_config: ModelConfig,
                    optimizer: torch.optim.Optimizer | None = None, step: int = 0,
                    trainer_state: dict[str, Any] | None = None) -> Path:
    """
    Writes parameters, AdamW moments and bookkeeping of a model.

    :param directory: Target directory, created if missing.
    :param model: Any module; entries follow its named_parameters order.
    :param model_config: Stored so that the checkpoint can be rebuilt without the run config.
    :param optimizer: If given, its per-parameter state is stored as well.
    :param step: Number of optimizer steps taken.
    :param trainer_state: Additional JSON-serializable bookkeeping.
    :return: The checkpoint directory.
    """
    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    entries = []
    names = {}
    for name, parameter in model.named_parameters():
        file = f"params/{name}.bin"
        (directory / file).write_bytes(_blob(parameter))
        entries.append({"name": name, "shape": list(parameter.shape), "dtype": "float32", "file": file})
        names[parameter] = name

    optimizer_entries = []
    if optimizer is not None:
        (directory / "optimizer").mkdir(exist_ok=True)
        for parameter, state in optimizer.state.items():
            if parameter not in names:
                continue
            for slot in OPTIMIZER_SLOTS:
                if slot not in state:
                    continue
                value = torch.as_tensor(state[slot])
                file = f"optimizer/{names[parameter]}.{slot}.bin"
                (directory / file).write_bytes(_blob(value))
                optimizer_entries.append({"name": names[parameter], "slot": slot, "shape": list(value.shape),
                                          "dtype": "float32", "file": file})

    _write_json(directory / MANIFEST_NAME, {"format": FORMAT_VERSION, "parameters": entries,
                                            "optimizer": optimizer_entries})
    _write_json(directory / TRAINER_STATE_NAME, {"step": step, **(trainer_state or {})})
    _write_json(directory / MODEL_CONFIG_NAME, model_config.model_dump(mode="json"))
    logger.info(f"Checkpoint at step {step} written to {directory}.")
    return directory


def _read_blob(directory: Path, entry: dict) -> torch.Tensor:
    path = directory / entry["file"]
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise IncompatibleCheckpointException(f"Missing blob of {entry['name']}: {path} ({e})")
    shape = tuple(entry["shape"])
    if len(raw) != int(np.prod(shape, dtype=np.int64)) * BLOB_DTYPE.itemsize:
        raise IncompatibleCheckpointException(f"Blob {path} of {entry['name']} does not hold shape {shape}.")
    return torch.from_numpy(np.frombuffer(raw, dtype=BLOB_DTYPE).copy().reshape(shape))


def read_manifest(directory: str | Path) -> dict:
    manifest = _read_json(Path(directory) / MANIFEST_NAME)
    if manifest.get("format") != FORMAT_VERSION:
        raise IncompatibleCheckpointException(f"Unsupported checkpoint format {manifest.get('format')} in "
                                              f"{directory}.")
    return manifest


def load_tensors(directory: str | Path) -> OrderedDict[str, torch.Tensor]:
    """
    All parameter tensors of a checkpoint in manifest order, independent of any model.
    """
    directory = Path(directory)
    manifest = read_manifest(directory)
    return OrderedDict((entry["name"], _read_blob(directory, entry)) for entry in manifest["parameters"])


def check_compatible(expected: OrderedDict[str, tuple[int, ...]], entries: Iterable[dict]) -> None:
    """
    Raises on the first difference between a model's parameter manifest and checkpoint entries.
    """
    stored = OrderedDict((entry["name"], tuple(entry["shape"])) for entry in entries)
    for name, shape in expected.items():
        if name not in stored:
            raise IncompatibleCheckpointException(f"Checkpoint has no entry for parameter {name}.")
        if stored[name] != shape:
            raise IncompatibleCheckpointException(f"Parameter {name} has shape {stored[name]} in the checkpoint, "
                                                  f"the model expects {shape}.")
    for name in stored:
        if name not in expected:
            raise IncompatibleCheckpointException(f"Checkpoint entry {name} has no counterpart in the model.")


def load_checkpoint(directory: str | Path, model: RgbdMaskedAutoencoder,
                    optimizer: torch.optim.Optimizer | None = None) -> dict[str, Any]:
    """
    Copies a checkpoint into a model (and optionally an optimizer) after validating every shape.

    :return: The trainer state of the checkpoint.
    """
    directory = Path(directory)
    manifest = read_manifest(directory)
    check_compatible(model.parameter_manifest(), manifest["parameters"])

    parameters = dict(model.named_parameters())
    with torch.no_grad():
        for entry in manifest["parameters"]:
            target = parameters[entry["name"]]
            target.copy_(_read_blob(directory, entry).to(device=target.device, dtype=target.dtype))

    if optimizer is not None:
        for entry in manifest["optimizer"]:
            parameter = parameters.get(entry["name"])
            if parameter is None:
                raise IncompatibleCheckpointException(f"Optimizer state for unknown parameter {entry['name']}.")
            value = _read_blob(directory, entry)
            if entry["slot"] != "step":
                value = value.to(device=parameter.device, dtype=parameter.dtype)
            optimizer.state[parameter][entry["slot"]] = value
    return _read_json(directory / TRAINER_STATE_NAME)


def read_model_config(directory: str | Path) -> ModelConfig:
    return ModelConfig.model_validate(_read_json(Path(directory) / MODEL_CONFIG_NAME))


def load_model(directory: str | Path) -> tuple[RgbdMaskedAutoencoder, dict[str, Any]]:
    """
    Rebuilds the model stored in a checkpoint.
    """
    model = RgbdMaskedAutoencoder(read_model_config(directory))
    return model, load_checkpoint(directory, model)


def parameter_checksum(model: torch.nn.Module, prefixes: tuple[str, ...] | None = None) -> str:
    """
    SHA-256 over the names and float32 bytes of all parameters, or of those starting with one of prefixes.
    """
    digest = hashlib.sha256()
    for name, parameter in model.named_parameters():
        if prefixes is not None and not name.startswith(prefixes):
            continue
        digest.update(name.encode())
        digest.update(_blob(parameter))
    return digest.hexdigest()
