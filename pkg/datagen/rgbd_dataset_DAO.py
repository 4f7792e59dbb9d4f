import json
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, ValidationError

from data_classes import RgbDepthSample, VideoSample
from exceptions import DatasetIOException, DatasetValidationException
from logger import logger
from modalities import Pipeline

SIXTEEN_BIT_MODES = ("I;16", "I;16B", "I;16L", "I")


def _handle_io_exception(exception: Exception, path: Path):
    """
    Translates low-level file errors into a DatasetIOException that names the offending file.

    :param exception: The exception to be handled.
    :param path: The file that was being accessed.
    """
    if isinstance(exception, FileNotFoundError):
        message = "Missing dataset file"
    elif isinstance(exception, UnidentifiedImageError):
        message = "Not a readable image"
    else:
        message = f"Could not access dataset file ({exception})"
    logger.warning(f"{message}: {path}")
    raise DatasetIOException(message, path) from exception


class SampleRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: str
    rgb: str
    depth: str
    label: int | None = None
    segmentation: str | None = None
    frames: int | None = Field(None, ge=2)    # set for clips; rgb and depth then name frame directories


class DatasetManifest(BaseModel):
    """
    The content of manifest.json. Paths of the records are relative to root.
    """
    model_config = ConfigDict(extra="forbid")

    root: Path
    kind: Pipeline
    depth_scale: PositiveFloat = 1000.0
    depth_clamp_max: PositiveFloat = 8.0
    records: list[SampleRecord] = []

    def __len__(self) -> int:
        return len(self.records)


class RgbdDatasetDAO:
    """
    Reads and writes RGB-D datasets in the on-disk layout

        root/manifest.json
        root/rgb/<id>.png, root/depth/<id>.png (16 bit, millimeters), root/segmentation/<id>.png
        root/rgb/<id>/<frame:05d>.png, root/depth/<id>/<frame:05d>.png for clips
    """

    MANIFEST_NAME = "manifest.json"

    @staticmethod
    def write_dataset(root: str | Path, samples: Sequence[RgbDepthSample | VideoSample],
                      depth_scale: float = 1000.0, depth_clamp_max: float = 8.0) -> DatasetManifest:
        """
        Writes samples and their manifest below root.

        :param root: Dataset directory, created if missing.
        :param samples: Either only images or only clips.
        :param depth_scale: Stored depth units per meter.
        :param depth_clamp_max: Maximal depth in meters applied when reading.
        :return: The written manifest.
        """
        root = Path(root)
        kind = Pipeline.VIDEO if samples and isinstance(samples[0], VideoSample) else Pipeline.IMAGE
        for folder in ("rgb", "depth", "segmentation"):
            (root / folder).mkdir(parents=True, exist_ok=True)

        records = []
        for index, sample in enumerate(samples):
            sample_id = f"{index:06d}"
            if kind is Pipeline.VIDEO:
                rgb_path, depth_path = f"rgb/{sample_id}", f"depth/{sample_id}"
                (root / rgb_path).mkdir(exist_ok=True)
                (root / depth_path).mkdir(exist_ok=True)
                for frame in range(sample.frames):
                    RgbdDatasetDAO._write_rgb(root / rgb_path / f"{frame:05d}.png", sample.rgb[frame])
                    RgbdDatasetDAO._write_depth(root / depth_path / f"{frame:05d}.png", sample.depth[frame],
                                                depth_scale)
                records.append(SampleRecord(id=sample_id, rgb=rgb_path, depth=depth_path, label=sample.label,
                                            frames=sample.frames))
                continue

            rgb_path, depth_path = f"rgb/{sample_id}.png", f"depth/{sample_id}.png"
            RgbdDatasetDAO._write_rgb(root / rgb_path, sample.rgb)
            RgbdDatasetDAO._write_depth(root / depth_path, sample.depth, depth_scale)
            segmentation_path = None
            if sample.segmentation is not None:
                segmentation_path = f"segmentation/{sample_id}.png"
                Image.fromarray(sample.segmentation.numpy().astype(np.uint8)).save(root / segmentation_path)
            records.append(SampleRecord(id=sample_id, rgb=rgb_path, depth=depth_path, label=sample.label,
                                        segmentation=segmentation_path))

        manifest = DatasetManifest(root=root, kind=kind, depth_scale=depth_scale, depth_clamp_max=depth_clamp_max,
                                   records=records)
        content = manifest.model_dump(mode="json", exclude={"root"})
        with open(root / RgbdDatasetDAO.MANIFEST_NAME, "w") as stream:
            json.dump(content, stream, indent=2)
        logger.info(f"Wrote {len(records)} {kind.value} samples to {root}.")
        return manifest

    @staticmethod
    def _write_rgb(path: Path, rgb: torch.Tensor) -> None:
        pixels = np.round(rgb.permute(1, 2, 0).numpy() * 255.0).astype(np.uint8)
        Image.fromarray(pixels, mode="RGB").save(path)

    @staticmethod
    def _write_depth(path: Path, depth: torch.Tensor, depth_scale: float) -> None:
        units = np.clip(np.round(depth[0].double().numpy() * depth_scale), 0, 65535).astype(np.uint16)
        Image.fromarray(units).save(path)

    @staticmethod
    def load_dataset(manifest_path: str | Path) -> DatasetManifest:
        """
        Parses a manifest and checks that every record's files exist and share one resolution.

        :param manifest_path: manifest.json or the directory containing it.
        :return: The manifest, root set to the manifest's directory.
        """
        manifest_path = Path(manifest_path)
        if manifest_path.is_dir():
            manifest_path = manifest_path / RgbdDatasetDAO.MANIFEST_NAME
        try:
            with open(manifest_path, "r") as stream:
                content = json.load(stream)
        except (OSError, json.JSONDecodeError) as e:
            _handle_io_exception(e, manifest_path)
        if not isinstance(content, dict):
            raise DatasetValidationException(f"Manifest {manifest_path} must contain a JSON object.")
        try:
            manifest = DatasetManifest.model_validate({**content, "root": manifest_path.parent})
        except ValidationError as e:
            raise DatasetValidationException(f"Invalid manifest {manifest_path}: {e}")

        for record in manifest.records:
            RgbdDatasetDAO._check_record(manifest, record)
        logger.info(f"Loaded manifest {manifest_path} with {len(manifest)} {manifest.kind.value} samples.")
        return manifest

    @staticmethod
    def _record_files(manifest: DatasetManifest, record: SampleRecord) -> list[tuple[Path, Path]]:
        if record.frames is None:
            return [(manifest.root / record.rgb, manifest.root / record.depth)]
        return [(manifest.root / record.rgb / f"{frame:05d}.png", manifest.root / record.depth / f"{frame:05d}.png")
                for frame in range(record.frames)]

    @staticmethod
    def _image_size(path: Path) -> tuple[int, int]:
        try:
            with Image.open(path) as image:
                return image.size
        except (OSError, UnidentifiedImageError) as e:
            _handle_io_exception(e, path)

    @staticmethod
    def _check_record(manifest: DatasetManifest, record: SampleRecord) -> None:
        if (record.frames is not None) != (manifest.kind is Pipeline.VIDEO):
            raise DatasetValidationException(f"Record {record.id} ({manifest.root / record.rgb}) does not match "
                                             f"the {manifest.kind.value} dataset kind.")
        sizes = set()
        for rgb_path, depth_path in RgbdDatasetDAO._record_files(manifest, record):
            sizes.add(RgbdDatasetDAO._image_size(rgb_path))
            sizes.add(RgbdDatasetDAO._image_size(depth_path))
        if record.segmentation is not None:
            sizes.add(RgbdDatasetDAO._image_size(manifest.root / record.segmentation))
        if len(sizes) > 1:
            raise DatasetValidationException(f"Record {record.id} ({manifest.root / record.rgb}) mixes "
                                             f"resolutions {sorted(sizes)}.")

    @staticmethod
    def _read_rgb(path: Path) -> np.ndarray:
        try:
            with Image.open(path) as image:
                pixels = np.asarray(image.convert("RGB"), dtype=np.float64)
        except (OSError, UnidentifiedImageError) as e:
            _handle_io_exception(e, path)
        return pixels.transpose(2, 0, 1) / 255.0

    @staticmethod
    def _read_depth(path: Path, manifest: DatasetManifest) -> np.ndarray:
        try:
            with Image.open(path) as image:
                if image.mode not in SIXTEEN_BIT_MODES:
                    raise DatasetValidationException(f"Depth raster {path} is {image.mode}, expected 16 bit.")
                units = np.asarray(image, dtype=np.float64)
        except (OSError, UnidentifiedImageError) as e:
            _handle_io_exception(e, path)
        return np.minimum(units / manifest.depth_scale, manifest.depth_clamp_max)[None]

    @staticmethod
    def load_sample(manifest: DatasetManifest, index: int) -> RgbDepthSample | VideoSample:
        """
        Decodes one record: RGB to [0, 1], depth from millimeters to meters clamped to the manifest's max.
        """
        record = manifest.records[index]
        frames = RgbdDatasetDAO._record_files(manifest, record)
        rgb = np.stack([RgbdDatasetDAO._read_rgb(rgb_path) for rgb_path, _ in frames])
        depth = np.stack([RgbdDatasetDAO._read_depth(depth_path, manifest) for _, depth_path in frames])
        if rgb.shape[-2:] != depth.shape[-2:]:
            raise DatasetValidationException(f"Record {record.id} ({manifest.root / record.rgb}) has RGB "
                                             f"{rgb.shape[-2:]} but depth {depth.shape[-2:]}.")

        rgb, depth = torch.from_numpy(rgb).float(), torch.from_numpy(depth).float()
        if record.frames is not None:
            return VideoSample(rgb=rgb, depth=depth, label=record.label)

        segmentation = None
        if record.segmentation is not None:
            path = manifest.root / record.segmentation
            try:
                with Image.open(path) as image:
                    segmentation = torch.from_numpy(np.asarray(image, dtype=np.int64))
            except (OSError, UnidentifiedImageError) as e:
                _handle_io_exception(e, path)
        return RgbDepthSample(rgb=rgb[0], depth=depth[0], label=record.label, segmentation=segmentation)
