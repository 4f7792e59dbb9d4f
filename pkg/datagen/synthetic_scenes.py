"""
Synthetic RGB-D scenes and clips. A scene is a background plane with 2 to 6 flat coloured rectangles and
ellipses at distinct depths; RGB brightness falls off with depth, so colour edges and depth edges coincide.
A clip translates every object of a scene with a constant velocity, the clip label is the dominant motion
direction.
"""

from dataclasses import dataclass

import numpy as np
import torch

from data_classes import RgbDepthSample, VideoSample
from exceptions import DimensionException
from modalities import MotionDirection

MIN_DEPTH = 0.5
MAX_DEPTH = 8.0
MIN_SIDE = 32

# Object colours; the index + 1 is the segmentation class, 0 is the background.
PALETTE = np.array([
    [0.90, 0.20, 0.15],
    [0.15, 0.75, 0.25],
    [0.20, 0.35, 0.90],
    [0.95, 0.85, 0.15],
])
SEGMENTATION_CLASSES = len(PALETTE) + 1

DIRECTION_JITTER = np.pi / 12


@dataclass(frozen=True)
class SceneObject:
    shape: str
    center: np.ndarray        # (row, col) in pixels
    half_size: np.ndarray     # (row, col) in pixels
    color_class: int
    depth: float
    slope: np.ndarray         # depth change in meters per pixel along (row, col)


@dataclass(frozen=True)
class SceneLayout:
    background_color: np.ndarray
    background_far: float
    background_tilt: float
    objects: list[SceneObject]


def _check_resolution(h: int, w: int, patch_size: int) -> None:
    if h < MIN_SIDE or w < MIN_SIDE:
        raise DimensionException(f"Synthetic scenes need at least {MIN_SIDE}x{MIN_SIDE} pixels, got {h}x{w}.")
    if h % patch_size or w % patch_size:
        raise DimensionException(f"Resolution {h}x{w} is not divisible by patch size {patch_size}.")


def _sample_layout(rng: np.random.Generator, h: int, w: int) -> SceneLayout:
    n_objects = int(rng.integers(2, 7))
    # One depth bin per object keeps the depths distinct.
    bins = rng.permutation(n_objects)
    depths = MIN_DEPTH + 5.0 * (bins + rng.uniform(0.15, 0.85, n_objects)) / n_objects

    objects = []
    for depth in depths:
        objects.append(SceneObject(
            shape=str(rng.choice(["rectangle", "ellipse"])),
            center=rng.uniform(0.15, 0.85, 2) * (h, w),
            half_size=rng.uniform(0.1, 0.25, 2) * (h, w),
            color_class=int(rng.integers(len(PALETTE))),
            depth=float(depth),
            slope=rng.uniform(-0.01, 0.01, 2),
        ))
    return SceneLayout(
        background_color=rng.uniform(0.25, 0.45, 3),
        background_far=float(rng.uniform(6.5, MAX_DEPTH)),
        background_tilt=float(rng.uniform(0.0, 1.0)),
        objects=objects,
    )


def _shade(depth: np.ndarray) -> np.ndarray:
    return 1.0 - 0.35 * (depth - MIN_DEPTH) / (MAX_DEPTH - MIN_DEPTH)


def _render(layout: SceneLayout, h: int, w: int,
            offsets: list[np.ndarray] | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Paints the layout far to near.

    :param offsets: Optional (row, col) displacement of every object.
    :return: rgb (3, H, W), depth (1, H, W) and segmentation (H, W).
    """
    rows, cols = np.mgrid[0:h, 0:w] + 0.5
    depth = layout.background_far - layout.background_tilt * rows / h
    rgb = layout.background_color[:, None, None] * _shade(depth)[None]
    segmentation = np.zeros((h, w), dtype=np.int64)

    order = sorted(range(len(layout.objects)), key=lambda i: -layout.objects[i].depth)
    for i in order:
        obj = layout.objects[i]
        center = obj.center + (offsets[i] if offsets is not None else 0.0)
        d_row = (rows - center[0]) / obj.half_size[0]
        d_col = (cols - center[1]) / obj.half_size[1]
        if obj.shape == "rectangle":
            inside = (np.abs(d_row) <= 1.0) & (np.abs(d_col) <= 1.0)
        else:
            inside = d_row ** 2 + d_col ** 2 <= 1.0

        surface = obj.depth + obj.slope[0] * (rows - center[0]) + obj.slope[1] * (cols - center[1])
        surface = np.clip(surface, MIN_DEPTH, MAX_DEPTH)
        depth = np.where(inside, surface, depth)
        rgb = np.where(inside[None], PALETTE[obj.color_class][:, None, None] * _shade(surface)[None], rgb)
        segmentation[inside] = obj.color_class + 1

    depth = np.clip(depth, MIN_DEPTH, MAX_DEPTH)
    return np.clip(rgb, 0.0, 1.0), depth[None], segmentation


def synth_scene(seed: int, h: int, w: int, patch_size: int = 16) -> RgbDepthSample:
    """
    Generates one RGB-D scene. The result is a deterministic function of the seed.

    :param seed: Seed of the scene.
    :param h: Height in pixels, at least 32 and divisible by the patch size.
    :param w: Width in pixels, at least 32 and divisible by the patch size.
    :param patch_size: Patch size the scene will be tokenized with.
    :return: The sample, with the palette class map as segmentation.
    """
    _check_resolution(h, w, patch_size)
    layout = _sample_layout(np.random.default_rng(seed), h, w)
    rgb, depth, segmentation = _render(layout, h, w)
    return RgbDepthSample(rgb=torch.from_numpy(rgb).float(), depth=torch.from_numpy(depth).float(),
                          segmentation=torch.from_numpy(segmentation))


def dominant_direction(velocities: np.ndarray) -> MotionDirection:
    """
    Quantizes the mean of (row, col) velocities to one of eight directions. Rows grow downwards, so a
    negative row velocity points north. A zero mean maps to east.
    """
    mean = np.asarray(velocities, dtype=np.float64).reshape(-1, 2).mean(axis=0)
    angle = np.arctan2(-mean[0], mean[1])
    return MotionDirection(int(np.round(angle / (np.pi / 4))) % 8)


def synth_clip(seed: int, t: int, h: int, w: int, patch_size: int = 16,
               direction: MotionDirection | None = None, speed_scale: float = 1.0) -> VideoSample:
    """
    Generates a clip of t frames. Frame 0 is synth_scene(seed); every object then moves with a constant
    velocity whose heading lies within 15 degrees of a dominant direction.

    :param seed: Seed of the clip.
    :param t: Number of frames, even.
    :param h: Frame height.
    :param w: Frame width.
    :param patch_size: Patch size the clip will be tokenized with.
    :param direction: Forces the dominant direction; drawn from the seed otherwise.
    :param speed_scale: Multiplies every velocity; 0 yields a static clip.
    :return: The clip labelled with the quantized mean motion direction.
    """
    if t < 2 or t % 2:
        raise DimensionException(f"Clip length must be even and positive, got {t}.")
    _check_resolution(h, w, patch_size)

    rng = np.random.default_rng(seed)
    layout = _sample_layout(rng, h, w)
    drawn = MotionDirection(int(rng.integers(8)))
    heading = (direction if direction is not None else drawn) * np.pi / 4

    n_objects = len(layout.objects)
    angles = heading + rng.uniform(-DIRECTION_JITTER, DIRECTION_JITTER, n_objects)
    speeds = rng.uniform(0.02, 0.05, n_objects) * min(h, w) * speed_scale
    velocities = np.stack([-np.sin(angles) * speeds, np.cos(angles) * speeds], axis=1)

    frames = [_render(layout, h, w, offsets=list(frame * velocities)) for frame in range(t)]
    rgb = np.stack([frame[0] for frame in frames])
    depth = np.stack([frame[1] for frame in frames])
    return VideoSample(rgb=torch.from_numpy(rgb).float(), depth=torch.from_numpy(depth).float(),
                       label=int(dominant_direction(velocities)))
