"""
Per-modality masking. A strategy turns (geometry, ratio, rng) into a boolean visibility vector over the
token grid with an exact number of masked tokens; built in are random, tube and frame masking.
"""

import math
from typing import Callable, Sequence

import numpy as np
import torch

from data_classes import GridGeometry, MaskPlan, TokenBatch
from exceptions import ConfigurationException, DimensionException, MaskingStrategyException, ValidationException
from modalities import MaskingStrategy, MaskPairing, Modality
from pretrain_config import MaskConfig
from seeding import derive_seed

MaskSampler = Callable[[GridGeometry, float, np.random.Generator], np.ndarray]


def masked_count(ratio: float, n: int) -> int:
    """
    round(ratio * n) with halves rounded up.
    """
    return math.floor(ratio * n + 0.5)


def _visible_except(n: int, masked: np.ndarray) -> np.ndarray:
    visible = np.ones(n, dtype=bool)
    visible[masked] = False
    return visible


def _random_mask(geometry: GridGeometry, ratio: float, rng: np.random.Generator) -> np.ndarray:
    n = geometry.num_tokens
    return _visible_except(n, rng.choice(n, masked_count(ratio, n), replace=False))


def _tube_mask(geometry: GridGeometry, ratio: float, rng: np.random.Generator) -> np.ndarray:
    cells = geometry.spatial_cells
    spatial = _visible_except(cells, rng.choice(cells, masked_count(ratio, cells), replace=False))
    return np.tile(spatial, geometry.n_t)


def _frame_mask(geometry: GridGeometry, ratio: float, rng: np.random.Generator) -> np.ndarray:
    slices = _visible_except(geometry.n_t, rng.choice(geometry.n_t, masked_count(ratio, geometry.n_t),
                                                      replace=False))
    return np.repeat(slices, geometry.spatial_cells)


_STRATEGIES: dict[str, MaskSampler] = {
    MaskingStrategy.RANDOM.value: _random_mask,
    MaskingStrategy.TUBE.value: _tube_mask,
    MaskingStrategy.FRAME.value: _frame_mask,
}
_TEMPORAL = {MaskingStrategy.TUBE.value, MaskingStrategy.FRAME.value}


def register_masking_strategy(name: str, sampler: MaskSampler) -> None:
    """
    Makes a custom strategy available under `name` in masking configs. The sampler must return a boolean
    visibility vector of length geometry.num_tokens; built-in strategies cannot be replaced.
    """
    if name in {strategy.value for strategy in MaskingStrategy}:
        raise ConfigurationException(f"'{name}' is a built-in masking strategy.")
    _STRATEGIES[name] = sampler


def sample_mask(geometry: GridGeometry, strategy: MaskingStrategy | str, ratio: float, seed: int) -> torch.Tensor:
    """
    Draws a visibility vector.

    :param geometry: The token grid.
    :param strategy: random, tube, frame or a registered name.
    :param ratio: Fraction of masked tokens in [0, 1]; tube masks round(ratio * S) cells in every slice and
        frame masks round(ratio * n_t) whole slices.
    :param seed: Seed of the draw.
    :return: Boolean (N,) tensor, True where the token stays visible.
    """
    if not (np.isfinite(ratio) and 0.0 <= ratio <= 1.0):
        raise ValidationException(f"Masking ratio must lie in [0, 1], got {ratio}.")
    name = strategy.value if isinstance(strategy, MaskingStrategy) else strategy
    if name not in _STRATEGIES:
        raise MaskingStrategyException(f"Unknown masking strategy '{name}'.")
    if name in _TEMPORAL and geometry.n_t == 1:
        raise MaskingStrategyException(f"{name} masking needs more than one temporal slice.")

    visible = np.asarray(_STRATEGIES[name](geometry, ratio, np.random.default_rng(seed)))
    if visible.shape != (geometry.num_tokens,) or visible.dtype != bool:
        raise MaskingStrategyException(f"Strategy '{name}' returned {visible.dtype} of shape {visible.shape}.")
    return torch.from_numpy(visible)


def make_plan(geometry: GridGeometry, cfg: MaskConfig, seed: int) -> MaskPlan:
    """
    Samples the RGB and depth masks of one sample. With independent pairing both modalities use their own
    seed derived from the plan seed; shared pairing reuses the RGB mask for depth.
    """
    visible_rgb = sample_mask(geometry, cfg.rgb_strategy, cfg.rgb_ratio, derive_seed(seed, 0))
    if cfg.pairing is MaskPairing.SHARED:
        if (cfg.rgb_strategy, cfg.rgb_ratio) != (cfg.depth_strategy, cfg.depth_ratio):
            raise ConfigurationException("Shared mask pairing needs the same strategy and ratio for both "
                                         "modalities.")
        visible_depth = visible_rgb.clone()
    else:
        visible_depth = sample_mask(geometry, cfg.depth_strategy, cfg.depth_ratio, derive_seed(seed, 1))
    return MaskPlan(geometry=geometry, visible_rgb=visible_rgb, visible_depth=visible_depth,
                    ratio_rgb=cfg.rgb_ratio, ratio_depth=cfg.depth_ratio, seed=seed,
                    strategy_rgb=cfg.rgb_strategy, strategy_depth=cfg.depth_strategy)


def make_plans(geometry: GridGeometry, cfg: MaskConfig, seed: int, batch_size: int) -> list[MaskPlan]:
    return [make_plan(geometry, cfg, derive_seed(seed, item)) for item in range(batch_size)]


def full_plan(geometry: GridGeometry) -> MaskPlan:
    everything = torch.ones(geometry.num_tokens, dtype=torch.bool)
    return MaskPlan(geometry=geometry, visible_rgb=everything, visible_depth=everything.clone(),
                    ratio_rgb=0.0, ratio_depth=0.0, seed=0)


def _per_item(plans: MaskPlan | Sequence[MaskPlan], batch_size: int) -> list[MaskPlan]:
    if isinstance(plans, MaskPlan):
        return [plans] * batch_size
    if len(plans) != batch_size:
        raise DimensionException(f"{len(plans)} plans for a batch of {batch_size}.")
    return list(plans)


def masked_matrix(plans: MaskPlan | Sequence[MaskPlan], modality: Modality, batch_size: int) -> torch.Tensor:
    """
    :return: Boolean (B, N), True where the token of the item is masked.
    """
    return torch.stack([plan.masked(modality) for plan in _per_item(plans, batch_size)])


def select_visible(batch: TokenBatch, plans: MaskPlan | Sequence[MaskPlan]) -> TokenBatch:
    """
    Keeps the visible tokens of every item in grid order and records their grid indices in index_map.

    :param batch: Full-grid tokens.
    :param plans: One plan for the whole batch or one per item; every item must keep the same count.
    """
    if batch.index_map is not None:
        raise DimensionException("Tokens were already restricted to a subset of the grid.")
    plans = _per_item(plans, batch.tokens.shape[0])
    if any(plan.geometry != batch.geometry for plan in plans):
        raise DimensionException(f"Mask plan geometry does not match the token grid {batch.geometry}.")

    kept = [plan.visible(batch.modality).nonzero().squeeze(1) for plan in plans]
    if len({len(indices) for indices in kept}) > 1:
        raise DimensionException("Items of one batch must keep the same number of tokens.")
    index_map = torch.stack(kept).to(batch.tokens.device)
    tokens = torch.gather(batch.tokens, 1, index_map[..., None].expand(-1, -1, batch.width))
    return TokenBatch(tokens=tokens, geometry=batch.geometry, modality=batch.modality, index_map=index_map)


def scatter_visible(visible: TokenBatch, fill: torch.Tensor) -> TokenBatch:
    """
    Places visible tokens back into their grid slots; every other slot takes `fill`.

    :param visible: Tokens with an index map.
    :param fill: A (D,) vector or a (B, N, D) tensor for the remaining slots.
    :return: Full-grid tokens.
    """
    if visible.index_map is None:
        return visible
    batch_size, _, width = visible.tokens.shape
    base = fill.to(visible.tokens.dtype).expand(batch_size, visible.geometry.num_tokens, width)
    tokens = torch.scatter(base, 1, visible.index_map[..., None].expand(-1, -1, width), visible.tokens)
    return TokenBatch(tokens=tokens, geometry=visible.geometry, modality=visible.modality)
