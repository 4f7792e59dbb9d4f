import numpy as np
import torch


def derive_seed(seed: int, *keys: int) -> int:
    """
    Derives an independent child seed from a run seed and any number of integer keys
    (e.g. step and batch position).

    :param seed: The parent seed.
    :param keys: Additional non-negative integers that identify the child stream.
    :return: A 32 bit seed.
    """
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.use_deterministic_algorithms(True, warn_only=True)
