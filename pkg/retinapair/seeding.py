"""Per-item random streams.

Every random draw in the pipeline comes from a generator keyed by
(global seed, epoch, item index, stream, view), so results do not depend on
worker count or iteration order.
"""

from typing import Sequence, Union

import numpy as np
import torch

ROLE_STREAM = 0
AUGMENT_STREAM = 1
MASK_STREAM = 2
ORDER_STREAM = 3
SYNTH_STREAM = 4
PROBE_STREAM = 5

SeedLike = Union[int, Sequence[int]]


def item_rng(
    seed: int, epoch: int, index: int, stream: int, view: int = 0
) -> np.random.Generator:
    key = [int(seed), int(epoch), int(index), int(stream), int(view)]
    if min(key) < 0:
        raise ValueError(f"seed components must be non-negative, got {key}")
    return np.random.default_rng(np.random.SeedSequence(key))


def as_rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, (int, np.integer)):
        return np.random.default_rng(int(seed))
    return np.random.default_rng(np.random.SeedSequence([int(s) for s in seed]))


def torch_generator(seed: int) -> torch.Generator:
    generator = torch.Generator()
    generator.manual_seed(int(seed))
    return generator
