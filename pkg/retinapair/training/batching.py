"""Per-pair preparation (augment, eligibility, mask plan) and batch collation."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
import torch

from retinapair.data.ingest import augment_views
from retinapair.data.masking import BatchLayout, MaskPlan, batch_layout, sample_mask
from retinapair.data.retina import EligibilityGrid, eligibility_for
from retinapair.models.records import PairSample
from retinapair.seeding import MASK_STREAM
from retinapair.training.objectives import counterpart_indices


@dataclass(frozen=True)
class PreparationSettings:
    seed: int
    patch_size: int = 16
    coverage_threshold: float = 0.5
    retina_aware: bool = True
    augment: bool = True
    crop_scale: Tuple[float, float] = (0.6, 1.0)
    flip_probability: float = 0.5


@dataclass(frozen=True)
class PreparedPair:
    pair: PairSample
    plan: MaskPlan

    @property
    def mirrored(self) -> bool:
        return self.pair.mirrored


@dataclass
class PreparedBatch:
    visible_images: torch.Tensor  # (B, 3, H, W)
    masked_images: torch.Tensor  # (B, 3, H, W)
    layout: BatchLayout
    masked_grid: torch.Tensor  # (B, L) True where the patch is masked
    targets: torch.Tensor  # (B, L) True where masked and retinal
    counterparts: torch.Tensor  # (B, K) visible-view position of each visible token
    age: torch.Tensor  # (B,) normalized
    gender: torch.Tensor  # (B,) class index
    plans: List[MaskPlan]
    pair_indices: List[int]

    def __len__(self) -> int:
        return len(self.plans)

    def to(self, dtype: torch.dtype, device: str = "cpu") -> "PreparedBatch":
        self.visible_images = self.visible_images.to(device=device, dtype=dtype)
        self.masked_images = self.masked_images.to(device=device, dtype=dtype)
        self.age = self.age.to(device=device, dtype=dtype)
        return self


def prepare_pair(
    pair: PairSample, epoch: int, ratio: float, settings: PreparationSettings
) -> PreparedPair:
    """Augment both views, then sample the masked view's plan.

    The visible view is never masked.
    """
    if settings.augment:
        pair = augment_views(
            pair,
            settings.seed,
            epoch,
            scale=settings.crop_scale,
            flip_probability=settings.flip_probability,
        )
    grid = pair.view_masked.pixels.shape[0] // settings.patch_size
    if settings.retina_aware:
        eligible = eligibility_for(
            pair.view_masked, settings.patch_size, settings.coverage_threshold
        )
    else:
        eligible = EligibilityGrid.full(grid)
    plan = sample_mask(
        eligible, ratio, seed=[settings.seed, epoch, pair.pair_index, MASK_STREAM]
    )
    return PreparedPair(pair=pair, plan=plan)


def prepare_pairs(
    pairs: Sequence[PairSample],
    epoch: int,
    ratio: float,
    settings: PreparationSettings,
    workers: int = 0,
) -> List[PreparedPair]:
    """Order-preserving; results do not depend on ``workers``."""
    if workers <= 1:
        return [prepare_pair(p, epoch, ratio, settings) for p in pairs]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(
            executor.map(lambda p: prepare_pair(p, epoch, ratio, settings), pairs)
        )


def _to_chw(pixels: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(pixels)).permute(2, 0, 1)


def collate(prepared: Sequence[PreparedPair]) -> PreparedBatch:
    plans = [item.plan for item in prepared]
    layout = batch_layout(plans)
    grid = plans[0].grid_size

    counterparts = torch.zeros_like(layout.gather_index)
    for row, item in enumerate(prepared):
        count = len(item.plan.visible_indices)
        visible = layout.gather_index[row, :count]
        counterparts[row, :count] = counterpart_indices(visible, grid, item.mirrored)

    return PreparedBatch(
        visible_images=torch.stack(
            [_to_chw(p.pair.view_visible.pixels) for p in prepared]
        ),
        masked_images=torch.stack(
            [_to_chw(p.pair.view_masked.pixels) for p in prepared]
        ),
        layout=layout,
        masked_grid=torch.from_numpy(np.stack([plan.masked_grid for plan in plans])),
        targets=torch.from_numpy(
            np.stack([plan.reconstruction_targets for plan in plans])
        ),
        counterparts=counterparts,
        age=torch.tensor(
            [p.pair.labels.age_normalized for p in prepared], dtype=torch.float32
        ),
        gender=torch.tensor(
            [p.pair.labels.gender.index for p in prepared], dtype=torch.long
        ),
        plans=plans,
        pair_indices=[p.pair.pair_index for p in prepared],
    )
