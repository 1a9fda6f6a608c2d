"""Retina-aware masking: cosine-decay ratio schedule and region-constrained sampling."""

import logging
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field

from retinapair.data.retina import EligibilityGrid
from retinapair.errors import ValidationError
from retinapair.seeding import SeedLike, as_rng

logger = logging.getLogger(__name__)


class ScheduleConfig(BaseModel):
    """Endpoints of the masking-ratio schedule; the horizon is the run's epochs."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    r0: float = Field(0.985, gt=0.0, lt=1.0)
    rT: float = Field(0.85, gt=0.0, lt=1.0)


@dataclass(frozen=True)
class MaskSchedule:
    r0: float = 0.985
    rT: float = 0.85
    T: int = 300

    def __post_init__(self) -> None:
        for name, value in (("r0", self.r0), ("rT", self.rT)):
            if not 0.0 < value < 1.0:
                raise ValidationError(f"{name} must lie in (0, 1), got {value}")
        if self.T < 1:
            raise ValidationError(f"T must be at least 1, got {self.T}")
        if self.increasing:
            logger.warning(
                f"Masking schedule increases from r0={self.r0} to rT={self.rT}"
            )

    @property
    def increasing(self) -> bool:
        return self.rT > self.r0

    @classmethod
    def from_config(cls, config: ScheduleConfig, epochs: int) -> "MaskSchedule":
        return cls(r0=config.r0, rT=config.rT, T=epochs)


def masking_ratio(t: int, schedule: MaskSchedule) -> float:
    """r_t = 0.5 * (1 - cos(pi * t / T)) * (rT - r0) + r0."""
    if not 0 <= t <= schedule.T:
        raise ValidationError(f"epoch {t} outside [0, {schedule.T}]")
    return (
        0.5 * (1.0 - math.cos(math.pi * t / schedule.T)) * (schedule.rT - schedule.r0)
        + schedule.r0
    )


def schedule_table(schedule: MaskSchedule) -> List[Tuple[int, float]]:
    return [(t, masking_ratio(t, schedule)) for t in range(schedule.T + 1)]


def schedule_tsv(schedule: MaskSchedule) -> str:
    """Header plus one row per epoch 0..T, ratios at full precision."""
    rows = ["epoch\tmask_ratio"]
    rows.extend(f"{t}\t{ratio!r}" for t, ratio in schedule_table(schedule))
    return "\n".join(rows) + "\n"


def visible_count(eligible_count: int, ratio: float) -> int:
    """max(1, round((1 - ratio) * eligible)), rounding halves away from zero."""
    return max(1, int(math.floor((1.0 - ratio) * eligible_count + 0.5)))


@dataclass(frozen=True, eq=False)
class MaskPlan:
    eligible: EligibilityGrid
    visible_indices: np.ndarray
    masked_indices: np.ndarray
    ratio_used: float

    def __post_init__(self) -> None:
        visible = np.asarray(self.visible_indices, dtype=np.int64)
        masked = np.asarray(self.masked_indices, dtype=np.int64)
        total = self.eligible.num_patches
        if np.any(np.diff(visible) <= 0) or np.any(np.diff(masked) <= 0):
            raise ValidationError("plan indices must be sorted and unique")
        if len(visible) + len(masked) != total or np.intersect1d(visible, masked).size:
            raise ValidationError("visible and masked sets must partition the grid")
        if not np.isin(visible, self.eligible.indices).all():
            raise ValidationError("visible patch outside the eligible region")
        for name, array in (("visible_indices", visible), ("masked_indices", masked)):
            array.flags.writeable = False
            object.__setattr__(self, name, array)

    @property
    def grid_size(self) -> int:
        return self.eligible.grid_size

    @property
    def num_patches(self) -> int:
        return self.eligible.num_patches

    @property
    def masked_grid(self) -> np.ndarray:
        flat = np.ones(self.num_patches, dtype=bool)
        flat[self.visible_indices] = False
        return flat

    @property
    def reconstruction_targets(self) -> np.ndarray:
        """Flat boolean grid of patches that are both masked and retinal."""
        return self.masked_grid & self.eligible.grid.reshape(-1)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MaskPlan):
            return NotImplemented
        return (
            self.eligible == other.eligible
            and np.array_equal(self.visible_indices, other.visible_indices)
            and self.ratio_used == other.ratio_used
        )

    def __hash__(self) -> int:
        return hash((self.visible_indices.tobytes(), self.ratio_used))


def sample_mask(eligible: EligibilityGrid, ratio: float, seed: SeedLike) -> MaskPlan:
    """Draw the visible set uniformly without replacement from eligible patches."""
    if not 0.0 < ratio < 1.0:
        raise ValidationError(f"masking ratio must lie in (0, 1), got {ratio}")
    candidates = eligible.indices
    keep = visible_count(len(candidates), ratio)
    rng = as_rng(seed)
    visible = np.sort(rng.choice(candidates, size=keep, replace=False))
    masked = np.setdiff1d(np.arange(eligible.num_patches), visible)
    return MaskPlan(
        eligible=eligible,
        visible_indices=visible,
        masked_indices=masked,
        ratio_used=float(ratio),
    )


@dataclass(frozen=True)
class TokenLayout:
    """Index maps between the full patch grid and the visible-only sequence.

    ``gather_index[k]`` is the grid position of the k-th visible token.
    ``slot_index[p]`` is the sequence slot feeding grid position p; every
    masked position points at the shared mask-token slot ``len(gather_index)``.
    """

    gather_index: torch.Tensor
    slot_index: torch.Tensor

    @property
    def mask_slot(self) -> int:
        return int(self.gather_index.numel())


def mask_token_layout(plan: MaskPlan) -> TokenLayout:
    visible = torch.as_tensor(plan.visible_indices, dtype=torch.long)
    slot = torch.full((plan.num_patches,), visible.numel(), dtype=torch.long)
    slot[visible] = torch.arange(visible.numel())
    return TokenLayout(gather_index=visible, slot_index=slot)


def gather_visible(x: torch.Tensor, layout: TokenLayout) -> torch.Tensor:
    """(..., L, D) full-grid tokens -> (..., K, D) visible tokens."""
    return x.index_select(-2, layout.gather_index)


def scatter_with_mask_token(
    tokens: torch.Tensor, mask_token: torch.Tensor, layout: TokenLayout
) -> torch.Tensor:
    """(K, D) visible tokens + (D,) mask token -> (L, D) full-grid sequence."""
    table = torch.cat([tokens, mask_token.reshape(1, -1)], dim=0)
    return table.index_select(0, layout.slot_index)


@dataclass(frozen=True)
class BatchLayout:
    """Padded per-sample layouts for a batch of plans with unequal visible counts."""

    gather_index: torch.Tensor  # (B, K_max) grid positions, padded with 0
    padding: torch.Tensor  # (B, K_max) True where padded
    slot_index: torch.Tensor  # (B, L) slot per grid position, K_max = mask slot

    @property
    def max_visible(self) -> int:
        return int(self.gather_index.shape[1])


def batch_layout(plans: Sequence[MaskPlan]) -> BatchLayout:
    if not plans:
        raise ValidationError("cannot lay out an empty batch")
    num_patches = plans[0].num_patches
    if any(plan.num_patches != num_patches for plan in plans):
        raise ValidationError("plans in one batch must share a grid size")
    k_max = max(len(plan.visible_indices) for plan in plans)
    gather = torch.zeros(len(plans), k_max, dtype=torch.long)
    padding = torch.ones(len(plans), k_max, dtype=torch.bool)
    slots = torch.full((len(plans), num_patches), k_max, dtype=torch.long)
    for row, plan in enumerate(plans):
        visible = torch.as_tensor(plan.visible_indices, dtype=torch.long)
        count = visible.numel()
        gather[row, :count] = visible
        padding[row, :count] = False
        slots[row, visible] = torch.arange(count)
    return BatchLayout(gather_index=gather, padding=padding, slot_index=slots)
