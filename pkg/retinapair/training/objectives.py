"""Pretraining loss terms and their weighted sum."""

import math
from dataclasses import dataclass, field
from typing import Any, Dict, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field

from retinapair.errors import TrainingAbortedError, ValidationError
from retinapair.seeding import torch_generator


class LossWeights(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    lambda_recon: float = Field(1.4, ge=0.0)
    lambda_consis: float = Field(0.4, ge=0.0)
    lambda_meta: float = Field(0.2, ge=0.0)
    mae_pixel: float = Field(1.0, ge=0.0)
    perceptual: float = Field(0.4, ge=0.0)


def recon_pixel_loss(
    pred: torch.Tensor, target: torch.Tensor, qualifying: torch.Tensor
) -> torch.Tensor:
    """MSE over pixels of patches flagged in ``qualifying`` (masked and retinal).

    pred, target: (B, L, P); qualifying: (B, L) bool.
    """
    if pred.shape != target.shape or qualifying.shape != pred.shape[:2]:
        raise ValidationError(
            f"shape mismatch: pred {tuple(pred.shape)}, target {tuple(target.shape)}, "
            f"qualifying {tuple(qualifying.shape)}"
        )
    count = int(qualifying.sum())
    if count == 0:
        raise ValidationError("no masked retinal patch to reconstruct")
    weight = qualifying.to(pred.dtype)[..., None]
    return ((pred - target) ** 2 * weight).sum() / (count * pred.shape[-1])


class PerceptualExtractor(nn.Module):
    """Frozen, seeded three-stage strided conv pyramid (16/32/64 channels)."""

    channels = (16, 32, 64)

    def __init__(self, seed: int = 0, in_chans: int = 3) -> None:
        super().__init__()
        stages = []
        previous = in_chans
        for width in self.channels:
            stages.append(
                nn.Sequential(
                    nn.Conv2d(previous, width, kernel_size=3, stride=2, padding=1),
                    nn.GELU(),
                )
            )
            previous = width
        self.stages = nn.ModuleList(stages)

        generator = torch_generator(seed)
        with torch.no_grad():
            for stage in self.stages:
                conv = stage[0]
                fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
                conv.weight.copy_(
                    torch.randn(conv.weight.shape, generator=generator)
                    * math.sqrt(2.0 / fan_in)
                )
                conv.bias.zero_()
        for param in self.parameters():
            param.requires_grad = False
        self.eval()

    def forward(self, images: torch.Tensor) -> Tuple[torch.Tensor, ...]:
        features = []
        x = images
        for stage in self.stages:
            x = stage(x)
            features.append(x)
        return tuple(features)


def perceptual_loss(
    recon_image: torch.Tensor, target_image: torch.Tensor, extractor: nn.Module
) -> torch.Tensor:
    """Mean squared feature distance, averaged over extractor stages."""
    recon_features = extractor(recon_image)
    target_features = extractor(target_image)
    distances = [
        F.mse_loss(a, b) for a, b in zip(recon_features, target_features)
    ]
    return torch.stack(distances).mean()


def compose_reconstruction(
    pred: torch.Tensor, target: torch.Tensor, masked: torch.Tensor
) -> torch.Tensor:
    """Predicted patches at masked positions, ground truth elsewhere (B, L, P)."""
    return torch.where(masked[..., None], pred, target)


def counterpart_indices(
    visible_indices: torch.Tensor, grid_size: int, mirrored: bool
) -> torch.Tensor:
    """Grid position in the other view: (row, G-1-col) when mirrored, else identity."""
    if not mirrored:
        return visible_indices
    rows = visible_indices // grid_size
    cols = visible_indices % grid_size
    return rows * grid_size + (grid_size - 1 - cols)


def cosine_consistency(z1: torch.Tensor, z2: torch.Tensor) -> torch.Tensor:
    """Mean (1 - cos) over N paired embeddings, each (N, D)."""
    if z1.shape != z2.shape:
        raise ValidationError(f"embedding shapes differ: {z1.shape} vs {z2.shape}")
    if z1.shape[0] == 0:
        raise ValidationError("no patch pairs for the consistency loss")
    z1 = F.normalize(z1, dim=-1)
    z2 = F.normalize(z2, dim=-1)
    return (1.0 - (z1 * z2).sum(dim=-1)).mean()


def consistency_loss(
    masked_view_tokens: torch.Tensor,
    padding: torch.Tensor,
    visible_view_tokens: torch.Tensor,
    counterparts: torch.Tensor,
) -> torch.Tensor:
    """Pool all unmasked patch pairs across the batch.

    masked_view_tokens: (B, K, D) encoder outputs of the masked view's
    visible patches; padding: (B, K); visible_view_tokens: (B, L, D);
    counterparts: (B, K) grid positions into the visible view.
    """
    dim = visible_view_tokens.shape[-1]
    paired = torch.gather(
        visible_view_tokens, 1, counterparts[..., None].expand(-1, -1, dim)
    )
    keep = ~padding
    return cosine_consistency(masked_view_tokens[keep], paired[keep])


def meta_loss(
    age_pred: torch.Tensor,
    gender_logits: torch.Tensor,
    age_target: torch.Tensor,
    gender_target: torch.Tensor,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """(batch RMSE on normalized age, mean gender cross-entropy)."""
    if age_pred.numel() == 0:
        raise ValidationError("meta loss needs at least one sample")
    rmse = torch.sqrt(torch.mean((age_pred - age_target.to(age_pred.dtype)) ** 2))
    ce = F.cross_entropy(gender_logits, gender_target.long())
    return rmse, ce


@dataclass
class LossTerms:
    recon_pixel: torch.Tensor
    recon_perceptual: torch.Tensor
    consistency: torch.Tensor
    meta_age_rmse: torch.Tensor
    meta_gender_ce: torch.Tensor
    masked_retinal_patches: int = 0
    consistency_pairs: int = 0

    def named(self) -> Dict[str, torch.Tensor]:
        return {
            "recon_pixel": self.recon_pixel,
            "recon_perceptual": self.recon_perceptual,
            "consistency": self.consistency,
            "meta_age_rmse": self.meta_age_rmse,
            "meta_gender_ce": self.meta_gender_ce,
        }


def total_loss(terms: LossTerms, weights: LossWeights) -> torch.Tensor:
    for name, value in terms.named().items():
        if not torch.isfinite(value).all():
            raise TrainingAbortedError(
                name, {k: float(v.detach()) for k, v in terms.named().items()}
            )
    recon = (
        weights.mae_pixel * terms.recon_pixel
        + weights.perceptual * terms.recon_perceptual
    )
    meta = terms.meta_age_rmse + terms.meta_gender_ce
    return (
        weights.lambda_recon * recon
        + weights.lambda_consis * terms.consistency
        + weights.lambda_meta * meta
    )


@dataclass
class LossReport:
    recon_pixel: float
    recon_perceptual: float
    consistency: float
    meta_age_rmse: float
    meta_gender_ce: float
    total: float
    weights: LossWeights
    masked_retinal_patches: int = 0
    consistency_pairs: int = 0
    extra: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_terms(
        cls, terms: LossTerms, total: torch.Tensor, weights: LossWeights
    ) -> "LossReport":
        values = {k: float(v.detach()) for k, v in terms.named().items()}
        return cls(
            total=float(total.detach()),
            weights=weights,
            masked_retinal_patches=terms.masked_retinal_patches,
            consistency_pairs=terms.consistency_pairs,
            **values,
        )

    def to_dict(self) -> Dict[str, Any]:
        body: Dict[str, Any] = {
            "recon_pixel": self.recon_pixel,
            "recon_perceptual": self.recon_perceptual,
            "consistency": self.consistency,
            "meta_age_rmse": self.meta_age_rmse,
            "meta_gender_ce": self.meta_gender_ce,
            "total": self.total,
            "weights": self.weights.model_dump(),
            "masked_retinal_patches": self.masked_retinal_patches,
            "consistency_pairs": self.consistency_pairs,
        }
        body.update(self.extra)
        return body
