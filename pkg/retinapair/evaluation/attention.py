"""Attention-map export and post-training representation diagnostics."""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import matplotlib
import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from retinapair.data.ingest import PairTemplate, build_pair_templates
from retinapair.data.retina import estimate_retina_mask, patch_coverage
from retinapair.errors import ValidationError
from retinapair.models.network import SiameseMaskedViT, TokenSlot
from retinapair.models.records import FundusImage, PatientRecord
from retinapair.seeding import as_rng
from retinapair.training.objectives import counterpart_indices

logger = logging.getLogger(__name__)

OVERLAY_ALPHA = 0.5
COLORMAP = "jet"


@dataclass(frozen=True)
class AttentionExport:
    token: TokenSlot
    layer: int
    array_path: Path
    overlay_path: Path
    patch_mass: float
    row_sum: float


def _image_tensor(image: FundusImage, model: SiameseMaskedViT) -> torch.Tensor:
    if image.pixels.shape[0] != model.config.image_size:
        raise ValidationError(
            f"image size {image.pixels.shape[0]} does not match checkpoint size "
            f"{model.config.image_size}"
        )
    dtype = next(model.parameters()).dtype
    chw = torch.from_numpy(np.ascontiguousarray(image.pixels)).permute(2, 0, 1)
    return chw.to(dtype)


def upsample_heatmap(heatmap: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of a G x G map to size x size."""
    tensor = torch.from_numpy(np.asarray(heatmap, dtype=np.float64))[None, None]
    resized = F.interpolate(
        tensor, size=(size, size), mode="bilinear", align_corners=False
    )
    return resized[0, 0].numpy()


def overlay(
    image: FundusImage, heatmap: np.ndarray, alpha: float = OVERLAY_ALPHA
) -> np.ndarray:
    """Colormapped heatmap blended over the image, uint8 RGB."""
    size = image.pixels.shape[0]
    upsampled = upsample_heatmap(heatmap, size)
    peak = upsampled.max()
    normalized = upsampled / peak if peak > 0 else upsampled
    colored = matplotlib.colormaps[COLORMAP](normalized)[..., :3]
    blended = (1.0 - alpha) * image.pixels + alpha * colored
    return np.round(np.clip(blended, 0.0, 1.0) * 255.0).astype(np.uint8)


def export_attention(
    model: SiameseMaskedViT,
    image: FundusImage,
    tokens: Sequence[TokenSlot],
    layer: int,
    out_dir: Path,
    stem: str = "attn",
) -> List[AttentionExport]:
    """Write ``{stem}_{token}_L{layer}.npy`` (raw G x G) plus an overlay PNG."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tensor = _image_tensor(image, model)
    model.eval()

    exports = []
    for token in tokens:
        attention = model.attention_map(tensor, token, layer)
        name = f"{stem}_{token.value}_L{attention.layer}"
        array_path = out_dir / f"{name}.npy"
        overlay_path = out_dir / f"{name}.png"
        np.save(array_path, attention.heatmap)
        Image.fromarray(overlay(image, attention.heatmap)).save(overlay_path)
        exports.append(
            AttentionExport(
                token=token,
                layer=attention.layer,
                array_path=array_path,
                overlay_path=overlay_path,
                patch_mass=float(attention.heatmap.sum()),
                row_sum=attention.row_sum,
            )
        )
        logger.info(
            f"Exported {token.value} attention (layer {attention.layer}) "
            f"to {array_path}"
        )
    return exports


def retina_attention_fraction(
    heatmap: np.ndarray, retina_mask: np.ndarray, patch_size: int
) -> float:
    """Share of patch attention mass weighted by each patch's retinal coverage."""
    coverage = patch_coverage(np.asarray(retina_mask, dtype=bool), patch_size)
    if coverage.shape != heatmap.shape:
        raise ValidationError(
            f"heatmap grid {heatmap.shape} does not match mask grid {coverage.shape}"
        )
    total = float(heatmap.sum())
    if total <= 0:
        return 0.0
    return float((heatmap * coverage).sum() / total)


def mean_retina_attention(
    model: SiameseMaskedViT,
    images: Sequence[FundusImage],
    token: TokenSlot,
    layer: int = -1,
    retina_mask: Optional[np.ndarray] = None,
) -> float:
    """Average retina attention fraction of ``token`` over images."""
    if not images:
        raise ValidationError("no images to measure attention on")
    model.eval()
    fractions = []
    for image in images:
        mask = retina_mask
        if mask is None:
            mask = image.retina_mask
        if mask is None:
            mask = estimate_retina_mask(image)
        heatmap = model.attention_map(_image_tensor(image, model), token, layer).heatmap
        fractions.append(
            retina_attention_fraction(heatmap, mask, model.config.patch_size)
        )
    return float(np.mean(fractions))


@dataclass(frozen=True)
class ConsistencyGap:
    same_patient: float
    cross_patient: float
    pairs: int

    @property
    def gap(self) -> float:
        return self.cross_patient - self.same_patient

    def to_dict(self) -> Dict[str, float]:
        return {
            "same_patient": self.same_patient,
            "cross_patient": self.cross_patient,
            "gap": self.gap,
            "pairs": float(self.pairs),
        }


def pair_consistency_distance(
    model: SiameseMaskedViT, image_a: FundusImage, image_b: FundusImage
) -> float:
    """Mean (1 - cos) over all corresponding patches at full visibility."""
    model.eval()
    with torch.no_grad():
        batch = torch.stack(
            [_image_tensor(image_a, model), _image_tensor(image_b, model)]
        )
        patches = model.encode(batch).patches
    grid = model.config.grid_size
    positions = torch.arange(model.config.num_patches)
    mirrored = image_a.effective_eye != image_b.effective_eye
    counterparts = counterpart_indices(positions, grid, mirrored)
    a = F.normalize(patches[0], dim=-1)
    b = F.normalize(patches[1, counterparts], dim=-1)
    return float((1.0 - (a * b).sum(dim=-1)).mean())


def consistency_gap(
    model: SiameseMaskedViT,
    records: Sequence[PatientRecord],
    seed: int = 0,
    max_pairs: Optional[int] = None,
) -> ConsistencyGap:
    """Same-patient pair distance versus the same pairs with the partner swapped
    for an image of another patient."""
    templates: List[PairTemplate] = build_pair_templates(records)
    if not templates:
        raise ValidationError("no same-patient pairs to compare")
    rng = as_rng([seed, 0])
    if max_pairs is not None and len(templates) > max_pairs:
        chosen = np.sort(rng.choice(len(templates), size=max_pairs, replace=False))
        templates = [templates[int(i)] for i in chosen]
    if len({t.patient_id for t in templates}) < 2:
        raise ValidationError(
            "cross-patient pairs need at least two patients with pairs"
        )

    same, cross = [], []
    for template in templates:
        same.append(
            pair_consistency_distance(model, template.image_a, template.image_b)
        )
        while True:
            other = templates[int(rng.integers(len(templates)))]
            if other.patient_id != template.patient_id:
                break
        cross.append(pair_consistency_distance(model, template.image_a, other.image_b))

    result = ConsistencyGap(float(np.mean(same)), float(np.mean(cross)), len(templates))
    logger.info(
        f"Consistency distance: same-patient {result.same_patient:.4f}, "
        f"cross-patient {result.cross_patient:.4f} over {result.pairs} pairs"
    )
    return result
