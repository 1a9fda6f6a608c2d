"""Manifest loading, patient-level pair enumeration, role assignment, augmentation.

Manifest format (UTF-8 CSV, fixed header)::

    patient_id,image_path,eye,scanner_id,age_years,gender

Relative image paths resolve against the manifest's directory.
"""

import csv
import logging
from collections import OrderedDict
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from retinapair.data.retina import cached_retina_mask, estimate_retina_mask
from retinapair.errors import ManifestError, ValidationError
from retinapair.models.records import (
    IMAGE_SIZE,
    Eye,
    FundusImage,
    Gender,
    MetadataLabels,
    PairSample,
    PatientRecord,
)
from retinapair.seeding import AUGMENT_STREAM, ROLE_STREAM, item_rng

logger = logging.getLogger(__name__)

MANIFEST_HEADER = [
    "patient_id",
    "image_path",
    "eye",
    "scanner_id",
    "age_years",
    "gender",
]
CROP_SCALE = (0.6, 1.0)
FLIP_PROBABILITY = 0.5


def decode_image(path: Path, size: int = IMAGE_SIZE) -> np.ndarray:
    """Decode a raster file to float32 RGB in [0, 1], resized to size x size."""
    with Image.open(path) as raster:
        rgb = raster.convert("RGB")
        if rgb.size != (size, size):
            rgb = rgb.resize((size, size), Image.Resampling.BILINEAR)
        return np.asarray(rgb, dtype=np.float32) / 255.0


@dataclass(frozen=True)
class _ManifestRow:
    line: int
    patient_id: str
    image_path: Path
    eye: Eye
    scanner_id: str
    labels: MetadataLabels


def _parse_row(line: int, row: Dict[str, str], base: Path) -> _ManifestRow:
    try:
        patient_id = row["patient_id"].strip()
        if not patient_id:
            raise ManifestError("empty patient_id", row=line)
        image_path = Path(row["image_path"].strip())
        if not image_path.is_absolute():
            image_path = base / image_path
        age = float(row["age_years"])
        labels = MetadataLabels(age_years=age, gender=Gender.parse(row["gender"]))
        return _ManifestRow(
            line=line,
            patient_id=patient_id,
            image_path=image_path,
            eye=Eye.parse(row["eye"]),
            scanner_id=row["scanner_id"].strip(),
            labels=labels,
        )
    except ManifestError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise ManifestError(f"malformed row: {e}", row=line)


def load_manifest(
    path: Path, compute_masks: bool = True, cache_masks: bool = True
) -> List[PatientRecord]:
    """Read a manifest into one PatientRecord per patient, ordered by patient_id.

    Images are decoded and resized to 224 x 224. Retina masks are estimated
    once and cached next to each image when ``cache_masks`` is set.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")

    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None:
            logger.warning(f"Manifest {path} is empty")
            return []
        header = [name.strip() for name in reader.fieldnames]
        if header != MANIFEST_HEADER:
            raise ManifestError(
                f"header {header} does not match {MANIFEST_HEADER}", row=1
            )
        rows = [_parse_row(i, r, path.parent) for i, r in enumerate(reader, start=2)]

    if not rows:
        logger.warning(f"Manifest {path} has no rows")
        return []

    grouped: "OrderedDict[str, List[_ManifestRow]]" = OrderedDict()
    for row in rows:
        grouped.setdefault(row.patient_id, []).append(row)

    records = []
    for patient_id in sorted(grouped):
        patient_rows = grouped[patient_id]
        labels = patient_rows[0].labels
        for row in patient_rows[1:]:
            if row.labels != labels:
                raise ManifestError(
                    f"inconsistent metadata for patient {patient_id}: "
                    f"{row.labels.to_dict()} vs {labels.to_dict()}",
                    row=row.line,
                )
        images = [
            _load_image(row, acquisition_index, compute_masks, cache_masks)
            for acquisition_index, row in enumerate(patient_rows)
        ]
        records.append(PatientRecord(patient_id, tuple(images), labels))

    logger.info(f"Loaded {len(rows)} images for {len(records)} patients from {path}")
    return records


def _load_image(
    row: _ManifestRow, acquisition_index: int, compute_masks: bool, cache_masks: bool
) -> FundusImage:
    try:
        pixels = decode_image(row.image_path)
    except FileNotFoundError:
        raise ManifestError(f"image not found: {row.image_path}", row=row.line)
    except (UnidentifiedImageError, OSError) as e:
        raise ManifestError(f"cannot decode {row.image_path}: {e}", row=row.line)

    image = FundusImage(
        patient_id=row.patient_id,
        eye=row.eye,
        scanner_id=row.scanner_id,
        pixels=pixels,
        acquisition_index=acquisition_index,
        source=str(row.image_path),
    )
    if not compute_masks:
        return image
    if cache_masks:
        mask = cached_retina_mask(row.image_path, image)
    else:
        mask = estimate_retina_mask(image)
    return image.with_mask(mask)


@dataclass(frozen=True)
class PairTemplate:
    """An unordered same-patient pair before role assignment."""

    patient_id: str
    index_a: int
    index_b: int
    image_a: FundusImage
    image_b: FundusImage
    labels: MetadataLabels
    pair_index: int = 0

    @property
    def cross_laterality(self) -> bool:
        return self.image_a.eye != self.image_b.eye

    @property
    def same_scanner(self) -> bool:
        return self.image_a.scanner_id == self.image_b.scanner_id


@dataclass(frozen=True)
class PairIndex:
    pairs: Tuple[Tuple[str, int, int], ...]
    counts: Dict[str, int]

    @property
    def total(self) -> int:
        return len(self.pairs)


def enumerate_pairs(record: PatientRecord, start_index: int = 0) -> List[PairTemplate]:
    """All C(n, 2) unordered pairs of a patient's images (none when n == 1)."""
    return [
        PairTemplate(
            patient_id=record.patient_id,
            index_a=a,
            index_b=b,
            image_a=record.images[a],
            image_b=record.images[b],
            labels=record.labels,
            pair_index=start_index + offset,
        )
        for offset, (a, b) in enumerate(combinations(range(len(record.images)), 2))
    ]


def build_pair_templates(records: Iterable[PatientRecord]) -> List[PairTemplate]:
    """Pairs of every patient with dataset-global, stable pair indices."""
    templates: List[PairTemplate] = []
    for record in records:
        templates.extend(enumerate_pairs(record, start_index=len(templates)))
    return templates


def build_pair_index(records: Iterable[PatientRecord]) -> PairIndex:
    pairs: List[Tuple[str, int, int]] = []
    counts: Dict[str, int] = {}
    for record in records:
        patient_pairs = enumerate_pairs(record)
        counts[record.patient_id] = len(patient_pairs)
        pairs.extend((p.patient_id, p.index_a, p.index_b) for p in patient_pairs)
    return PairIndex(pairs=tuple(pairs), counts=counts)


def assign_roles(template: PairTemplate, seed: int, epoch: int = 0) -> PairSample:
    """Pick uniformly which image is masked; fixed for a (seed, epoch, pair)."""
    rng = item_rng(seed, epoch, template.pair_index, ROLE_STREAM)
    if rng.random() < 0.5:
        visible, masked = template.image_a, template.image_b
    else:
        visible, masked = template.image_b, template.image_a
    return PairSample(
        view_visible=visible,
        view_masked=masked,
        labels=template.labels,
        pair_index=template.pair_index,
    )


@dataclass(frozen=True)
class AugmentParams:
    top: int
    left: int
    side: int
    flip: bool

    @classmethod
    def identity(cls, size: int = IMAGE_SIZE) -> "AugmentParams":
        return cls(top=0, left=0, side=size, flip=False)


def draw_augment_params(
    rng: np.random.Generator,
    size: int = IMAGE_SIZE,
    scale: Tuple[float, float] = CROP_SCALE,
    flip_probability: float = FLIP_PROBABILITY,
) -> AugmentParams:
    """Square random-resized-crop covering an area fraction drawn from ``scale``."""
    area = rng.uniform(scale[0], scale[1])
    side = int(np.clip(round(size * np.sqrt(area)), 1, size))
    top = int(rng.integers(0, size - side + 1))
    left = int(rng.integers(0, size - side + 1))
    flip = bool(rng.random() < flip_probability)
    return AugmentParams(top=top, left=left, side=side, flip=flip)


def _resize(array: np.ndarray, size: int, mode: str) -> np.ndarray:
    tensor = torch.from_numpy(np.ascontiguousarray(array)).permute(2, 0, 1)[None]
    if mode == "nearest":
        resized = F.interpolate(tensor, size=(size, size), mode="nearest")
    else:
        resized = F.interpolate(
            tensor, size=(size, size), mode="bilinear", align_corners=False
        )
    return resized[0].permute(1, 2, 0).numpy()


def augment_image(image: FundusImage, params: AugmentParams) -> FundusImage:
    size = image.pixels.shape[0]
    rows = slice(params.top, params.top + params.side)
    cols = slice(params.left, params.left + params.side)
    pixels = np.asarray(image.pixels[rows, cols], dtype=np.float32)
    mask: Optional[np.ndarray] = None
    if image.retina_mask is not None:
        mask = image.retina_mask[rows, cols].astype(np.float32)

    if params.side != size:
        pixels = np.clip(_resize(pixels, size, "bilinear"), 0.0, 1.0)
        if mask is not None:
            mask = _resize(mask[..., None], size, "nearest")[..., 0]

    effective_eye = image.effective_eye or image.eye
    if params.flip:
        pixels = pixels[:, ::-1]
        if mask is not None:
            mask = mask[:, ::-1]
        effective_eye = effective_eye.mirrored()

    return image.with_pixels(
        pixels=np.ascontiguousarray(pixels),
        retina_mask=None if mask is None else np.ascontiguousarray(mask > 0.5),
        effective_eye=effective_eye,
    )


def augment_views(
    pair: PairSample,
    seed: int,
    epoch: int = 0,
    scale: Tuple[float, float] = CROP_SCALE,
    flip_probability: float = FLIP_PROBABILITY,
) -> PairSample:
    """Independent crop and flip per view, keyed by (seed, epoch, pair, view)."""
    views = []
    for view_index, view in enumerate((pair.view_visible, pair.view_masked)):
        rng = item_rng(seed, epoch, pair.pair_index, AUGMENT_STREAM, view_index)
        params = draw_augment_params(rng, view.pixels.shape[0], scale, flip_probability)
        views.append(augment_image(view, params))
    return PairSample(
        view_visible=views[0],
        view_masked=views[1],
        labels=pair.labels,
        pair_index=pair.pair_index,
    )


def describe_pairs(templates: List[PairTemplate]) -> Dict[str, int]:
    return {
        "pairs": len(templates),
        "cross_laterality": sum(t.cross_laterality for t in templates),
        "same_scanner": sum(t.same_scanner for t in templates),
    }


def require_pairs(templates: List[PairTemplate]) -> None:
    if not templates:
        raise ValidationError(
            "no patient has two or more images; nothing to pair for pretraining"
        )
