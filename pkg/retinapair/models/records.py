"""Domain value types shared by ingestion, masking, training and evaluation.

Pixels are float32 arrays in HWC layout with values in [0, 1]. Masks are
boolean HxW arrays. All arrays are frozen (read-only) once a record is built.
"""

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, Optional, Tuple

import numpy as np

from retinapair.errors import ValidationError

IMAGE_SIZE = 224
AGE_DIVISOR = 100.0
AGE_CLAMP = 1.2
MAX_AGE_YEARS = 120.0


class Eye(str, Enum):
    LEFT = "L"
    RIGHT = "R"

    def mirrored(self) -> "Eye":
        return Eye.RIGHT if self is Eye.LEFT else Eye.LEFT

    @classmethod
    def parse(cls, code: str) -> "Eye":
        try:
            return cls(code.strip().upper())
        except ValueError:
            raise ValidationError(f"Unknown eye code: {code!r} (expected L or R)")


class Gender(str, Enum):
    F = "F"
    M = "M"

    @property
    def index(self) -> int:
        """Class index used by the gender head (F=0, M=1)."""
        return 0 if self is Gender.F else 1

    @classmethod
    def parse(cls, code: str) -> "Gender":
        try:
            return cls(code.strip().upper())
        except ValueError:
            raise ValidationError(f"Unknown gender code: {code!r} (expected F or M)")


def normalize_age(age_years: float) -> float:
    """Map years to the model's age scale: age / 100 clamped to [0, 1.2]."""
    if not np.isfinite(age_years) or age_years < 0:
        raise ValidationError(f"Age must be a non-negative number, got {age_years!r}")
    return min(max(age_years / AGE_DIVISOR, 0.0), AGE_CLAMP)


def denormalize_age(age_normalized: float) -> float:
    return float(age_normalized) * AGE_DIVISOR


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.flags.writeable = False
    return array


@dataclass(frozen=True)
class MetadataLabels:
    age_years: float
    gender: Gender

    def __post_init__(self) -> None:
        if not 0.0 <= float(self.age_years) <= MAX_AGE_YEARS:
            raise ValidationError(
                f"age_years must lie in [0, {MAX_AGE_YEARS:g}], got {self.age_years!r}"
            )
        if not isinstance(self.gender, Gender):
            raise ValidationError(f"gender must be a Gender, got {self.gender!r}")

    @property
    def age_normalized(self) -> float:
        return normalize_age(self.age_years)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "age_years": float(self.age_years),
            "age_normalized": self.age_normalized,
            "gender": self.gender.value,
        }


@dataclass(frozen=True, eq=False)
class FundusImage:
    """One color fundus photograph after preprocessing.

    ``effective_eye`` starts equal to ``eye`` and is toggled by horizontal
    flips so patch correspondence between views stays anatomically correct.
    """

    patient_id: str
    eye: Eye
    scanner_id: str
    pixels: np.ndarray
    retina_mask: Optional[np.ndarray] = None
    acquisition_index: int = 0
    source: str = ""
    effective_eye: Optional[Eye] = None

    def __post_init__(self) -> None:
        pixels = np.asarray(self.pixels, dtype=np.float32)
        if pixels.shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
            raise ValidationError(
                f"pixels must have shape ({IMAGE_SIZE}, {IMAGE_SIZE}, 3), "
                f"got {pixels.shape}"
            )
        if not np.all(np.isfinite(pixels)) or pixels.min() < 0.0 or pixels.max() > 1.0:
            raise ValidationError("pixel values must lie in [0, 1]")
        object.__setattr__(self, "pixels", _frozen(pixels))

        if self.retina_mask is not None:
            mask = np.asarray(self.retina_mask)
            if mask.shape != pixels.shape[:2]:
                raise ValidationError(
                    f"retina_mask shape {mask.shape} does not match image "
                    f"{pixels.shape[:2]}"
                )
            if not np.all((mask == 0) | (mask == 1)):
                raise ValidationError("retina_mask values must be 0 or 1")
            object.__setattr__(self, "retina_mask", _frozen(mask.astype(bool)))

        if not isinstance(self.eye, Eye):
            raise ValidationError(f"eye must be an Eye, got {self.eye!r}")
        if self.effective_eye is None:
            object.__setattr__(self, "effective_eye", self.eye)

    @property
    def identity(self) -> Tuple[str, Eye, str, int]:
        return (self.patient_id, self.eye, self.scanner_id, self.acquisition_index)

    def with_pixels(
        self,
        pixels: np.ndarray,
        retina_mask: Optional[np.ndarray],
        effective_eye: Eye,
    ) -> "FundusImage":
        return replace(
            self, pixels=pixels, retina_mask=retina_mask, effective_eye=effective_eye
        )

    def with_mask(self, retina_mask: np.ndarray) -> "FundusImage":
        return replace(self, retina_mask=retina_mask)

    def __repr__(self) -> str:
        return (
            f"<FundusImage {self.patient_id} {self.eye.value}/{self.scanner_id}"
            f" #{self.acquisition_index}>"
        )


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    images: Tuple[FundusImage, ...]
    labels: MetadataLabels

    def __post_init__(self) -> None:
        object.__setattr__(self, "images", tuple(self.images))
        if not self.images:
            raise ValidationError(f"patient {self.patient_id} has no images")
        for image in self.images:
            if image.patient_id != self.patient_id:
                raise ValidationError(
                    f"image of patient {image.patient_id} filed under "
                    f"{self.patient_id}"
                )

    def __repr__(self) -> str:
        return f"<PatientRecord {self.patient_id} ({len(self.images)} images)>"


@dataclass(frozen=True)
class PairSample:
    """Two views of one patient; the masked view is reconstructed from the other."""

    view_visible: FundusImage
    view_masked: FundusImage
    labels: MetadataLabels
    pair_index: int = 0
    cross_laterality: bool = field(init=False)

    def __post_init__(self) -> None:
        if self.view_visible.patient_id != self.view_masked.patient_id:
            raise ValidationError("pair views belong to different patients")
        if self.view_visible.identity == self.view_masked.identity:
            raise ValidationError(
                f"pair views are the same image: {self.view_visible!r}"
            )
        object.__setattr__(
            self, "cross_laterality", self.view_visible.eye != self.view_masked.eye
        )

    @property
    def patient_id(self) -> str:
        return self.view_visible.patient_id

    @property
    def mirrored(self) -> bool:
        """True when patch correspondence between the views is a horizontal mirror."""
        return self.view_visible.effective_eye != self.view_masked.effective_eye
