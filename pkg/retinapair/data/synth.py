"""Synthetic fundus-like cohorts with known retina geometry and planted labels.

Each patient has one base texture in left-eye orientation. Right-eye images
mirror it, and every image adds its own pixel noise. Age drives vessel
tortuosity, female patients carry a faint angular stripe texture, and the
lesion count decides the binary disease label.
"""

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import ndimage
from skimage.draw import line_aa

from retinapair.data.ingest import MANIFEST_HEADER
from retinapair.errors import ValidationError
from retinapair.models.records import (
    IMAGE_SIZE,
    Eye,
    FundusImage,
    Gender,
    MetadataLabels,
    PatientRecord,
)
from retinapair.seeding import SYNTH_STREAM, SeedLike, as_rng

logger = logging.getLogger(__name__)

LABELS_HEADER = ["patient_id", "split", "age_years", "gender", "disease"]
SPLITS = ("train", "val", "test")
DISEASE_MIN_LESIONS = 3
BASE_CEILING = 0.8

FUNDUS_COLOR = np.array([0.62, 0.30, 0.12])
DISC_COLOR = np.array([0.25, 0.25, 0.10])
LESION_COLOR = np.array([0.20, 0.16, 0.04])
VESSEL_DARKENING = np.array([0.40, 0.60, 0.60])


class SynthSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n_patients: int = Field(200, ge=1)
    eyes: Tuple[Eye, ...] = (Eye.LEFT, Eye.RIGHT)
    scanners: Tuple[str, ...] = ("A", "B")
    acquisitions: int = Field(1, ge=1)
    drop_probability: float = Field(0.0, ge=0.0, lt=1.0)
    radius_fraction: float = Field(0.45, gt=0.0, le=0.5)
    age_range: Tuple[float, float] = (20.0, 90.0)
    female_probability: float = Field(0.5, ge=0.0, le=1.0)
    vessel_count: Tuple[int, int] = (6, 10)
    vessel_step: float = Field(3.0, gt=0.0)
    max_vessel_steps: int = Field(80, ge=1)
    base_curvature: float = Field(0.08, ge=0.0)
    tortuosity_gain: float = Field(2.0, ge=0.0)
    stripe_amplitude: float = Field(0.03, ge=0.0)
    stripe_frequency: int = Field(12, ge=1)
    lesion_rate: float = Field(2.5, ge=0.0)
    noise_sigma: float = Field(0.02, ge=0.0)
    shifted_scanner: str = "B"
    scanner_gamma: float = Field(1.3, gt=0.0)
    scanner_green_shift: float = Field(0.05, ge=0.0)
    split_fractions: Tuple[float, float, float] = (0.70, 0.15, 0.15)
    seed: int = Field(7, ge=0)

    @model_validator(mode="after")
    def _check_ranges(self) -> "SynthSpec":
        low, high = self.age_range
        if not 0.0 <= low <= high <= 120.0:
            raise ValueError(
                f"age_range must satisfy 0 <= low <= high <= 120, got {self.age_range}"
            )
        if not 1 <= self.vessel_count[0] <= self.vessel_count[1]:
            raise ValueError(
                "vessel_count must be an increasing positive range, "
                f"got {self.vessel_count}"
            )
        if not self.eyes or not self.scanners:
            raise ValueError("at least one eye and one scanner are required")
        if any(f < 0 for f in self.split_fractions) or not math.isclose(
            sum(self.split_fractions), 1.0, abs_tol=1e-9
        ):
            raise ValueError(
                "split_fractions must be non-negative and sum to 1, "
                f"got {self.split_fractions}"
            )
        return self

    @property
    def images_per_patient(self) -> int:
        return len(self.eyes) * len(self.scanners) * self.acquisitions


@dataclass(frozen=True)
class RetinaGeometry:
    """Analytic retina disc shared by every image of a cohort."""

    size: int
    radius: float

    @property
    def center(self) -> float:
        return (self.size - 1) / 2.0

    def distance(self) -> np.ndarray:
        coords = np.arange(self.size, dtype=np.float64)
        yy, xx = np.meshgrid(coords, coords, indexing="ij")
        return np.hypot(yy - self.center, xx - self.center)

    def mask(self) -> np.ndarray:
        return self.distance() <= self.radius

    def alpha(self) -> np.ndarray:
        """Anti-aliased coverage in [0, 1]."""
        return np.clip(self.radius - self.distance() + 0.5, 0.0, 1.0)

    def interior(self, fraction: float = 0.9) -> np.ndarray:
        return self.distance() <= fraction * self.radius


@dataclass(frozen=True)
class SynthPatient:
    record: PatientRecord
    geometry: RetinaGeometry
    lesion_count: int
    vessel_count: int
    curvature_mean: float

    @property
    def patient_id(self) -> str:
        return self.record.patient_id

    @property
    def disease(self) -> bool:
        return self.lesion_count >= DISEASE_MIN_LESIONS

    def truth(self) -> Dict[str, object]:
        return {
            "patient_id": self.patient_id,
            "lesion_count": self.lesion_count,
            "vessel_count": self.vessel_count,
            "curvature_mean": self.curvature_mean,
            "radius": self.geometry.radius,
            "center": self.geometry.center,
        }


def _seed_key(seed: SeedLike) -> List[int]:
    if isinstance(seed, (int, np.integer)):
        return [int(seed)]
    return [int(s) for s in seed]


def geometry_for(spec: SynthSpec) -> RetinaGeometry:
    return RetinaGeometry(size=IMAGE_SIZE, radius=spec.radius_fraction * IMAGE_SIZE)


# ----------------------------------------
# Base texture
# ----------------------------------------


def _draw_vessels(
    rng: np.random.Generator,
    spec: SynthSpec,
    geometry: RetinaGeometry,
    origin: Tuple[float, float],
    age_normalized: float,
) -> Tuple[np.ndarray, int, float]:
    """Random-walk vessel map in [0, 1], vessel count and mean absolute turn."""
    size = geometry.size
    kappa = spec.base_curvature * (1.0 + spec.tortuosity_gain * age_normalized)
    count = int(rng.integers(spec.vessel_count[0], spec.vessel_count[1] + 1))
    canvas = np.zeros((size, size), dtype=np.float64)
    turns: List[float] = []
    limit = 0.97 * geometry.radius

    for _ in range(count):
        y, x = origin
        heading = rng.uniform(0.0, 2.0 * math.pi)
        for _ in range(spec.max_vessel_steps):
            turn = rng.normal(0.0, kappa) if kappa > 0 else 0.0
            turns.append(abs(turn))
            heading += turn
            ny = y + spec.vessel_step * math.sin(heading)
            nx = x + spec.vessel_step * math.cos(heading)
            if math.hypot(ny - geometry.center, nx - geometry.center) > limit:
                break
            rr, cc, val = line_aa(
                int(round(y)), int(round(x)), int(round(ny)), int(round(nx))
            )
            inside = (rr >= 0) & (rr < size) & (cc >= 0) & (cc < size)
            rr, cc, val = rr[inside], cc[inside], val[inside]
            canvas[rr, cc] = np.maximum(canvas[rr, cc], val)
            y, x = ny, nx

    vessels = np.clip(ndimage.gaussian_filter(canvas, sigma=1.0) * 2.5, 0.0, 1.0)
    curvature = float(np.mean(turns)) if turns else 0.0
    return vessels, count, curvature


def _gaussian_blob(
    geometry: RetinaGeometry, y: float, x: float, sigma: float
) -> np.ndarray:
    coords = np.arange(geometry.size, dtype=np.float64)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    return np.exp(-((yy - y) ** 2 + (xx - x) ** 2) / (2.0 * sigma**2))


def _base_texture(
    rng: np.random.Generator,
    spec: SynthSpec,
    geometry: RetinaGeometry,
    labels: MetadataLabels,
) -> Tuple[np.ndarray, int, int, float]:
    center, radius = geometry.center, geometry.radius
    distance = geometry.distance()
    alpha = geometry.alpha()

    falloff = 1.0 - 0.35 * np.clip(distance / radius, 0.0, 1.0) ** 2
    base = FUNDUS_COLOR[None, None, :] * falloff[..., None]

    texture = ndimage.gaussian_filter(rng.normal(size=distance.shape), sigma=6.0)
    texture /= max(float(texture.std()), 1e-12)
    base = base + 0.04 * texture[..., None]

    disc = (center, center + 0.3 * radius)
    disc_blob = _gaussian_blob(geometry, *disc, sigma=0.06 * radius)
    base = base + DISC_COLOR * disc_blob[..., None]

    vessels, vessel_count, curvature = _draw_vessels(
        rng, spec, geometry, disc, labels.age_normalized
    )
    base = base * (1.0 - VESSEL_DARKENING * vessels[..., None])

    if labels.gender is Gender.F and spec.stripe_amplitude > 0:
        coords = np.arange(geometry.size, dtype=np.float64)
        yy, xx = np.meshgrid(coords, coords, indexing="ij")
        angle = np.arctan2(yy - center, xx - center)
        stripes = np.sin(spec.stripe_frequency * angle)
        base = base + spec.stripe_amplitude * stripes[..., None]

    lesion_count = int(rng.poisson(spec.lesion_rate))
    for _ in range(lesion_count):
        r = 0.8 * radius * math.sqrt(rng.uniform())
        theta = rng.uniform(0.0, 2.0 * math.pi)
        blob = _gaussian_blob(
            geometry, center + r * math.sin(theta), center + r * math.cos(theta), 2.5
        )
        base = base + LESION_COLOR * blob[..., None]

    base = np.clip(base, 0.0, BASE_CEILING) * alpha[..., None]
    return base, lesion_count, vessel_count, curvature


# ----------------------------------------
# Views
# ----------------------------------------


def scanner_transform(
    pixels: np.ndarray, spec: SynthSpec, alpha: np.ndarray
) -> np.ndarray:
    """Gamma curve plus a green lift inside the retina, clipped to [0, 1]."""
    out = np.power(np.clip(pixels, 0.0, 1.0), spec.scanner_gamma)
    out[..., 1] = out[..., 1] + spec.scanner_green_shift * alpha
    return np.clip(out, 0.0, 1.0)


def quantize(pixels: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid the raster files store."""
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.float32) / 255.0


def _render_view(
    base: np.ndarray,
    eye: Eye,
    scanner: str,
    rng: np.random.Generator,
    spec: SynthSpec,
    alpha: np.ndarray,
) -> np.ndarray:
    texture = base if eye is Eye.LEFT else base[:, ::-1, :]
    noise = rng.normal(0.0, spec.noise_sigma, size=texture.shape) * alpha[..., None]
    view = np.clip(texture + noise, 0.0, 1.0)
    if scanner == spec.shifted_scanner:
        view = scanner_transform(view, spec, alpha)
    return quantize(view)


def generate_patient(
    patient_seed: SeedLike, spec: SynthSpec, patient_id: str = "P0000"
) -> SynthPatient:
    """One patient: labels, a shared base texture and one image per view.

    Every draw comes from generators keyed by ``patient_seed``.
    """
    key = _seed_key(patient_seed)
    rng = as_rng(key + [0])
    geometry = geometry_for(spec)

    age = round(float(rng.uniform(*spec.age_range)), 1)
    gender = Gender.F if rng.random() < spec.female_probability else Gender.M
    labels = MetadataLabels(age_years=age, gender=gender)

    base, lesion_count, vessel_count, curvature = _base_texture(
        rng, spec, geometry, labels
    )
    alpha = geometry.alpha()

    slots = [
        (eye, scanner, k)
        for eye in spec.eyes
        for scanner in spec.scanners
        for k in range(spec.acquisitions)
    ]
    if spec.drop_probability > 0:
        kept = [s for s in slots if rng.random() >= spec.drop_probability]
        slots = kept or [slots[int(rng.integers(len(slots)))]]

    images = []
    for view_index, (eye, scanner, k) in enumerate(slots):
        view_rng = as_rng(key + [view_index + 1])
        images.append(
            FundusImage(
                patient_id=patient_id,
                eye=eye,
                scanner_id=scanner,
                pixels=_render_view(base, eye, scanner, view_rng, spec, alpha),
                acquisition_index=view_index,
                source=image_name(patient_id, eye, scanner, k),
            )
        )

    return SynthPatient(
        record=PatientRecord(patient_id, tuple(images), labels),
        geometry=geometry,
        lesion_count=lesion_count,
        vessel_count=vessel_count,
        curvature_mean=curvature,
    )


def image_name(patient_id: str, eye: Eye, scanner: str, acquisition: int) -> str:
    return f"{patient_id}_{eye.value}_{scanner}_{acquisition}.png"


def patient_id_for(index: int) -> str:
    return f"P{index:04d}"


def generate_cohort(spec: SynthSpec, workers: int = 0) -> List[SynthPatient]:
    """All patients of a spec, in patient order; independent of ``workers``."""

    def build(index: int) -> SynthPatient:
        seed = [spec.seed, SYNTH_STREAM, index]
        return generate_patient(seed, spec, patient_id_for(index))

    indices = range(spec.n_patients)
    if workers <= 1:
        return [build(i) for i in indices]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(build, indices))


# ----------------------------------------
# Splits
# ----------------------------------------


def split_sizes(n: int, fractions: Sequence[float]) -> List[int]:
    """Largest-remainder apportionment; equal remainders favour the later split."""
    shares = [Fraction(f).limit_denominator(10**6) * n for f in fractions]
    sizes = [math.floor(s) for s in shares]
    leftover = n - sum(sizes)
    order = sorted(
        range(len(shares)), key=lambda i: (shares[i] - sizes[i], i), reverse=True
    )
    for i in order[:leftover]:
        sizes[i] += 1
    return sizes


def assign_splits(patient_ids: Sequence[str], spec: SynthSpec) -> Dict[str, str]:
    sizes = split_sizes(len(patient_ids), spec.split_fractions)
    rng = as_rng([spec.seed, SYNTH_STREAM, len(patient_ids), 1])
    order = rng.permutation(len(patient_ids))
    splits: Dict[str, str] = {}
    start = 0
    for name, size in zip(SPLITS, sizes):
        for i in order[start : start + size]:
            splits[patient_ids[int(i)]] = name
        start += size
    return splits


# ----------------------------------------
# Dataset files
# ----------------------------------------


@dataclass(frozen=True)
class SynthDataset:
    root: Path
    manifest: Path
    labels: Path
    truth: Path
    patients: List[SynthPatient]
    splits: Dict[str, str]

    @property
    def image_count(self) -> int:
        return sum(len(p.record.images) for p in self.patients)


def _write_png(path: Path, pixels: np.ndarray) -> None:
    raster = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(raster).save(path)


def require_empty_dir(out_dir: Path, ignore: Sequence[str] = ()) -> None:
    if out_dir.exists() and any(p.name not in ignore for p in out_dir.iterdir()):
        raise ValidationError(f"output directory {out_dir} is not empty")


def generate_dataset(
    spec: SynthSpec,
    out_dir: Path,
    workers: int = 0,
    ignore: Sequence[str] = (),
) -> SynthDataset:
    """Write images plus ``manifest.csv``, ``labels.csv`` and ``truth.jsonl``.

    Files named in ``ignore`` do not count towards a non-empty directory.
    """
    out_dir = Path(out_dir)
    require_empty_dir(out_dir, ignore)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)

    patients = generate_cohort(spec, workers=workers)
    splits = assign_splits([p.patient_id for p in patients], spec)

    manifest = out_dir / "manifest.csv"
    labels_path = out_dir / "labels.csv"
    truth_path = out_dir / "truth.jsonl"
    with manifest.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(MANIFEST_HEADER)
        for patient in patients:
            labels = patient.record.labels
            for image in patient.record.images:
                _write_png(image_dir / image.source, image.pixels)
                writer.writerow(
                    [
                        patient.patient_id,
                        f"images/{image.source}",
                        image.eye.value,
                        image.scanner_id,
                        f"{labels.age_years:.1f}",
                        labels.gender.value,
                    ]
                )

    with labels_path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(LABELS_HEADER)
        for patient in patients:
            labels = patient.record.labels
            writer.writerow(
                [
                    patient.patient_id,
                    splits[patient.patient_id],
                    f"{labels.age_years:.1f}",
                    labels.gender.value,
                    int(patient.disease),
                ]
            )

    with truth_path.open("w", encoding="utf-8") as handle:
        for patient in patients:
            handle.write(json.dumps(patient.truth(), sort_keys=True) + "\n")

    dataset = SynthDataset(
        root=out_dir,
        manifest=manifest,
        labels=labels_path,
        truth=truth_path,
        patients=patients,
        splits=splits,
    )
    logger.info(
        f"Generated {len(patients)} patients "
        f"({dataset.image_count} images) in {out_dir}"
    )
    return dataset


def load_truth(path: Path) -> Dict[str, Dict[str, object]]:
    truth = {}
    with Path(path).open(encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                row = json.loads(line)
                truth[row["patient_id"]] = row
    return truth


def summarize(
    patients: Sequence[SynthPatient], splits: Optional[Dict[str, str]] = None
) -> Dict[str, object]:
    females = sum(1 for p in patients if p.record.labels.gender is Gender.F)
    summary: Dict[str, object] = {
        "patients": len(patients),
        "images": sum(len(p.record.images) for p in patients),
        "female": females,
        "disease": sum(1 for p in patients if p.disease),
    }
    if splits is not None:
        summary["splits"] = {
            name: sum(1 for s in splits.values() if s == name) for name in SPLITS
        }
    return summary
