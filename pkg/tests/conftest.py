"""Shared fixtures: synthetic images, cohorts, manifests and tiny configs."""

import csv
from pathlib import Path
from typing import Callable, List, Sequence, Tuple

import numpy as np
import pytest
from PIL import Image

from retinapair.data.ingest import MANIFEST_HEADER
from retinapair.data.synth import (
    SynthDataset,
    SynthSpec,
    generate_cohort,
    generate_dataset,
)
from retinapair.models.network import DecoderPreset, EncoderPreset, ModelConfig
from retinapair.models.records import (
    IMAGE_SIZE,
    Eye,
    FundusImage,
    Gender,
    MetadataLabels,
    PatientRecord,
)
from retinapair.training.engine import TrainConfig


def disc_pixels(
    radius_fraction: float = 0.45, level: float = 0.5, seed: int = 0
) -> np.ndarray:
    """Bright textured disc on a black background."""
    rng = np.random.default_rng(seed)
    coords = np.arange(IMAGE_SIZE) - (IMAGE_SIZE - 1) / 2.0
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    inside = np.hypot(yy, xx) <= radius_fraction * IMAGE_SIZE
    pixels = np.zeros((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.float32)
    texture = rng.uniform(-0.1, 0.1, size=(IMAGE_SIZE, IMAGE_SIZE, 3))
    pixels[inside] = np.clip(level + texture[inside], 0.0, 1.0)
    return pixels


@pytest.fixture
def make_image() -> Callable[..., FundusImage]:
    def factory(
        patient_id: str = "P1",
        eye: Eye = Eye.LEFT,
        scanner_id: str = "A",
        acquisition_index: int = 0,
        seed: int = 0,
        pixels: np.ndarray = None,
    ) -> FundusImage:
        return FundusImage(
            patient_id=patient_id,
            eye=eye,
            scanner_id=scanner_id,
            pixels=disc_pixels(seed=seed) if pixels is None else pixels,
            acquisition_index=acquisition_index,
        )

    return factory


@pytest.fixture
def make_record(make_image) -> Callable[..., PatientRecord]:
    def factory(
        patient_id: str = "P1",
        views: Sequence[Tuple[Eye, str]] = ((Eye.LEFT, "A"), (Eye.RIGHT, "A")),
        age: float = 54.0,
        gender: Gender = Gender.F,
    ) -> PatientRecord:
        images = tuple(
            make_image(patient_id, eye, scanner, acquisition_index=i, seed=i)
            for i, (eye, scanner) in enumerate(views)
        )
        labels = MetadataLabels(age_years=age, gender=gender)
        return PatientRecord(patient_id, images, labels)

    return factory


@pytest.fixture
def write_manifest(tmp_path) -> Callable[..., Path]:
    """Writes PNGs and a manifest; rows are (patient, eye, scanner, age, gender)."""

    def factory(
        rows: Sequence[Tuple[str, str, str, str, str]], name: str = "manifest.csv"
    ) -> Path:
        image_dir = tmp_path / "images"
        image_dir.mkdir(exist_ok=True)
        manifest = tmp_path / name
        with manifest.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(MANIFEST_HEADER)
            for i, (patient, eye, scanner, age, gender) in enumerate(rows):
                image_path = image_dir / f"{patient}_{i}.png"
                raster = np.round(disc_pixels(seed=i) * 255).astype(np.uint8)
                Image.fromarray(raster).save(image_path)
                relative = f"images/{image_path.name}"
                writer.writerow([patient, relative, eye, scanner, age, gender])
        return manifest

    return factory


@pytest.fixture(scope="session")
def cohort():
    """Six synthetic patients, four images each, generated in memory."""
    return generate_cohort(SynthSpec(n_patients=6, seed=11))


@pytest.fixture(scope="session")
def cohort_records(cohort) -> List[PatientRecord]:
    return [patient.record for patient in cohort]


@pytest.fixture(scope="session")
def synthetic_dataset(tmp_path_factory) -> SynthDataset:
    """Ten patients written to disk with manifest and labels."""
    out = tmp_path_factory.mktemp("synth") / "cohort"
    return generate_dataset(SynthSpec(n_patients=10, seed=5), out)


@pytest.fixture
def tiny_model_config() -> ModelConfig:
    return ModelConfig(encoder=EncoderPreset.TINY, decoder=DecoderPreset.TINY)


@pytest.fixture
def tiny_train_config(tiny_model_config) -> TrainConfig:
    return TrainConfig(
        epochs=4,
        warmup_epochs=1,
        batch_size=4,
        base_lr=1e-3,
        seed=0,
        model=tiny_model_config,
    )
