"""Retinal foreground estimation and patch eligibility."""

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image, PngImagePlugin
from scipy import ndimage
from skimage.color import rgb2gray
from skimage.filters import threshold_otsu
from skimage.measure import label
from skimage.morphology import binary_closing, disk

from retinapair.errors import ValidationError
from retinapair.models.records import FundusImage

logger = logging.getLogger(__name__)

ABSOLUTE_FLOOR = 0.06
OTSU_FACTOR = 0.5
CLOSING_RADIUS = 5
MIN_COVERAGE = 0.20
FALLBACK_RADIUS_FRACTION = 0.47
DEFAULT_COVERAGE_THRESHOLD = 0.5

MASK_SUFFIX = ".retina.png"
HASH_KEY = "content_sha256"


@dataclass(frozen=True, eq=False)
class EligibilityGrid:
    """Which patches of a G x G grid lie (mostly) inside the retina."""

    grid: np.ndarray
    coverage_threshold: float = DEFAULT_COVERAGE_THRESHOLD

    def __post_init__(self) -> None:
        grid = np.asarray(self.grid, dtype=bool)
        if grid.ndim != 2 or grid.shape[0] != grid.shape[1]:
            raise ValidationError(f"eligibility grid must be square, got {grid.shape}")
        if not grid.any():
            raise ValidationError("eligibility grid has no eligible patch")
        grid = grid.copy()
        grid.flags.writeable = False
        object.__setattr__(self, "grid", grid)

    @classmethod
    def full(cls, grid_size: int) -> "EligibilityGrid":
        return cls(np.ones((grid_size, grid_size), dtype=bool), coverage_threshold=1.0)

    @property
    def grid_size(self) -> int:
        return int(self.grid.shape[0])

    @property
    def num_patches(self) -> int:
        return self.grid_size**2

    @property
    def indices(self) -> np.ndarray:
        """Row-major flat indices of eligible patches, ascending."""
        return np.flatnonzero(self.grid.reshape(-1))

    @property
    def count(self) -> int:
        return int(self.grid.sum())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EligibilityGrid):
            return NotImplemented
        return bool(np.array_equal(self.grid, other.grid))

    def __hash__(self) -> int:
        return hash(self.grid.tobytes())


def fallback_circle(size: int) -> np.ndarray:
    """Centered inscribed disc of radius 0.47 * size."""
    centers = np.arange(size) + 0.5 - size / 2.0
    yy, xx = np.meshgrid(centers, centers, indexing="ij")
    radius = FALLBACK_RADIUS_FRACTION * size
    return (yy**2 + xx**2) <= radius**2


def estimate_retina_mask(image: FundusImage) -> np.ndarray:
    """Binary retina mask from luminance thresholding plus cleanup."""
    gray = rgb2gray(np.asarray(image.pixels, dtype=np.float64))
    threshold = max(ABSOLUTE_FLOOR, float(threshold_otsu(gray)) * OTSU_FACTOR)
    foreground = gray > threshold

    labels = label(foreground, connectivity=2)
    if labels.max() == 0:
        logger.debug(f"No foreground in {image!r}; using fallback circle")
        return fallback_circle(gray.shape[1])
    counts = np.bincount(labels.reshape(-1))
    counts[0] = 0
    component = labels == int(np.argmax(counts))

    component = binary_closing(component, disk(CLOSING_RADIUS))
    component = ndimage.binary_fill_holes(component)

    if component.mean() < MIN_COVERAGE:
        logger.debug(f"Retina component too small in {image!r}; using fallback")
        return fallback_circle(gray.shape[1])
    return np.asarray(component, dtype=bool)


def patch_coverage(mask: np.ndarray, patch_size: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64)
    height, width = mask.shape
    if patch_size <= 0 or height % patch_size or width % patch_size:
        raise ValidationError(
            f"mask of shape {mask.shape} is not divisible by patch size {patch_size}"
        )
    rows, cols = height // patch_size, width // patch_size
    return mask.reshape(rows, patch_size, cols, patch_size).mean(axis=(1, 3))


def patch_eligibility(
    mask: np.ndarray,
    patch_size: int,
    coverage_threshold: float = DEFAULT_COVERAGE_THRESHOLD,
) -> EligibilityGrid:
    """A patch is eligible when its mean mask coverage reaches the threshold.

    When no patch qualifies, the single best-covered patch is forced eligible.
    """
    if not 0.0 < coverage_threshold <= 1.0:
        raise ValidationError(
            f"coverage_threshold must lie in (0, 1], got {coverage_threshold}"
        )
    coverage = patch_coverage(mask, patch_size)
    if coverage.shape[0] != coverage.shape[1]:
        raise ValidationError(f"mask must be square, got {np.shape(mask)}")
    grid = coverage >= coverage_threshold
    if not grid.any():
        grid = np.zeros_like(grid)
        grid.reshape(-1)[int(np.argmax(coverage))] = True
    return EligibilityGrid(grid, coverage_threshold=coverage_threshold)


def eligibility_for(
    image: FundusImage,
    patch_size: int,
    coverage_threshold: float = DEFAULT_COVERAGE_THRESHOLD,
) -> EligibilityGrid:
    mask = image.retina_mask
    if mask is None:
        mask = estimate_retina_mask(image)
    return patch_eligibility(mask, patch_size, coverage_threshold)


def mask_cache_path(image_path: Path) -> Path:
    return image_path.with_name(image_path.stem + MASK_SUFFIX)


def content_hash(image_path: Path) -> str:
    return hashlib.sha256(image_path.read_bytes()).hexdigest()


def read_cached_mask(image_path: Path, expected_hash: str) -> Optional[np.ndarray]:
    cache = mask_cache_path(image_path)
    if not cache.exists():
        return None
    try:
        with Image.open(cache) as raster:
            if raster.info.get(HASH_KEY) != expected_hash:
                logger.info(f"Stale retina mask cache for {image_path.name}")
                return None
            return np.asarray(raster.convert("1"), dtype=bool)
    except OSError as e:
        logger.warning(f"Unreadable retina mask cache {cache}: {e}")
        return None


def write_cached_mask(image_path: Path, mask: np.ndarray, digest: str) -> None:
    info = PngImagePlugin.PngInfo()
    info.add_text(HASH_KEY, digest)
    raster = Image.fromarray(np.asarray(mask, dtype=bool))
    try:
        raster.save(mask_cache_path(image_path), format="PNG", pnginfo=info)
    except OSError as e:
        logger.warning(f"Could not write retina mask cache for {image_path}: {e}")


def cached_retina_mask(image_path: Path, image: FundusImage) -> np.ndarray:
    """Mask for a decoded image, reusing ``<stem>.retina.png`` when its hash matches."""
    digest = content_hash(image_path)
    cached = read_cached_mask(image_path, digest)
    if cached is not None and cached.shape == image.pixels.shape[:2]:
        return cached
    mask = estimate_retina_mask(image)
    write_cached_mask(image_path, mask, digest)
    return mask
