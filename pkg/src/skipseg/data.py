"""Datasets: synthetic membrane images, PNG stacks, augmentation, splits.

On-disk layout used by :func:`load_image_stack` / :func:`save_image_stack`::

    DIR/images/<name>.png   8-bit grayscale image
    DIR/masks/<name>.png    8-bit mask, >= 128 is foreground (cell interior)

Files are paired by name and read in lexicographic order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .exceptions import ConfigError, DimensionError


@dataclass
class Sample:
    """One image (1 x H x W, values in [0, 1]) and its binary mask."""

    image: np.ndarray
    mask: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=np.float32)
        if self.image.ndim == 2:
            self.image = self.image[None]
        if self.mask.ndim == 2:
            self.mask = self.mask[None]
        if self.image.shape != self.mask.shape:
            raise DimensionError(f"image {self.image.shape} and mask {self.mask.shape} differ")


@dataclass
class DatasetSplit:
    train: List[Sample]
    val: List[Sample]
    seed: int = 0


def stack_samples(samples: Sequence[Sample]) -> Tuple[np.ndarray, np.ndarray]:
    """(images, masks) as N x 1 x H x W float32 arrays."""
    if not samples:
        return np.zeros((0, 1, 0, 0), np.float32), np.zeros((0, 1, 0, 0), np.float32)
    return (np.stack([s.image for s in samples]), np.stack([s.mask for s in samples]))


# -- synthetic data ------------------------------------------------------------

def _voronoi_labels(points: np.ndarray, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    d = (yy[..., None] - points[:, 0]) ** 2 + (xx[..., None] - points[:, 1]) ** 2
    return np.argmin(d, axis=-1)


def generate_synthetic_em(seed: int, count: int, size: int = 64) -> List[Sample]:
    """Membrane-like images from random Voronoi tessellations.

    Cell interiors are foreground; the 1-2 px bands where neighbouring cells
    meet are membrane (mask 0). Every pixel that is 4-adjacent to a different
    cell is covered by membrane on at least one side, so distinct cells are
    always separated. Each sample is drawn from its own generator keyed on
    ``(seed, index)``.
    """
    if size < 16 or size & (size - 1):
        raise ConfigError(f"size must be a power of two >= 16, got {size}")
    samples = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        n_cells = int(rng.integers(size * size // 160, size * size // 90 + 1))
        points = rng.random((n_cells, 2)) * size
        labels = _voronoi_labels(points, size)

        membrane = np.zeros((size, size), dtype=bool)
        membrane[:, :-1] |= labels[:, :-1] != labels[:, 1:]
        membrane[:-1, :] |= labels[:-1, :] != labels[1:, :]
        if rng.random() < 0.5:
            membrane = ndimage.binary_dilation(membrane, structure=np.array([[0, 0, 0], [0, 1, 1], [0, 0, 0]], bool))
        mask = ~membrane

        brightness = rng.uniform(0.55, 0.85, size=n_cells)[labels]
        texture = ndimage.gaussian_filter(rng.normal(size=(size, size)), 1.5) * 0.25
        soft = ndimage.gaussian_filter(mask.astype(np.float64), 0.7)
        image = 0.12 + soft * brightness + texture + rng.normal(scale=0.05, size=(size, size))
        samples.append(Sample(np.clip(image, 0.0, 1.0), mask, name=f"synth_{seed}_{i:04d}"))
    return samples


# -- image stacks on disk ------------------------------------------------------

def _read_gray(path: Path) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "1", "P"):
                img = img.convert("L")
            return np.asarray(img.convert("L"), dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc


def load_image_stack(directory, pattern: str = "*.png") -> List[Sample]:
    """Load paired ``images/`` and ``masks/`` files from ``directory``."""
    directory = Path(directory)
    img_dir, mask_dir = directory / "images", directory / "masks"
    if not img_dir.is_dir():
        return []
    samples = []
    for img_path in sorted(img_dir.glob(pattern)):
        mask_path = mask_dir / img_path.name
        if not mask_path.exists():
            raise FileNotFoundError(f"no mask for {img_path} (expected {mask_path})")
        image = _read_gray(img_path).astype(np.float32) / 255.0
        mask = (_read_gray(mask_path).astype(np.float32) / 255.0 >= 0.5).astype(np.float32)
        if image.shape != mask.shape:
            raise DimensionError(f"{img_path.name}: image {image.shape} and mask {mask.shape} differ")
        samples.append(Sample(image, mask, name=img_path.stem))
    return samples


def save_image_stack(samples: Sequence[Sample], directory) -> None:
    from PIL import Image

    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        name = (s.name or f"sample_{i:04d}") + ".png"
        img = np.round(np.clip(s.image[0], 0, 1) * 255).astype(np.uint8)
        mask = (s.mask[0] > 0.5).astype(np.uint8) * 255
        Image.fromarray(img, mode="L").save(directory / "images" / name)
        Image.fromarray(mask, mode="L").save(directory / "masks" / name)


# -- augmentation --------------------------------------------------------------

@dataclass(frozen=True)
class AugmentFlags:
    """Which random transforms to apply; each fires with probability 0.5."""

    flip: bool = True
    rotate90: bool = True
    shear: bool = True
    elastic: bool = True
    rotate_small: bool = False
    max_shear_deg: float = 10.0
    max_rotation_deg: float = 15.0
    elastic_grid: int = 4
    elastic_magnitude: float = 2.0

    @classmethod
    def none(cls) -> "AugmentFlags":
        return cls(flip=False, rotate90=False, shear=False, elastic=False, rotate_small=False)

    @property
    def any(self) -> bool:
        return self.flip or self.rotate90 or self.shear or self.elastic or self.rotate_small


@dataclass
class Transform:
    """A sampled geometric transform, applicable to any H x W array."""

    hflip: bool = False
    vflip: bool = False
    rot90: int = 0
    affine: Optional[np.ndarray] = None
    displacement: Optional[np.ndarray] = field(default=None, repr=False)

    def apply(self, arr: np.ndarray, order: int) -> np.ndarray:
        """Warp a 2-D array; ``order`` 0 is nearest neighbour, 1 bilinear."""
        out = arr
        if self.hflip:
            out = out[:, ::-1]
        if self.vflip:
            out = out[::-1, :]
        if self.rot90:
            out = np.rot90(out, self.rot90)
        if self.affine is not None:
            h, w = out.shape
            center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
            offset = center - self.affine @ center
            out = ndimage.affine_transform(out, self.affine, offset=offset, order=order, mode="reflect")
        if self.displacement is not None:
            h, w = out.shape
            yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
            coords = [yy + self.displacement[0], xx + self.displacement[1]]
            out = ndimage.map_coordinates(out, coords, order=order, mode="reflect")
        return np.ascontiguousarray(out)


def sample_transform(rng: np.random.Generator, flags: AugmentFlags, shape: Tuple[int, int]) -> Transform:
    t = Transform()
    if flags.flip:
        t.hflip = bool(rng.random() < 0.5)
        t.vflip = bool(rng.random() < 0.5)
    if flags.rotate90 and shape[0] == shape[1] and rng.random() < 0.5:
        t.rot90 = int(rng.integers(1, 4))
    matrix = np.eye(2)
    if flags.shear and rng.random() < 0.5:
        angle = np.deg2rad(rng.uniform(-flags.max_shear_deg, flags.max_shear_deg))
        matrix = matrix @ np.array([[1.0, 0.0], [np.tan(angle), 1.0]])
    if flags.rotate_small and rng.random() < 0.5:
        a = np.deg2rad(rng.uniform(-flags.max_rotation_deg, flags.max_rotation_deg))
        matrix = matrix @ np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    if not np.array_equal(matrix, np.eye(2)):
        t.affine = matrix
    if flags.elastic and rng.random() < 0.5:
        h, w = shape
        g = flags.elastic_grid
        coarse = rng.uniform(-flags.elastic_magnitude, flags.elastic_magnitude, size=(2, g, g))
        # cubic spline upsampling of the coarse grid gives a smooth field
        t.displacement = np.stack(
            [ndimage.zoom(c, (h / g, w / g), order=3, mode="nearest") for c in coarse]
        )
    return t


def augment_sample(sample: Sample, rng: np.random.Generator, flags: AugmentFlags = AugmentFlags()) -> Sample:
    """Apply one random geometric transform to image (bilinear) and mask (nearest)."""
    if not flags.any:
        return sample
    t = sample_transform(rng, flags, sample.image.shape[1:])
    image = np.stack([np.clip(t.apply(c, order=1), 0.0, 1.0) for c in sample.image])
    mask = np.stack([t.apply(c, order=0) for c in sample.mask])
    return Sample(image, mask, name=sample.name)


def augment_batch(images: np.ndarray, masks: np.ndarray, rng: np.random.Generator,
                  flags: AugmentFlags) -> Tuple[np.ndarray, np.ndarray]:
    if not flags.any:
        return images, masks
    out = [augment_sample(Sample(i, m), rng, flags) for i, m in zip(images, masks)]
    return np.stack([s.image for s in out]), np.stack([s.mask for s in out])


def split_train_val(samples: Sequence[Sample], ratio: float, seed: int = 0) -> DatasetSplit:
    """Seeded shuffle, then the first ``round(ratio * n)`` samples train."""
    n = len(samples)
    if n < 2:
        raise ConfigError(f"need at least 2 samples to split, got {n}")
    n_train = int(round(ratio * n))
    if n_train <= 0 or n_train >= n:
        raise ConfigError(f"ratio {ratio} leaves an empty split for {n} samples")
    order = np.random.default_rng(seed).permutation(n)
    return DatasetSplit(
        train=[samples[i] for i in order[:n_train]],
        val=[samples[i] for i in order[n_train:]],
        seed=seed,
    )
