"""
Synthetic datasets with known generative factors.

``shapes`` renders one anti-aliased rotated ellipse per 32x32 grayscale image;
``gaussians`` is the usual ring of 2-D Gaussian modes. Both are pure functions
of their seed, and the held-out split is always the last part of the sample
order.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from config import Config

logger = logging.getLogger(__name__)

IMAGE_SIZE = 32
SUPERSAMPLE = 4
RENDER_CHUNK = 256
DATASETS = ('shapes', 'gaussians')
FACTOR_NAMES = ('x_pos', 'y_pos', 'scale', 'rotation', 'intensity')


@dataclass
class ShapesSample:
    image: np.ndarray  # (32, 32) float32 in [-1, 1]
    factors: np.ndarray  # (5,) float32 in [0, 1]


@dataclass
class Dataset:
    """Training and held-out rows (flattened) plus the factors used to pretrain eps"""
    name: str
    train: np.ndarray
    heldout: np.ndarray
    factors: np.ndarray
    output_scale: float = 1.0
    image_shape: Optional[Tuple[int, int]] = None

    @property
    def data_dim(self) -> int:
        return int(self.train.shape[1])

    @property
    def is_image(self) -> bool:
        return self.image_shape is not None

    def mean_sample(self) -> np.ndarray:
        return self.train.mean(axis=0, keepdims=True).astype(np.float32)


def _subpixel_grid() -> Tuple[np.ndarray, np.ndarray]:
    offsets = (np.arange(SUPERSAMPLE) + 0.5) / SUPERSAMPLE
    coords = (np.arange(IMAGE_SIZE)[:, None] + offsets[None, :]).reshape(-1)
    ys, xs = np.meshgrid(coords, coords, indexing='ij')
    return xs, ys


def render_shapes(factors: np.ndarray) -> np.ndarray:
    """Render (n, 5) factors into (n, 32, 32) images; pure function of the factors"""
    factors = np.asarray(factors, dtype=np.float64).reshape(-1, len(FACTOR_NAMES))
    xs, ys = _subpixel_grid()
    images = np.empty((factors.shape[0], IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
    for start in range(0, factors.shape[0], RENDER_CHUNK):
        chunk = factors[start:start + RENDER_CHUNK]
        px, py, scale, rotation, intensity = (chunk[:, i, None, None] for i in range(5))
        cx = IMAGE_SIZE * (0.25 + 0.5 * px)
        cy = IMAGE_SIZE * (0.25 + 0.5 * py)
        major = 3.0 + 6.0 * scale
        minor = 0.5 * major
        angle = np.pi * rotation
        cos, sin = np.cos(angle), np.sin(angle)
        dx = xs[None] - cx
        dy = ys[None] - cy
        u = dx * cos + dy * sin
        v = -dx * sin + dy * cos
        inside = (u / major) ** 2 + (v / minor) ** 2 <= 1.0
        coverage = inside.reshape(-1, IMAGE_SIZE, SUPERSAMPLE, IMAGE_SIZE, SUPERSAMPLE).mean(axis=(2, 4))
        brightness = 0.3 + 0.7 * intensity
        images[start:start + RENDER_CHUNK] = -1.0 + 2.0 * brightness * coverage
    return images


def gen_shapes(n: int, seed: int) -> List[ShapesSample]:
    if n < 1:
        raise ValueError(f"gen_shapes: n must be at least 1, got {n}")
    rng = np.random.default_rng(seed)
    factors = rng.random((n, len(FACTOR_NAMES))).astype(np.float32)
    images = render_shapes(factors)
    return [ShapesSample(image, f) for image, f in zip(images, factors)]


def mode_centres(k_modes: int, radius: float) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(k_modes) / k_modes
    return np.stack([radius * np.cos(angles), radius * np.sin(angles)], axis=1)


def _gaussian_mixture(n: int, k_modes: int, radius: float, sigma: float, seed: int):
    if k_modes < 1:
        raise ValueError(f"gen_gaussians2d: k_modes must be at least 1, got {k_modes}")
    rng = np.random.default_rng(seed)
    centres = mode_centres(k_modes, radius)
    modes = rng.integers(0, k_modes, size=n)
    points = centres[modes] + sigma * rng.standard_normal((n, 2))
    return points.astype(np.float32), centres[modes].astype(np.float32)


def gen_gaussians2d(n: int, k_modes: int, radius: float, sigma: float, seed: int) -> List[np.ndarray]:
    """Points from k equally weighted Gaussians placed evenly on a circle"""
    points, _ = _gaussian_mixture(n, k_modes, radius, sigma, seed)
    return list(points)


def split_heldout(rows: np.ndarray, fraction: float = Config.HELDOUT_FRACTION) -> Tuple[np.ndarray, np.ndarray]:
    """(train, heldout) where heldout is the last fraction of rows by index"""
    n = rows.shape[0]
    if n < 2:
        raise ValueError(f"Need at least 2 samples to hold any out, got {n}")
    held = min(n - 1, max(1, int(n * fraction)))
    return rows[:n - held], rows[n - held:]


def load_dataset(name: str, n: Optional[int] = None, seed: int = Config.SEED) -> Dataset:
    if name == 'shapes':
        n = n or Config.SHAPES_SAMPLES
        samples = gen_shapes(n, seed)
        rows = np.stack([s.image.reshape(-1) for s in samples])
        factors = np.stack([s.factors for s in samples])
        train, heldout = split_heldout(rows)
        dataset = Dataset(name, train, heldout, factors[:train.shape[0]], Config.SHAPES_OUTPUT_SCALE,
                          (IMAGE_SIZE, IMAGE_SIZE))
    elif name == 'gaussians':
        n = n or Config.GAUSSIAN_SAMPLES
        points, centres = _gaussian_mixture(n, Config.GAUSSIAN_MODES, Config.GAUSSIAN_RADIUS,
                                            Config.GAUSSIAN_SIGMA, seed)
        train, heldout = split_heldout(points)
        # tanh head has to reach past the outermost mode
        scale = 1.2 * (Config.GAUSSIAN_RADIUS + 4.0 * Config.GAUSSIAN_SIGMA)
        dataset = Dataset(name, train, heldout, centres[:train.shape[0]], scale)
    else:
        raise ValueError(f"Unknown dataset '{name}'; expected one of {DATASETS}")
    logger.info(f"Generated {name} dataset: {dataset.train.shape[0]} train / {dataset.heldout.shape[0]} held-out "
                f"samples of dim {dataset.data_dim} (seed {seed})")
    return dataset


def dataset_to_checkpoint(dataset: Dataset) -> Dict[str, np.ndarray]:
    entries = OrderedDict()
    entries['train'] = dataset.train.astype(np.float32)
    entries['heldout'] = dataset.heldout.astype(np.float32)
    entries['factors'] = dataset.factors.astype(np.float32)
    entries['meta.output_scale'] = np.array([dataset.output_scale], dtype=np.float32)
    shape = dataset.image_shape or (0, 0)
    entries['meta.image_shape'] = np.array(shape, dtype=np.float32)
    return entries


def dataset_from_checkpoint(entries: Dict[str, np.ndarray], name: str = 'stored') -> Dataset:
    missing = [key for key in ('train', 'heldout', 'factors') if key not in entries]
    if missing:
        raise KeyError(f"Dataset checkpoint is missing entries {missing}")
    shape = tuple(int(v) for v in np.asarray(entries.get('meta.image_shape', [0, 0])).reshape(-1))
    scale = float(np.asarray(entries.get('meta.output_scale', [1.0])).reshape(-1)[0])
    if shape == (0, 0):
        image_shape = None
    else:
        image_shape = shape
    if name == 'stored':
        name = 'shapes' if image_shape else 'gaussians'
    return Dataset(name, entries['train'], entries['heldout'], entries['factors'], scale, image_shape)
