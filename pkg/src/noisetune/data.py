"""Synthetic class templates and parametrically shifted test samples."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .augment import CropBox, resized_crop
from .exceptions import ConfigError
from .rng import stream
from .tensor import load_tnsr, save_tnsr

__all__ = ["DatasetSpec", "SyntheticDataset", "make_synthetic_shift_dataset", "radial_mask", "save_dataset", "load_dataset"]

_BLUR = np.array([[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]]) / 16.0


@dataclass(frozen=True)
class DatasetSpec:
    """Generation parameters.

    Each class is a stationary colour texture, so any reasonably sized crop
    of it still identifies the class. ``pixel_noise_std`` is the
    in-distribution per-pixel Gaussian noise. The shift applied on top is
    ``(x - 0.5) * contrast + 0.5 + brightness + structure_amplitude * M * S``
    where ``S`` is a per-sample coarse field in ``[-1, 1]`` and ``M`` is a
    radial mask that is zero inside ``clean_radius`` (as a fraction of the
    half-width) and ramps to one at the edge midpoints. The identity shift is
    ``contrast=1, brightness=0, structure_amplitude=0``.
    """

    n_classes: int = 8
    n_samples: int = 200
    channels: int = 3
    image_size: int = 32
    pixel_noise_std: float = 0.05
    brightness: float = 0.0
    contrast: float = 1.0
    structure_amplitude: float = 1.0
    clean_radius: float = 0.6

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.n_samples < 1:
            raise ConfigError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.channels < 1 or self.image_size < 3:
            raise ConfigError("channels must be >= 1 and image_size >= 3")
        if self.pixel_noise_std < 0 or self.structure_amplitude < 0 or self.contrast < 0:
            raise ConfigError("noise std, structure amplitude and contrast must be non-negative")
        if not 0.0 <= self.clean_radius < 1.0:
            raise ConfigError(f"clean_radius must lie in [0, 1), got {self.clean_radius}")

    @property
    def is_shifted(self) -> bool:
        return not (self.contrast == 1.0 and self.brightness == 0.0 and self.structure_amplitude == 0.0)

    def unshifted(self) -> "DatasetSpec":
        return replace(self, brightness=0.0, contrast=1.0, structure_amplitude=0.0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown dataset keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SyntheticDataset:
    templates: np.ndarray  # c x C x H x W
    images: np.ndarray  # n x C x H x W
    labels: np.ndarray  # n, int
    spec: DatasetSpec | None = None
    seed: int | None = None

    def __len__(self):
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return self.templates.shape[0]


def _blur(field: np.ndarray) -> np.ndarray:
    """Convolve the last two axes with the fixed 3x3 binomial kernel (edge padding)."""
    h, w = field.shape[-2:]
    padded = np.pad(field, [(0, 0)] * (field.ndim - 2) + [(1, 1), (1, 1)], mode="edge")
    out = np.zeros_like(field)
    for dy in range(3):
        for dx in range(3):
            out += _BLUR[dy, dx] * padded[..., dy:dy + h, dx:dx + w]
    return out


def _rescale(field: np.ndarray) -> np.ndarray:
    lo, hi = field.min(), field.max()
    return (field - lo) / (hi - lo)


def _upsample(field: np.ndarray, size: int) -> np.ndarray:
    g = field.shape[-1]
    if g == size:
        return field
    return resized_crop(field, CropBox(0.0, 0.0, float(g), float(g)), (size, size))


def _octave_field(rng: np.random.Generator, channels: int, size: int, grids, weights) -> np.ndarray:
    """Weighted sum of blurred Gaussian grids bilinearly upsampled to ``size``."""
    total = np.zeros((channels, size, size))
    for g, w in zip(grids, weights):
        total += w * _upsample(_blur(rng.standard_normal((channels, g, g))), size)
    return total


def _grids(size: int, divisors) -> list[int]:
    return [max(2, size // d) for d in divisors]


def _class_texture(rng: np.random.Generator, channels: int, size: int) -> np.ndarray:
    grids = _grids(size, (8, 4, 2, 1))
    weights = rng.dirichlet(np.full(len(grids), 0.7))
    field = _octave_field(rng, channels, size, grids, weights)
    mixing = rng.standard_normal((channels, channels))
    return _rescale(np.einsum("ij,jhw->ihw", mixing, field))


def radial_mask(size: int, clean_radius: float) -> np.ndarray:
    """Zero inside ``clean_radius`` (fraction of the half-width), linear up to 1 at radius 1."""
    yy, xx = (np.mgrid[0:size, 0:size] + 0.5 - size / 2) / (size / 2)
    r = np.sqrt(yy**2 + xx**2)
    return np.clip((r - clean_radius) / (1.0 - clean_radius), 0.0, 1.0)


def make_synthetic_shift_dataset(spec: DatasetSpec | None = None, seed: int = 0) -> SyntheticDataset:
    spec = spec or DatasetSpec()
    c, n, ch, s = spec.n_classes, spec.n_samples, spec.channels, spec.image_size

    trng = stream(seed, "templates")
    templates = np.stack([_class_texture(trng, ch, s) for _ in range(c)])
    mask = radial_mask(s, spec.clean_radius)
    coarse = _grids(s, (8, 4))

    labels = np.arange(n) % c
    images = np.empty((n, ch, s, s))
    for i in range(n):
        srng = stream(seed, "sample", i)
        x = templates[labels[i]] + spec.pixel_noise_std * srng.standard_normal((ch, s, s))
        structure = mask * (2.0 * _rescale(_octave_field(srng, ch, s, coarse, (1.0, 1.0))) - 1.0)
        # identity components are skipped so an unshifted sample stays bit-exact
        if spec.contrast != 1.0:
            x = (x - 0.5) * spec.contrast + 0.5
        if spec.brightness:
            x = x + spec.brightness
        if spec.structure_amplitude:
            x = x + spec.structure_amplitude * structure
        images[i] = np.clip(x, 0.0, 1.0)
    return SyntheticDataset(templates, images, labels.astype(np.int64), spec, seed)


def save_dataset(ds: SyntheticDataset, directory) -> None:
    """Write ``templates.tnsr``, ``images.tnsr``, ``labels.tnsr`` and ``manifest.txt``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_tnsr(directory / "templates.tnsr", ds.templates)
    save_tnsr(directory / "images.tnsr", ds.images)
    save_tnsr(directory / "labels.tnsr", ds.labels.astype(np.float64))
    lines = [f"seed={ds.seed if ds.seed is not None else ''}"]
    if ds.spec is not None:
        lines += [f"{k}={v}" for k, v in ds.spec.to_dict().items()]
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_dataset(directory) -> SyntheticDataset:
    directory = Path(directory)
    templates = load_tnsr(directory / "templates.tnsr")
    images = load_tnsr(directory / "images.tnsr")
    labels = load_tnsr(directory / "labels.tnsr").astype(np.int64)
    manifest = {}
    mpath = directory / "manifest.txt"
    if mpath.exists():
        for line in mpath.read_text().splitlines():
            key, _, value = line.partition("=")
            if key:
                manifest[key.strip()] = value.strip()
    spec = None
    types = {f.name: f.type for f in fields(DatasetSpec)}
    if all(k in manifest for k in types):
        spec = DatasetSpec(**{k: (int if types[k] in (int, "int") else float)(manifest[k]) for k in types})
    seed = int(manifest["seed"]) if manifest.get("seed") else None
    return SyntheticDataset(templates, images, labels, spec, seed)
