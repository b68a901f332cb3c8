"""View generation: the original image plus random resized crops with flips.

Augmentation runs entirely outside the differentiation graph on plain
``C x H x W`` arrays with values in ``[0, 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError
from .rng import as_generator

__all__ = [
    "CropBox",
    "ViewRecord",
    "ViewBatch",
    "generate_views",
    "random_resized_crop",
    "sample_crop_box",
    "resized_crop",
    "horizontal_flip",
    "replay_view",
]

ASPECT_RANGE = (3.0 / 4.0, 4.0 / 3.0)


@dataclass(frozen=True)
class CropBox:
    """Continuous crop rectangle in pixel units (top-left corner plus size)."""

    top: float
    left: float
    height: float
    width: float


@dataclass(frozen=True)
class ViewRecord:
    kind: str  # "original" or "crop"
    box: CropBox | None = None
    flipped: bool = False

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "flipped": self.flipped}
        if self.box is not None:
            d["box"] = [self.box.top, self.box.left, self.box.height, self.box.width]
        return d


@dataclass
class ViewBatch:
    views: np.ndarray  # N x C x H x W
    provenance: list[ViewRecord] = field(default_factory=list)

    def __len__(self):
        return self.views.shape[0]


def _check_image(image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ConfigError(f"expected a C x H x W image, got shape {image.shape}")
    return image


def _resample_axis(n_out: int, start: float, length: float, n_src: int):
    # pixel-centre alignment, clamped to the source grid
    pos = start + (np.arange(n_out) + 0.5) * (length / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_src - 1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, n_src - 1)
    frac = pos - lo
    return lo, hi, frac


def resized_crop(image: np.ndarray, box: CropBox, out_hw: tuple[int, int] | None = None) -> np.ndarray:
    """Bilinearly resample the region ``box`` of ``image`` to ``out_hw`` (default: input size)."""
    image = _check_image(image)
    _, h, w = image.shape
    oh, ow = out_hw or (h, w)
    y0, y1, fy = _resample_axis(oh, box.top, box.height, h)
    x0, x1, fx = _resample_axis(ow, box.left, box.width, w)
    fy = fy[:, None]
    fx = fx[None, :]
    top = image[:, y0][:, :, x0] * (1.0 - fx) + image[:, y0][:, :, x1] * fx
    bottom = image[:, y1][:, :, x0] * (1.0 - fx) + image[:, y1][:, :, x1] * fx
    return top * (1.0 - fy) + bottom * fy


def sample_crop_box(
    shape_hw: tuple[int, int],
    rng,
    scale_lo: float = 0.5,
    scale_hi: float = 1.0,
    aspect: tuple[float, float] = ASPECT_RANGE,
) -> CropBox:
    if not 0.0 < scale_lo <= scale_hi <= 1.0:
        raise ConfigError(f"invalid crop scale range [{scale_lo}, {scale_hi}]")
    rng = as_generator(rng)
    h, w = shape_hw
    area = rng.uniform(scale_lo, scale_hi) * h * w
    ratio = rng.uniform(*aspect)
    cw = min(float(w), np.sqrt(area * ratio))
    ch = min(float(h), np.sqrt(area / ratio))
    top = rng.uniform(0.0, h - ch)
    left = rng.uniform(0.0, w - cw)
    return CropBox(float(top), float(left), float(ch), float(cw))


def random_resized_crop(image, rng, scale_lo: float = 0.5, scale_hi: float = 1.0,
                        aspect: tuple[float, float] = ASPECT_RANGE) -> np.ndarray:
    """Crop a random box (area fraction and aspect uniform) and resize back to ``H x W``."""
    image = _check_image(image)
    box = sample_crop_box(image.shape[1:], rng, scale_lo, scale_hi, aspect)
    return resized_crop(image, box)


def horizontal_flip(image) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(image)[..., ::-1])


def replay_view(image, record: ViewRecord) -> np.ndarray:
    """Rebuild a view from its provenance record."""
    image = _check_image(image)
    if record.kind == "original":
        return image.copy()
    out = resized_crop(image, record.box)
    return horizontal_flip(out) if record.flipped else out


def generate_views(image, n_views: int, seed, scale_lo: float = 0.5, scale_hi: float = 1.0,
                   flip_prob: float = 0.5) -> ViewBatch:
    """Return ``n_views`` views: view 0 is ``image`` itself, the rest are crop + optional flip."""
    if n_views < 2:
        raise ConfigError(f"n_views must be >= 2, got {n_views}")
    image = _check_image(image)
    if image.min() < 0.0 or image.max() > 1.0:
        raise ConfigError("image values must lie in [0, 1]")
    rng = as_generator(seed)
    views = np.empty((n_views,) + image.shape)
    views[0] = image
    provenance = [ViewRecord("original")]
    for i in range(1, n_views):
        box = sample_crop_box(image.shape[1:], rng, scale_lo, scale_hi)
        flipped = bool(rng.random() < flip_prob)
        record = ViewRecord("crop", box, flipped)
        views[i] = replay_view(image, record)
        provenance.append(record)
    return ViewBatch(views, provenance)
